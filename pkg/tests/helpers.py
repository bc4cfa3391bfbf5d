"""Shared test utilities: central finite differences and small fixtures."""
import numpy as np
import torch


def central_fd_check(fn, tensors, eps=1e-4, n_coords=None, seed=0):
    """Max relative error between autograd and central differences.

    ``fn`` maps the list ``tensors`` (float64, requires_grad) to a scalar.
    When ``n_coords`` is given only that many random coordinates per tensor
    are probed.
    """
    out = fn(*tensors)
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.detach().reshape(-1)
        idxs = range(flat.numel()) if n_coords is None else rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        num = []
        ana = []
        for i in idxs:
            orig = flat[i].item()
            with torch.no_grad():
                t.view(-1)[i] = orig + eps
                fp = fn(*tensors).item()
                t.view(-1)[i] = orig - eps
                fm = fn(*tensors).item()
                t.view(-1)[i] = orig
            num.append((fp - fm) / (2 * eps))
            ana.append(g.reshape(-1)[i].item())
        num, ana = np.array(num), np.array(ana)
        denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - ana) / denom))
    return worst


ACCEPTANCE = []  # (criterion, passed, detail) lines gathered by the acceptance suite


def report(criterion, passed, detail=""):
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed
