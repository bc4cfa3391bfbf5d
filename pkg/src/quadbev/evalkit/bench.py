"""Discount factor and the quad-vs-baselines efficiency benchmark."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import torch

from quadbev.nets.flops import baseline_macs, flops_count, total_macs
from quadbev.nets.model import TASKS, FrameInput, QuadBEV


@dataclass
class DiscountFactor:
    ratios: list[float]
    cumulative: float


def discount_factor(multi: Sequence[float], base: Sequence[float]) -> DiscountFactor:
    """Product over tasks of multitask score / single-task baseline score."""
    if len(multi) != len(base):
        raise ValueError("score lists differ in length")
    if any(not b > 0 for b in base):
        raise ValueError("baseline scores must be positive")
    ratios = [m / b for m, b in zip(multi, base)]
    return DiscountFactor(ratios, math.prod(ratios))


@dataclass
class EfficiencyReport:
    quad_macs: int
    single_macs: dict[str, int]
    baseline_macs: int
    mac_ratio: float
    quad_latency_ms: list[float] = field(default_factory=list)
    baseline_latency_ms: list[float] = field(default_factory=list)

    @staticmethod
    def _stats(xs):
        if not xs:
            return float("nan"), float("nan")
        return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else float("nan"))

    @property
    def quad_latency(self):
        return self._stats(self.quad_latency_ms)

    @property
    def baseline_latency(self):
        return self._stats(self.baseline_latency_ms)

    @property
    def latency_ratio(self) -> float:
        return self.quad_latency[0] / self.baseline_latency[0]

    def rows(self) -> list[dict]:
        qm, qs = self.quad_latency
        bm, bs = self.baseline_latency
        rows = [{"mode": "quad", "macs": self.quad_macs, "latency_ms_mean": qm, "latency_ms_sd": qs}]
        for t, m in self.single_macs.items():
            rows.append({"mode": f"single:{t}", "macs": m, "latency_ms_mean": "", "latency_ms_sd": ""})
        rows.append({"mode": "baselines_sum", "macs": self.baseline_macs, "latency_ms_mean": bm, "latency_ms_sd": bs})
        rows.append({"mode": "ratio", "macs": self.mac_ratio, "latency_ms_mean": qm / bm if bm == bm else "",
                     "latency_ms_sd": ""})
        return rows


def efficiency_benchmark(model: QuadBEV, frames: Sequence[FrameInput], repeats: int = 5, warmup: int = 1) -> EfficiencyReport:
    """MACs from the analytic counter; wall clock for one quad forward vs four single-task forwards."""
    cfg = model.config
    single = {t: total_macs(cfg, ("single", t)) for t in TASKS}
    quad = total_macs(cfg, "quad")
    rep = EfficiencyReport(quad, single, baseline_macs(cfg), quad / baseline_macs(cfg))
    if repeats <= 0:
        return rep
    model.eval()
    with torch.no_grad():
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            model(frames, tasks=TASKS)
            t1 = time.perf_counter()
            for t in TASKS:
                model(frames, tasks=(t,))
            t2 = time.perf_counter()
            if i >= warmup:
                rep.quad_latency_ms.append((t1 - t0) * 1e3)
                rep.baseline_latency_ms.append((t2 - t1) * 1e3)
    return rep


__all__ = ["DiscountFactor", "discount_factor", "EfficiencyReport", "efficiency_benchmark", "flops_count"]
