from quadbev.nets.model import (
    EXTRACTOR_GROUPS, HEAD_OF, PARAMETRIC_GROUPS, TASKS,
    FrameInput, ModelConfig, ModuleGroup, QuadBEV, TaskHeadOutputs, occ_to_voxels, voxels_to_occ,
)
from quadbev.nets.flops import baseline_macs, flops_count, quad_ratio, total_macs
from quadbev.nets.checkpoint import CheckpointBundle, CheckpointError, load_checkpoint, save_checkpoint
