from quadbev.synthworld.world import (
    DET_CATEGORIES, FREE, GROUND, LANE_CATEGORIES, MAP_CATEGORIES, OCC_CATEGORIES,
    Box3D, GenerationError, GenSpec, LanePolyline, MapRegion, World, generate_world,
)
from quadbev.synthworld.render import Sample, render_sample
from quadbev.synthworld.rasterize import GtRasters, rasterize_gt
from quadbev.synthworld.rig import default_rig, make_camera
from quadbev.synthworld.dataset import (
    CorruptRecordError, CountMismatchError, DatasetError, DatasetVersionError,
    generate_samples, read_dataset, read_manifest, write_dataset,
)
