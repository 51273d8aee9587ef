"""Population-conditioned diffusion model for gridded human mobility trajectories."""

from .core import (
    GridSpec,
    Hotspot,
    PopulationField,
    RawPoint,
    SynthWorldConfig,
    Trajectory,
    compute_population_field,
    map_to_grid,
    resample_trajectory,
    synth_world,
)
from .denoiser import Denoiser, DenoiserConfig, step_embedding
from .diffusion import (
    GeneratedBatch,
    NoiseSchedule,
    TrainConfig,
    forward_diffuse,
    make_schedule,
    recover_locations,
    recover_probabilities,
    sample,
    train,
)
from .graph import LineConfig, SpatialGraph, build_spatial_graph, neighbor_distribution, train_line
from .metrics import MetricReport, jsd, od_similarity, population_metric, report

__version__ = "0.1.0"

__all__ = [
    "GridSpec", "Hotspot", "PopulationField", "RawPoint", "SynthWorldConfig", "Trajectory",
    "compute_population_field", "map_to_grid", "resample_trajectory", "synth_world",
    "Denoiser", "DenoiserConfig", "step_embedding",
    "GeneratedBatch", "NoiseSchedule", "TrainConfig", "forward_diffuse", "make_schedule",
    "recover_locations", "recover_probabilities", "sample", "train",
    "LineConfig", "SpatialGraph", "build_spatial_graph", "neighbor_distribution", "train_line",
    "MetricReport", "jsd", "od_similarity", "population_metric", "report",
    "__version__",
]
