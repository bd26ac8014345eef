from .config import COMPONENTS, VARIANTS, RunConfig, TrainConfig, load_config, parse_config
from .runner import RunReport, benchmark, run_benchmark, run_variant, write_report
from .storage import load_model, save_model
from .training import run_erm, train_source

__all__ = [
    "COMPONENTS",
    "VARIANTS",
    "RunConfig",
    "RunReport",
    "TrainConfig",
    "benchmark",
    "load_config",
    "load_model",
    "parse_config",
    "run_benchmark",
    "run_erm",
    "run_variant",
    "save_model",
    "train_source",
    "write_report",
]
