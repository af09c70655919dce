"""Command-line tools, run configuration and checkpoint files."""

from .checkpoint import Checkpoint, CheckpointError, TruncatedCheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .main import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, build_parser, main

__all__ = [
    "Checkpoint", "CheckpointError", "TruncatedCheckpointError", "load_checkpoint", "save_checkpoint",
    "ConfigError", "RunConfig", "load_config",
    "EXIT_IO", "EXIT_NUMERICAL", "EXIT_OK", "EXIT_USAGE", "build_parser", "main",
]
