"""Command line, run configuration and experiment recipes."""
from .cli import main
from .config import ConfigError, RunConfig, build_config, load_config

__all__ = ["main", "ConfigError", "RunConfig", "build_config", "load_config"]
