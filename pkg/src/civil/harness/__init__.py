"""Operational surface: run configuration, CLI commands, teleop service."""

from .cli import build_parser, cli_eval, cli_gen_data, cli_theory, cli_train, main, serve
from .config import DATA_ROOT_ENV, RunConfig, data_root
from .service import create_app

__all__ = [
    "DATA_ROOT_ENV",
    "RunConfig",
    "build_parser",
    "cli_eval",
    "cli_gen_data",
    "cli_theory",
    "cli_train",
    "create_app",
    "data_root",
    "main",
    "serve",
]
