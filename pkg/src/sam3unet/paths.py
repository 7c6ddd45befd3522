"""Project-relative locations and path helpers."""

from __future__ import annotations

import os
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[2]
CONFIG_DIR = PROJECT_ROOT / "config"
DEFAULT_CONFIG = CONFIG_DIR / "toy.toml"
DEFAULT_KEY_MAP = CONFIG_DIR / "sam3_key_map.txt"
DEFAULT_RUN_ROOT = Path("runs")

RUN_ROOT_ENV_VAR = "SAM3UNET_RUN_ROOT"

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
MASK_SUFFIXES = (".png",)


def resolve_path(path_like: str | os.PathLike[str] | Path, *, must_exist: bool = False) -> Path:
    """Resolve relative paths against the current directory, then the project root."""

    path = Path(path_like).expanduser()
    if not path.is_absolute():
        cwd_candidate = Path.cwd() / path
        project_candidate = PROJECT_ROOT / path
        if cwd_candidate.exists() or not project_candidate.exists():
            path = cwd_candidate
        else:
            path = project_candidate
    if must_exist and not path.exists():
        raise FileNotFoundError(path)
    return path


def run_root(configured: Path | None = None) -> Path:
    env_value = os.getenv(RUN_ROOT_ENV_VAR)
    if env_value:
        return Path(env_value).expanduser()
    return configured if configured is not None else DEFAULT_RUN_ROOT


def list_files(directory: Path, suffixes: tuple[str, ...]) -> list[Path]:
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in suffixes
    )


__all__ = [
    "CONFIG_DIR",
    "DEFAULT_CONFIG",
    "DEFAULT_KEY_MAP",
    "DEFAULT_RUN_ROOT",
    "IMAGE_SUFFIXES",
    "MASK_SUFFIXES",
    "PROJECT_ROOT",
    "RUN_ROOT_ENV_VAR",
    "list_files",
    "resolve_path",
    "run_root",
]
