"""Python access to the mop restoration pipeline and its building blocks.

Images are H x W x 3 float32 arrays in [0, 1].
"""

import json
import os

from ._mop import (
    DependencyError,
    IoError,
    MopError,
    ValidationError,
    canny,
    ctf_value,
    default_config_json,
    defocus_blur,
    git_describe,
    load_image,
    make_schedule,
    procedural_texture,
    psnr,
    save_png,
    ssim,
)
from ._mop import Context as _Context


def default_config():
    return json.loads(default_config_json())


def open_run(out, config=None, seed=None, quiet=True):
    """Pipeline context for `out`. `config` is a dict overlay or a path to a JSON file."""
    if config is None:
        return _Context(str(out), seed=seed, quiet=quiet)
    if isinstance(config, (str, os.PathLike)):
        return _Context(str(out), config_path=str(config), seed=seed, quiet=quiet)
    return _Context(str(out), config_json=json.dumps(config), seed=seed, quiet=quiet)


__all__ = [
    "DependencyError", "IoError", "MopError", "ValidationError", "canny", "ctf_value", "default_config",
    "defocus_blur", "git_describe", "load_image", "make_schedule", "open_run", "procedural_texture", "psnr",
    "save_png", "ssim",
]
