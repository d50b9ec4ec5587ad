"""Gaussian splatting mapping with voxel-PCA priors and Gaussian loop closure."""

import json

import numpy as np

from . import _core
from ._core import Dataset, Error, fit_voxel, psnr, ssim

__all__ = ["Dataset", "Error", "default_config", "fit_voxel", "generate_dataset", "gicp", "psnr", "render",
           "run", "ssim", "synth_config"]


def default_config():
    """Pipeline configuration with every default, as nested dicts."""
    return json.loads(_core.default_config_json())


def synth_config():
    """Synthetic dataset configuration with every default."""
    return json.loads(_core.default_synth_json())


def generate_dataset(out, config=None):
    """Writes a synthetic looped dataset. `config` may be partial."""
    _core.generate_dataset(json.dumps(config or {}), str(out))


def run(dataset, config=None, out=None):
    """Maps a dataset; returns the run report with a "timing" section."""
    return json.loads(_core.run(str(dataset), json.dumps(config or {}), "" if out is None else str(out)))


def render(map_path, pose, camera):
    """Renders a splat checkpoint from a world-from-camera pose [tx, ty, tz, qw, qx, qy, qz].

    Returns (rgb HxWx3, depth HxW)."""
    return _core.render(str(map_path), list(pose), json.dumps(camera))


def gicp(src, tar, radius=0.3, init=None):
    """Registers two Nx3 point clouds; returns the transform mapping src onto tar."""
    return _core.gicp(np.asarray(src, dtype=float), np.asarray(tar, dtype=float), radius, list(init or []))
