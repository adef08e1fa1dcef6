"""Shared fixtures: small simulator configs and Monte-Carlo box helpers."""
from __future__ import annotations

import math

import numpy as np
import pytest

from reid3d.episode_sim import DetectionNoiseConfig, SimConfig


def inside_box(points: np.ndarray, box) -> np.ndarray:
    """Point-in-box test written from the yaw convention, independent of the clipper."""
    cx, cy, cz = box.centroid
    sx, sy, sz = box.extents
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dz = points[:, 0] - cx, points[:, 2] - cz
    lx = c * dx - s * dz
    lz = s * dx + c * dz
    return (np.abs(lx) <= sx / 2) & (np.abs(lz) <= sz / 2) & (np.abs(points[:, 1] - cy) <= sy / 2)


def sample_box(box, n: int, rng) -> np.ndarray:
    cx, cy, cz = box.centroid
    sx, sy, sz = box.extents
    local = (rng.random((n, 3)) - 0.5) * np.array([sx, sy, sz])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = cx + c * local[:, 0] + s * local[:, 2]
    z = cz - s * local[:, 0] + c * local[:, 2]
    return np.stack([x, cy + local[:, 1], z], axis=1)


def mc_iou(a, b, n: int, rng) -> float:
    """IoU from the fraction of uniform samples of ``a`` that fall in ``b``."""
    inter = a.volume * inside_box(sample_box(a, n, rng), b).mean()
    return inter / (a.volume + b.volume - inter)


def small_sim(dim: int = 16, **over) -> SimConfig:
    cfg = SimConfig(descriptor_dim=dim, n_models=240, split_sizes={"train": 2, "val": 1, "test": 2},
                    envs_per_split={"train": 2, "val": 1, "test": 2})
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_episodes():
    from reid3d.episode_sim import EpisodeFactory
    fac = EpisodeFactory(small_sim())
    return [fac.episode("train", i) for i in range(2)]


@pytest.fixture(scope="session")
def noise_off_episode():
    from reid3d.episode_sim import EpisodeFactory
    cfg = small_sim(noise=DetectionNoiseConfig.noise_off(), zero_transform=True)
    return EpisodeFactory(cfg).episode("test", 0)
