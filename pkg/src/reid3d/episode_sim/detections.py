"""Surrogate detector: turns a layout and its coverage into an object map."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..geometry import BoundingBox3D
from ..object_map import ObjectInstance, ObjectMap
from .catalog import Catalog
from .layout import PlacedObject


@dataclass
class DetectionNoiseConfig:
    """Error model of the detector and of its appearance descriptors.

    ``descriptor_sigma`` is ``(at full coverage, at zero coverage)``; the
    noise norm is interpolated linearly in coverage. ``nuisance_sigma``
    adds view-dependent variation confined to the catalog's nuisance
    subspace, and each tour scales all its descriptors by one gain drawn
    log-uniformly from ``gain_range``.
    """

    miss_rate: float = 0.03
    detect_floor: float = 0.9  # detection probability factor at coverage -> 0
    fp_rate: float = 3.0  # expected false positives per map
    centroid_sigma: float = 0.1
    extent_sigma: float = 0.1
    yaw_sigma: float = 0.1
    label_confusion: float = 0.1
    descriptor_sigma: tuple[float, float] = (0.1, 0.5)
    localization_sigma: float = 0.7  # extra descriptor noise of detector crops
    nuisance_sigma: float = 1.0
    gain_range: tuple[float, float] = (0.4, 2.5)
    confidence_range: tuple[float, float] = (0.99, 1.0)
    observe_all: bool = False  # treat every object as fully covered

    def __post_init__(self):
        self.descriptor_sigma = tuple(float(v) for v in self.descriptor_sigma)
        self.gain_range = tuple(float(v) for v in self.gain_range)
        self.confidence_range = tuple(float(v) for v in self.confidence_range)
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(bad))

    def violations(self) -> list[str]:
        out = []
        for name in ("miss_rate", "detect_floor", "label_confusion"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"{name} must be in [0, 1], got {v}")
        for name in ("fp_rate", "centroid_sigma", "extent_sigma", "yaw_sigma", "nuisance_sigma",
                     "localization_sigma"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if min(self.descriptor_sigma) < 0:
            out.append("descriptor_sigma must be >= 0")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            out.append(f"gain_range must satisfy 0 < lo <= hi, got {self.gain_range}")
        lo, hi = self.confidence_range
        if not 0.0 <= lo <= hi <= 1.0:
            out.append(f"confidence_range must lie in [0, 1], got {self.confidence_range}")
        return out

    @classmethod
    def noise_off(cls) -> "DetectionNoiseConfig":
        return cls(miss_rate=0.0, detect_floor=1.0, fp_rate=0.0, centroid_sigma=0.0, extent_sigma=0.0,
                   yaw_sigma=0.0, label_confusion=0.0, descriptor_sigma=(0.0, 0.0), nuisance_sigma=0.0,
                   localization_sigma=0.0,
                   gain_range=(1.0, 1.0), confidence_range=(1.0, 1.0), observe_all=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("descriptor_sigma", "gain_range", "confidence_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectionNoiseConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown noise parameters: {sorted(unknown)}")
        return cls(**doc)

    def descriptor_noise(self, cov, detector_crop: bool = False) -> np.ndarray:
        """Isotropic noise norm at coverage ``cov``; detector crops add localization noise."""
        full, zero = self.descriptor_sigma
        sig = zero + (full - zero) * np.asarray(cov, dtype=np.float64)
        if detector_crop and self.localization_sigma > 0:
            sig = np.sqrt(sig ** 2 + self.localization_sigma ** 2)
        return sig

    def detect_prob(self, cov) -> np.ndarray:
        cov = np.asarray(cov, dtype=np.float64)
        p = (1.0 - self.miss_rate) * (self.detect_floor + (1.0 - self.detect_floor) * cov)
        return np.where(cov > 0, p, 0.0)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def sample_gain(noise: DetectionNoiseConfig, rng) -> float:
    lo, hi = noise.gain_range
    if lo == hi:
        return lo
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def observe_descriptors(latents: np.ndarray, cov: np.ndarray, noise: DetectionNoiseConfig, rng,
                        nuisance_basis: np.ndarray, gain: float = 1.0, detector_crop: bool = False) -> np.ndarray:
    """``gain * unit(latent + sigma(cov) * iso + nuisance)`` for each row.

    The isotropic part has expected norm ``sigma(cov)``; the nuisance part
    lives in the span of ``nuisance_basis`` with expected norm
    ``nuisance_sigma``.
    """
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    n, d = latents.shape
    if n == 0:
        return latents.copy()
    sig = noise.descriptor_noise(cov, detector_crop).reshape(-1, 1)
    x = latents.copy()
    noisy = False
    if np.any(sig > 0):
        x = x + sig * rng.normal(size=(n, d)) / math.sqrt(d)
        noisy = True
    r = nuisance_basis.shape[1]
    if noise.nuisance_sigma > 0 and r:
        x = x + noise.nuisance_sigma * (rng.normal(size=(n, r)) / math.sqrt(r)) @ nuisance_basis.T
        noisy = True
    if noisy:
        x = _unit(x)
    return x if gain == 1.0 else gain * x


def simulate_detections(objects: list[PlacedObject], cov, noise: DetectionNoiseConfig, rng,
                        catalog: Catalog, floor_bounds, gain: float | None = None,
                        layout_tag: str = "A", episode_id: str = "", seed=None) -> ObjectMap:
    """Detect observed objects, jitter them, and append false positives.

    Unobserved objects (coverage 0) are never detected. Output order is
    shuffled so indices carry no identity information.
    """
    cov = np.ones(len(objects)) if noise.observe_all else np.asarray(cov, dtype=np.float64)
    if gain is None:
        gain = sample_gain(noise, rng)
    classes = list(catalog.classes)
    detected = rng.random(len(objects)) < noise.detect_prob(cov)
    idx = np.nonzero(detected)[0]
    latents = np.array([objects[i].model.latent for i in idx]).reshape(len(idx), catalog.descriptor_dim)
    descs = observe_descriptors(latents, cov[idx], noise, rng, catalog.nuisance_basis, gain, True)
    lo, hi = noise.confidence_range
    out = []
    for k, i in enumerate(idx):
        b = objects[i].box
        c = np.asarray(b.centroid) + noise.centroid_sigma * rng.normal(size=3)
        e = np.asarray(b.extents) * np.exp(noise.extent_sigma * rng.normal(size=3))
        yaw = b.yaw + noise.yaw_sigma * rng.normal()
        label = objects[i].model.label
        if noise.label_confusion > 0 and rng.random() < noise.label_confusion:
            others = [c_ for c_ in classes if c_ != label]
            label = others[int(rng.integers(len(others)))]
        conf = lo if lo == hi else float(rng.uniform(lo, hi))
        out.append(ObjectInstance(BoundingBox3D(tuple(c), tuple(e), yaw), label, conf, descs[k]))
    n_fp = int(rng.poisson(noise.fp_rate)) if noise.fp_rate > 0 else 0
    x0, z0, x1, z1 = floor_bounds
    for _ in range(n_fp):
        e = rng.uniform(0.3, 1.5, size=3)
        c = (rng.uniform(x0, x1), e[1] / 2, rng.uniform(z0, z1))
        desc = gain * _unit(rng.normal(size=catalog.descriptor_dim))
        conf = lo if lo == hi else float(rng.uniform(lo, hi))
        out.append(ObjectInstance(BoundingBox3D(c, tuple(e), rng.uniform(-math.pi, math.pi)),
                                  classes[int(rng.integers(len(classes)))], conf, desc))
    order = rng.permutation(len(out))
    return ObjectMap([out[k] for k in order], layout_tag, catalog.descriptor_dim, episode_id, seed)


def gt_box_map(objects: list[PlacedObject], cov, noise: DetectionNoiseConfig, rng, catalog: Catalog,
               gain: float, layout_tag: str = "A", episode_id: str = "", seed=None) -> ObjectMap:
    """Ground-truth boxes of every observed object with simulated descriptors."""
    cov = np.ones(len(objects)) if noise.observe_all else np.asarray(cov, dtype=np.float64)
    idx = np.nonzero(cov > 0)[0]
    latents = np.array([objects[i].model.latent for i in idx]).reshape(len(idx), catalog.descriptor_dim)
    descs = observe_descriptors(latents, cov[idx], noise, rng, catalog.nuisance_basis, gain)
    objs = [ObjectInstance(objects[i].box, objects[i].model.label, 1.0, descs[k], objects[i].instance_id)
            for k, i in enumerate(idx)]
    objs = [objs[k] for k in rng.permutation(len(objs))]
    return ObjectMap(objs, layout_tag, catalog.descriptor_dim, episode_id, seed)
