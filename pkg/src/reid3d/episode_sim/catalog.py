"""Object model catalog with disjoint train/val/test splits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_CLASSES = (
    # large indoor classes
    "chair", "bed", "toilet", "couch", "potted_plant",
    # scanned household objects
    "bag", "figurine", "plant", "puzzle_toy", "vehicle_toy",
    "lotion", "doll_toy", "cartridge", "dietary_supplement", "shoe",
)

# rough (x, y, z) aspect of each class before scaling to the sampled size
_CLASS_ASPECT = {
    "chair": (0.55, 0.9, 0.55), "bed": (2.0, 0.6, 1.6), "toilet": (0.4, 0.75, 0.7),
    "couch": (2.0, 0.85, 0.9), "potted_plant": (0.5, 1.0, 0.5), "bag": (0.45, 0.5, 0.25),
    "figurine": (0.3, 0.6, 0.3), "plant": (0.4, 0.8, 0.4), "puzzle_toy": (0.5, 0.2, 0.5),
    "vehicle_toy": (0.6, 0.3, 0.3), "lotion": (0.15, 0.4, 0.15), "doll_toy": (0.3, 0.7, 0.2),
    "cartridge": (0.4, 0.2, 0.3), "dietary_supplement": (0.2, 0.35, 0.2), "shoe": (0.6, 0.3, 0.25),
}

SPLITS = ("train", "val", "test")


@dataclass
class ObjectModel:
    model_id: str
    label: str
    base_extents: tuple[float, float, float]
    latent: np.ndarray
    split: str


@dataclass
class Catalog:
    models: list[ObjectModel]
    classes: tuple[str, ...]
    descriptor_dim: int
    seed: int
    class_means: np.ndarray
    nuisance_basis: np.ndarray  # (d, r) orthonormal directions of view-dependent variation

    def by_split(self, split: str) -> list[ObjectModel]:
        return [m for m in self.models if m.split == split]

    def model(self, model_id: str) -> ObjectModel:
        return self._index[model_id]

    def __post_init__(self):
        self._index = {m.model_id: m for m in self.models}

    def to_dict(self) -> dict:
        return {
            "version": "reid3d-catalog/1",
            "seed": self.seed,
            "descriptor_dim": self.descriptor_dim,
            "classes": list(self.classes),
            "class_means": self.class_means.tolist(),
            "nuisance_basis": self.nuisance_basis.tolist(),
            "models": [
                {"model_id": m.model_id, "label": m.label, "base_extents": list(m.base_extents),
                 "latent": m.latent.tolist(), "split": m.split}
                for m in self.models
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Catalog":
        models = [ObjectModel(r["model_id"], r["label"], tuple(r["base_extents"]),
                              np.asarray(r["latent"], dtype=np.float64), r["split"]) for r in doc["models"]]
        return cls(models, tuple(doc["classes"]), int(doc["descriptor_dim"]), int(doc["seed"]),
                   np.asarray(doc["class_means"], dtype=np.float64),
                   np.asarray(doc["nuisance_basis"], dtype=np.float64).reshape(int(doc["descriptor_dim"]), -1))


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_catalog(n_models: int = 632, descriptor_dim: int = 256, classes=DEFAULT_CLASSES,
                 split_fractions=(0.7, 0.1, 0.2), instance_spread: float = 0.8,
                 instance_rank: int | None = None, common_weight: float = 0.7,
                 nuisance_rank: int = 8, seed: int = 0) -> Catalog:
    """Sample a catalog of object models.

    Appearance latents are ``unit(common_weight * c0 + class_mean + offset)``
    where ``c0`` is shared by all real objects and the instance offset, of
    expected norm ``instance_spread``, lies in a random subspace of
    dimension ``instance_rank`` (default ``d // 4``). Each class's models are
    split train/val/test so no model appears in two splits.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA7]))
    d = descriptor_dim
    rank = max(1, min(d, instance_rank if instance_rank is not None else d // 4))
    basis = np.linalg.qr(rng.normal(size=(d, min(d, rank + nuisance_rank))))[0]
    inst_basis, nuisance_basis = basis[:, :rank], basis[:, rank:rank + nuisance_rank]
    common = _unit(rng.normal(size=d))
    class_means = _unit(rng.normal(size=(len(classes), d)))
    per_class = np.full(len(classes), n_models // len(classes))
    per_class[: n_models % len(classes)] += 1
    models = []
    for c, label in enumerate(classes):
        n = int(per_class[c])
        offsets = (rng.normal(size=(n, rank)) * (instance_spread / np.sqrt(rank))) @ inst_basis.T
        latents = _unit(common_weight * common + class_means[c] + offsets)
        aspect = np.asarray(_CLASS_ASPECT.get(label, (0.5, 0.5, 0.5)))
        n_train = int(round(split_fractions[0] * n))
        n_val = int(round(split_fractions[1] * n))
        for k in range(n):
            split = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
            ext = aspect * np.exp(rng.normal(0.0, 0.15, size=3))
            models.append(ObjectModel(f"{label}-{k:03d}", label, tuple(float(e) for e in ext), latents[k], split))
    return Catalog(models, tuple(classes), d, seed, class_means, nuisance_basis)
