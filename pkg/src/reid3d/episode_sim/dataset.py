"""Episode generation, the episode document format and dataset persistence."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..geometry import RigidTransform2D
from ..object_map import ObjectInstance, ObjectMap, map_from_dict, map_to_dict
from .catalog import SPLITS, Catalog, make_catalog
from .detections import DetectionNoiseConfig, gt_box_map, sample_gain, simulate_detections
from .environment import Environment, GenerationError, make_environment
from .layout import (SUPERCATEGORIES, Layout, collisions, modify_layout, sample_initial_layout,
                     sample_transform, transform_layout_b)
from .tours import coverage, sample_tour

log = logging.getLogger(__name__)

EPISODE_SCHEMA = "reid3d-episode/1"
DATASET_SCHEMA = "reid3d-dataset/1"
DEFAULT_SPLIT_SIZES = {"train": 461, "val": 65, "test": 126}
DEFAULT_ENVS_PER_SPLIT = {"train": 61, "val": 11, "test": 18}
MAX_ATTEMPTS = 20


class EpisodeFormatError(ValueError):
    pass


@dataclass
class SimConfig:
    seed: int = 0
    split_sizes: dict = field(default_factory=lambda: dict(DEFAULT_SPLIT_SIZES))
    envs_per_split: dict = field(default_factory=lambda: dict(DEFAULT_ENVS_PER_SPLIT))
    descriptor_dim: int = 256
    n_models: int = 632
    instance_spread: float = 0.8
    instance_rank: int | None = None
    common_weight: float = 0.7
    nuisance_rank: int = 8
    n_objects: int = 30
    size_range: tuple = (1.0, 1.5)
    receptacle_prob: float = 0.5
    area_range: tuple = (100.0, 600.0)
    n_rooms_range: tuple = (2, 6)
    translation_range: float = 10.0
    zero_transform: bool = False
    n_candidates: int = 1000
    candidate_clearance: float = 1.0
    min_separation: float = 2.0
    planner_clearance: float = 0.25
    fov_deg: float = 90.0
    max_range: float = 2.75
    noise: DetectionNoiseConfig = field(default_factory=DetectionNoiseConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = self.noise.to_dict()
        for k in ("size_range", "area_range", "n_rooms_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown simulator parameters: {sorted(unknown)}")
        if "noise" in doc and isinstance(doc["noise"], dict):
            doc["noise"] = DetectionNoiseConfig.from_dict(doc["noise"])
        for k in ("size_range", "area_range", "n_rooms_range"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return cls(**doc)

    def catalog(self) -> Catalog:
        return make_catalog(self.n_models, self.descriptor_dim, instance_spread=self.instance_spread,
                            instance_rank=self.instance_rank, common_weight=self.common_weight,
                            nuisance_rank=self.nuisance_rank, seed=self.seed)


# ---------------------------------------------------------------------------
# episode record
# ---------------------------------------------------------------------------

@dataclass
class GroundTruth:
    """Correspondences between the two ground-truth layouts (list indices).

    ``matches``/``removed``/``added`` describe the layouts; the ``visible_*``
    fields restrict them to objects seen by the respective tour, in
    instance ids.
    """

    matches: list[tuple[int, int]]
    removed: list[int]
    added: list[int]
    supercategory: dict[int, str]
    visible_matches: list[int] = field(default_factory=list)
    visible_unmatched_a: list[int] = field(default_factory=list)
    visible_unmatched_b: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "matches": [list(p) for p in self.matches],
            "removed": list(self.removed),
            "added": list(self.added),
            "supercategory": {str(k): v for k, v in sorted(self.supercategory.items())},
            "visible": {"matches": list(self.visible_matches),
                        "unmatched_a": list(self.visible_unmatched_a),
                        "unmatched_b": list(self.visible_unmatched_b)},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        sup = {int(k): v for k, v in doc["supercategory"].items()}
        bad = sorted(set(sup.values()) - set(SUPERCATEGORIES))
        if bad:
            raise EpisodeFormatError(f"unknown supercategory labels {bad}")
        vis = doc.get("visible", {})
        return cls([tuple(p) for p in doc["matches"]], list(doc["removed"]), list(doc["added"]), sup,
                   list(vis.get("matches", [])), list(vis.get("unmatched_a", [])),
                   list(vis.get("unmatched_b", [])))


@dataclass
class EpisodePair:
    episode_id: str
    split: str
    seed: int
    env_id: str
    transform: RigidTransform2D
    maps: dict[str, ObjectMap]  # detections, "A" and "B"
    gt_maps: dict[str, ObjectMap]  # ground-truth layouts with instance ids and latent descriptors
    gtbox_maps: dict[str, ObjectMap]  # observed GT boxes with simulated descriptors
    gt: GroundTruth
    coverage: dict[str, dict[int, float]]
    tours: dict[str, dict] = field(default_factory=dict)
    gains: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": EPISODE_SCHEMA,
            "episode_id": self.episode_id,
            "split": self.split,
            "seed": self.seed,
            "env_id": self.env_id,
            "transform": {"rotation_y": self.transform.rotation_y, "translation": list(self.transform.translation)},
            "maps": {k: map_to_dict(v) for k, v in self.maps.items()},
            "gt_maps": {k: map_to_dict(v) for k, v in self.gt_maps.items()},
            "gtbox_maps": {k: map_to_dict(v) for k, v in self.gtbox_maps.items()},
            "gt": self.gt.to_dict(),
            "coverage": {k: {str(i): c for i, c in sorted(v.items())} for k, v in self.coverage.items()},
            "tours": self.tours,
            "gains": self.gains,
        }

    @classmethod
    def from_dict(cls, doc: dict, source: str = "<episode>") -> "EpisodePair":
        if not isinstance(doc, dict) or doc.get("version") != EPISODE_SCHEMA:
            raise EpisodeFormatError(f"{source}: not a {EPISODE_SCHEMA} document")
        try:
            tr = doc["transform"]
            return cls(
                doc["episode_id"], doc["split"], int(doc["seed"]), doc["env_id"],
                RigidTransform2D(float(tr["rotation_y"]), tuple(tr["translation"])),
                {k: map_from_dict(v, f"{source}: maps.{k}") for k, v in doc["maps"].items()},
                {k: map_from_dict(v, f"{source}: gt_maps.{k}") for k, v in doc["gt_maps"].items()},
                {k: map_from_dict(v, f"{source}: gtbox_maps.{k}") for k, v in doc["gtbox_maps"].items()},
                GroundTruth.from_dict(doc["gt"]),
                {k: {int(i): float(c) for i, c in v.items()} for k, v in doc["coverage"].items()},
                doc.get("tours", {}),
                doc.get("gains", {}),
            )
        except KeyError as exc:
            raise EpisodeFormatError(f"{source}: missing field {exc}") from None

    def validate(self) -> list[str]:
        """Invariant violations of this episode (empty when valid)."""
        out = []
        ga, gb = self.gt_maps["A"], self.gt_maps["B"]
        ids_a, ids_b = ga.instance_ids(), gb.instance_ids()
        sup = self.gt.supercategory
        for i, j in self.gt.matches:
            if ids_a[i] != ids_b[j]:
                out.append(f"match ({i}, {j}) joins different instances")
        parts = {c: 0 for c in SUPERCATEGORIES}
        for c in sup.values():
            parts[c] += 1
        if set(sup) != set(ids_a) | set(ids_b):
            out.append("supercategory labels do not cover exactly the instances of both layouts")
        if len(self.gt.matches) + len(self.gt.removed) != len(ga):
            out.append("matches + removed != |layout A|")
        if len(self.gt.matches) + len(self.gt.added) != len(gb):
            out.append("matches + added != |layout B|")
        vis_a = sum(1 for i in ids_a if self.coverage["A"].get(i, 0.0) > 0)
        if len(self.gt.visible_matches) + len(self.gt.visible_unmatched_a) != vis_a:
            out.append("visible matches + visible unmatched A != visible objects of A")
        for tag, m in (("A", ga), ("B", gb)):
            if collisions(m.boxes(), exact=True):
                out.append(f"layout {tag} has colliding objects")
        return out


def _gt_map(layout: Layout, tag: str, catalog: Catalog, episode_id: str, seed: int) -> ObjectMap:
    objs = [ObjectInstance(o.box, o.model.label, 1.0, o.model.latent, o.instance_id) for o in layout.objects]
    return ObjectMap(objs, tag, catalog.descriptor_dim, episode_id, seed)


def generate_episode(env: Environment, catalog: Catalog, split: str, cfg: SimConfig, seed: int,
                     episode_id: str) -> EpisodePair:
    """One paired-layout episode, fully determined by ``seed``."""
    models = catalog.by_split(split)
    ss = np.random.SeedSequence(seed)
    r_lay, r_ta, r_tb, r_tr, r_da, r_db, r_ga, r_gb = [np.random.default_rng(s) for s in ss.spawn(8)]
    layout_a = sample_initial_layout(env, models, cfg.n_objects, r_lay, cfg.size_range, cfg.receptacle_prob)
    layout_b, change = modify_layout(env, layout_a, models, r_lay, cfg.size_range, cfg.receptacle_prob)
    tour_kw = dict(n_candidates=cfg.n_candidates, candidate_clearance=cfg.candidate_clearance,
                   min_separation=cfg.min_separation, planner_clearance=cfg.planner_clearance)
    tour_a = sample_tour(env, r_ta, layout_a.boxes(), **tour_kw)
    tour_b = sample_tour(env, r_tb, layout_b.boxes(), **tour_kw)
    cov_kw = dict(fov_deg=cfg.fov_deg, max_range=cfg.max_range)
    cov_a = coverage(tour_a.path, env, layout_a.boxes(), [o.support for o in layout_a.objects], **cov_kw)
    cov_b = coverage(tour_b.path, env, layout_b.boxes(), [o.support for o in layout_b.objects], **cov_kw)
    if cfg.noise.observe_all:
        cov_a, cov_b = np.ones(len(layout_a)), np.ones(len(layout_b))

    noise = cfg.noise
    gain_a, gain_b = sample_gain(noise, r_da), sample_gain(noise, r_db)
    bounds = env.bounds
    det_a = simulate_detections(layout_a.objects, cov_a, noise, r_da, catalog, bounds, gain_a, "A", episode_id, seed)
    det_b = simulate_detections(layout_b.objects, cov_b, noise, r_db, catalog, bounds, gain_b, "B", episode_id, seed)
    gtb_a = gt_box_map(layout_a.objects, cov_a, noise, r_ga, catalog, gain_a, "A", episode_id, seed)
    gtb_b = gt_box_map(layout_b.objects, cov_b, noise, r_gb, catalog, gain_b, "B", episode_id, seed)

    transform = RigidTransform2D(0.0, (0.0, 0.0)) if cfg.zero_transform else sample_transform(r_tr, cfg.translation_range)
    layout_b_t = transform_layout_b(layout_b, transform)
    det_b = ObjectMap([ObjectInstance(b, o.label, o.confidence, o.descriptor, o.instance_id)
                       for o, b in zip(det_b.objects, transform.apply_boxes(det_b.boxes()))],
                      "B", det_b.descriptor_dim, episode_id, seed)
    gtb_b = ObjectMap([ObjectInstance(b, o.label, o.confidence, o.descriptor, o.instance_id)
                       for o, b in zip(gtb_b.objects, transform.apply_boxes(gtb_b.boxes()))],
                      "B", gtb_b.descriptor_dim, episode_id, seed)

    ids_a = [o.instance_id for o in layout_a.objects]
    ids_b = [o.instance_id for o in layout_b.objects]
    va = {i for i, c in zip(ids_a, cov_a) if c > 0}
    vb = {i for i, c in zip(ids_b, cov_b) if c > 0}
    vis_m = sorted(va & vb)
    gt = GroundTruth(change.matches, change.removed, change.added, change.supercategory,
                     vis_m, sorted(va - vb), sorted(vb - va))
    return EpisodePair(
        episode_id, split, int(seed), env.env_id, transform,
        {"A": det_a, "B": det_b},
        {"A": _gt_map(layout_a, "A", catalog, episode_id, seed), "B": _gt_map(layout_b_t, "B", catalog, episode_id, seed)},
        {"A": gtb_a, "B": gtb_b},
        gt,
        {"A": {int(i): float(c) for i, c in zip(ids_a, cov_a)}, "B": {int(i): float(c) for i, c in zip(ids_b, cov_b)}},
        {"A": tour_a.to_dict(), "B": tour_b.to_dict(transform)},
        {"A": gain_a, "B": gain_b},
    )


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _seed_for(cfg_seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([cfg_seed, *path]).generate_state(1, dtype=np.uint32)[0])


def _split_index(split: str) -> int:
    return SPLITS.index(split) if split in SPLITS else 1000 + sum(map(ord, split))


class EpisodeFactory:
    """Builds episodes of one configuration; environments are cached per split."""

    def __init__(self, cfg: SimConfig, catalog: Catalog | None = None):
        self.cfg = cfg
        self.catalog = catalog or cfg.catalog()
        self._envs: dict[str, list[Environment]] = {}

    def environments(self, split: str) -> list[Environment]:
        if split not in self._envs:
            n = int(self.cfg.envs_per_split.get(split, 1))
            s = _split_index(split)
            self._envs[split] = [
                make_environment(_seed_for(self.cfg.seed, s, 10_000 + k), self.cfg.area_range,
                                 self.cfg.n_rooms_range, env_id=f"{split}-env{k:03d}")
                for k in range(n)
            ]
        return self._envs[split]

    def episode(self, split: str, index: int) -> EpisodePair:
        envs = self.environments(split)
        s = _split_index(split)
        episode_id = f"{split}-{index:05d}"
        last = None
        for attempt in range(MAX_ATTEMPTS):
            seed = _seed_for(self.cfg.seed, s, index, attempt)
            env = envs[seed % len(envs)]
            try:
                return generate_episode(env, self.catalog, split, self.cfg, seed, episode_id)
            except GenerationError as exc:
                log.debug("episode %s attempt %d failed: %s", episode_id, attempt, exc)
                last = exc
        raise GenerationError(f"episode {episode_id}: {MAX_ATTEMPTS} attempts failed; last: {last}")


def _dump(doc, path: Path):
    try:
        path.write_text(json.dumps(doc, allow_nan=False, sort_keys=True, separators=(",", ":")))
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def _work(args):
    factory, split, index, out = args
    ep = factory.episode(split, index)
    _dump(ep.to_dict(), out / split / f"{ep.episode_id}.json")
    return split, ep.episode_id


def generate_dataset(out_dir, cfg: SimConfig | None = None, threads: int = 1) -> dict[str, list[str]]:
    """Write catalog, environments and every split's episodes under ``out_dir``.

    Output bytes depend only on ``cfg``; ``threads`` only changes speed.
    """
    cfg = cfg or SimConfig()
    out = Path(out_dir)
    factory = EpisodeFactory(cfg)
    try:
        for split in cfg.split_sizes:
            (out / split).mkdir(parents=True, exist_ok=True)
        (out / "environments").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create dataset directories ({exc.strerror or exc})") from exc
    _dump(factory.catalog.to_dict(), out / "catalog.json")
    jobs = []
    for split, n in cfg.split_sizes.items():
        for env in factory.environments(split):
            _dump(env.to_dict(), out / "environments" / f"{env.env_id}.json")
        jobs += [(factory, split, i, out) for i in range(int(n))]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(_work, jobs, chunksize=4))
    else:
        results = [_work(j) for j in jobs]
    index = {s: [] for s in cfg.split_sizes}
    for split, eid in results:
        index[split].append(eid)
    _dump({"version": DATASET_SCHEMA, "config": cfg.to_dict(), "episodes": index}, out / "dataset.json")
    return index


def load_episode(path) -> EpisodePair:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise EpisodeFormatError(f"{path}: {exc}") from None
    return EpisodePair.from_dict(doc, str(path))


def load_split(root, split: str) -> list[EpisodePair]:
    root = Path(root)
    manifest = root / "dataset.json"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: no dataset here")
    ids = json.loads(manifest.read_text())["episodes"].get(split, [])
    return [load_episode(root / split / f"{eid}.json") for eid in ids]


def load_dataset_config(root) -> SimConfig:
    return SimConfig.from_dict(json.loads((Path(root) / "dataset.json").read_text())["config"])
