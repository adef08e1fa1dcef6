"""Glue between episodes, training and evaluation for every compared method."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluation import (DEFAULT_IOU_THRESHOLD, DetectionGT, EpisodeEval, detection_gt, evaluate_episode,
                         oracle_gtbox, oracle_gtmatch)
from .learning import (SupervisedEpisode, TrainConfig, TripletConfig, mine_triplets, train_matcher,
                       train_projection)
from .matcher import (MatcherParams, MatchResult, ProjectionNet, baseline_match, extract_matches,
                      matcher_forward)
from .object_map import ObjectMap

log = logging.getLogger(__name__)

HUNGARIAN_METHODS = ("h-l2", "h-m", "h1l", "h2l", "h3l")
SINKHORN_METHODS = ("sinkhorn-fixed", "3dsmnet")
ORACLES = ("gtmatch", "gtbox")
METHODS = HUNGARIAN_METHODS + SINKHORN_METHODS + ORACLES + ("random",)
TRAINABLE = {"h1l": 1, "h2l": 2, "h3l": 3, "sinkhorn-fixed": "fixed", "3dsmnet": "adaptive"}


def supervised_episode(map_a: ObjectMap, map_b: ObjectMap, dgt: DetectionGT, episode_id: str = "") -> SupervisedEpisode:
    """Training target: detections sharing a GT id match, all others go to the dustbins."""
    match = oracle_gtmatch(dgt.ids_a, dgt.ids_b)
    return SupervisedEpisode(map_a.descriptors(), map_b.descriptors(), [(i, j) for i, j, _ in match.pairs],
                             list(match.unmatched_a), list(match.unmatched_b), episode_id)


def supervised_set(episodes, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[SupervisedEpisode]:
    out = []
    for ep in episodes:
        a, b = ep.maps["A"], ep.maps["B"]
        out.append(supervised_episode(a, b, detection_gt(a, b, ep, iou_threshold), ep.episode_id))
    return out


@dataclass
class TrainSettings:
    seed: int = 0
    d_out: int | None = None  # None: same as the descriptor dimension
    hidden: tuple = (256, 64)
    matcher: TrainConfig = field(default_factory=TrainConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    iou_threshold: float = DEFAULT_IOU_THRESHOLD


def train_method(method: str, train_eps: Sequence[SupervisedEpisode], settings: TrainSettings,
                 val_eps: Sequence[SupervisedEpisode] = ()):
    """Returns (artifact, curve) for a trainable method."""
    if method not in TRAINABLE:
        raise ValueError(f"method {method!r} has nothing to train")
    d = next((e.FA.shape[1] for e in train_eps if e.FA.size), None) or train_eps[0].FB.shape[1]
    d_out = settings.d_out or d
    kind = TRAINABLE[method]
    if isinstance(kind, int):
        rng = np.random.default_rng(settings.seed)
        triplets = [t for e in train_eps for t in mine_triplets(e.FA, e.FB, e.matches, rng)]
        cfg = TripletConfig(**{**settings.triplet.__dict__, "n_layers": kind, "d_out": d_out, "seed": settings.seed})
        return train_projection(triplets, d, cfg)
    cfg = TrainConfig(**{**settings.matcher.__dict__, "seed": settings.seed})
    return train_matcher(train_eps, config=cfg, val_episodes=val_eps, d_out=d_out, variant=kind,
                         hidden=tuple(settings.hidden))


@dataclass
class MethodOutput:
    map_a: ObjectMap
    map_b: ObjectMap
    scores: np.ndarray
    result: MatchResult
    dustbin_values: np.ndarray | None = None


def run_method(method: str, episode, artifacts: dict, iou_threshold: float = DEFAULT_IOU_THRESHOLD,
               rng: np.random.Generator | None = None, match_threshold: float | None = None) -> MethodOutput:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    a, b = episode.maps["A"], episode.maps["B"]
    if method == "gtbox":
        a, b = oracle_gtbox(episode)
    mA, mB = len(a), len(b)
    if method in ("h-l2", "h-m"):
        scores, res = baseline_match(a, b, "l2" if method == "h-l2" else "mahalanobis")
        return MethodOutput(a, b, scores, res)
    if method in ("h1l", "h2l", "h3l"):
        scores, res = baseline_match(a, b, "projected", projection=_artifact(artifacts, method, ProjectionNet))
        return MethodOutput(a, b, scores, res)
    if method == "gtmatch":
        dgt = detection_gt(a, b, episode, iou_threshold)
        res = oracle_gtmatch(dgt.ids_a, dgt.ids_b)
        scores = np.zeros((mA, mB))
        for i, j, _ in res.pairs:
            scores[i, j] = 1.0
        return MethodOutput(a, b, scores, res)
    if method == "random":
        rng = rng or np.random.default_rng(0)
        scores = rng.random((mA, mB))
        k = min(mA, mB)
        ia, ib = rng.permutation(mA)[:k], rng.permutation(mB)[:k]
        return MethodOutput(a, b, scores, MatchResult.from_pairs(
            [(int(i), int(j), float(scores[i, j])) for i, j in zip(ia, ib)], mA, mB))
    params = _artifact(artifacts, "3dsmnet" if method == "gtbox" else method, MatcherParams)
    fw = matcher_forward(a.descriptors(), b.descriptors(), params)
    kw = {} if match_threshold is None else {"match_threshold": match_threshold}
    res = extract_matches(fw.P, **kw)
    return MethodOutput(a, b, fw.P[:mA, :mB], res, fw.dustbin_values)


def _artifact(artifacts, name, kind):
    art = artifacts.get(name)
    if not isinstance(art, kind):
        raise ValueError(f"method {name!r} needs a trained {kind.__name__}")
    return art


def _mean(x: np.ndarray) -> float:
    # shifted by the first value, so a constant vector (fixed dustbin) averages to itself exactly
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(x[0] + np.mean(x - x[0]))


def evaluate_method(method: str, episodes, artifacts: dict, iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                    seed: int = 0) -> list[EpisodeEval]:
    rng = np.random.default_rng(seed)
    out = []
    for ep in episodes:
        mo = run_method(method, ep, artifacts, iou_threshold, rng)
        dgt = detection_gt(mo.map_a, mo.map_b, ep, iou_threshold)
        dmean = _mean(mo.dustbin_values) if mo.dustbin_values is not None and mo.dustbin_values.size else None
        out.append(evaluate_episode(mo.scores, mo.result, dgt, ep.episode_id, dmean))
    return out
