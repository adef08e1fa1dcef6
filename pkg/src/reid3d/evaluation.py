"""Re-identification metrics: CMC, mAP, matching accuracy and tuple scores.

Percentages are on a 0-100 scale. Metrics over an empty set are ``None``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import pairwise_iou_3d
from .matcher import MatchResult
from .object_map import ObjectMap

DEFAULT_IOU_THRESHOLD = 0.25
CATEGORIES = ("moved", "unchanged", "removed", "added")
B_SIDE = ("moved", "unchanged", "added")


class EvaluationDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ground-truth ids for detections
# ---------------------------------------------------------------------------

def _boxes_and_ids(gt):
    if isinstance(gt, ObjectMap):
        ids = [o.instance_id if o.instance_id is not None else k for k, o in enumerate(gt.objects)]
        return gt.boxes(), ids
    boxes = list(gt)
    return boxes, list(range(len(boxes)))


def assign_gt_ids(detections, gt, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list:
    """Greedy highest-IoU-first one-to-one assignment of GT ids to detections.

    ``detections`` and ``gt`` are ObjectMaps or sequences of boxes in the
    same frame. GT ids are the GT objects' ``instance_id`` (or their index).
    Ties resolve toward the lower detection, then the lower GT index.
    """
    det_boxes = detections.boxes() if isinstance(detections, ObjectMap) else list(detections)
    gt_boxes, gt_ids = _boxes_and_ids(gt)
    out = [None] * len(det_boxes)
    if not det_boxes or not gt_boxes:
        return out
    iou = pairwise_iou_3d(det_boxes, gt_boxes)
    di, gi = np.nonzero(iou >= iou_threshold)
    order = sorted(zip(-iou[di, gi], di, gi))
    used_d, used_g = set(), set()
    for _, d, g in order:
        if d in used_d or g in used_g:
            continue
        used_d.add(d)
        used_g.add(g)
        out[int(d)] = gt_ids[int(g)]
    return out


# ---------------------------------------------------------------------------
# rank lists
# ---------------------------------------------------------------------------

@dataclass
class RankList:
    query: int  # index in A
    target: int  # index of the correct match in B
    position: int  # 1-based rank of the target
    gallery_size: int
    category: str | None = None


def ranking(scores_row: np.ndarray) -> np.ndarray:
    """Gallery indices by descending score; ties keep index order."""
    return np.argsort(-np.asarray(scores_row, dtype=np.float64), kind="stable")


def rank_lists(scores: np.ndarray, ids_a: Sequence, ids_b: Sequence, categories: dict | None = None) -> list[RankList]:
    """One rank list per A detection whose GT id also occurs among B detections."""
    scores = np.asarray(scores, dtype=np.float64)
    where_b = {k: j for j, k in enumerate(ids_b) if k is not None}
    out = []
    for i, k in enumerate(ids_a):
        if k is None or k not in where_b:
            continue
        j = where_b[k]
        order = ranking(scores[i])
        pos = int(np.nonzero(order == j)[0][0]) + 1
        out.append(RankList(i, j, pos, len(ids_b), None if categories is None else categories.get(k)))
    return out


def cmc(lists: Sequence[RankList], k: int) -> float | None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not lists:
        return None
    return 100.0 * sum(r.position <= k for r in lists) / len(lists)


def reid_map(lists: Sequence[RankList]) -> float | None:
    """Mean of 1/position (one true match per query), in percent."""
    if not lists:
        return None
    return 100.0 * float(np.mean([1.0 / r.position for r in lists]))


# ---------------------------------------------------------------------------
# matching accuracy
# ---------------------------------------------------------------------------

def partners(ids_a: Sequence, ids_b: Sequence) -> list[int | None]:
    """For each B detection, the A detection sharing its GT id (or None)."""
    where_a = {k: i for i, k in enumerate(ids_a) if k is not None}
    return [where_a.get(k) if k is not None else None for k in ids_b]


def outcomes_b(result: MatchResult, ids_a: Sequence, ids_b: Sequence) -> list[tuple[int, bool]]:
    """(B index, correct) for every B detection with a GT id.

    Correct means matched to its GT partner, or left unmatched when no A
    detection shares its id. Detections without an id (false positives)
    are skipped.
    """
    got = result.partner_of_b()
    out = []
    for j, (k, p) in enumerate(zip(ids_b, partners(ids_a, ids_b))):
        if k is None:
            continue
        out.append((j, got.get(j) == p if p is not None else j not in got))
    return out


def outcomes_a_unpartnered(result: MatchResult, ids_a: Sequence, ids_b: Sequence) -> list[tuple[int, bool]]:
    """(A index, correct) for A detections whose id is absent from B; correct iff unmatched."""
    in_b = {k for k in ids_b if k is not None}
    got = result.pair_map()
    return [(i, i not in got) for i, k in enumerate(ids_a) if k is not None and k not in in_b]


def matching_accuracy(result: MatchResult, ids_a: Sequence, ids_b: Sequence) -> float | None:
    out = outcomes_b(result, ids_a, ids_b)
    if not out:
        return None
    return 100.0 * sum(c for _, c in out) / len(out)


# ---------------------------------------------------------------------------
# tuples
# ---------------------------------------------------------------------------

@dataclass
class TupleRecord:
    id_a: object
    id_b: object
    det_a: int | None
    det_b: int | None
    kind: str  # TP, FP or FN


@dataclass
class TupleScores:
    tp: int
    fp: int
    fn: int
    records: list[TupleRecord] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return 100.0 * self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def precision_undefined(self) -> bool:
        return self.tp + self.fp == 0

    @property
    def recall(self) -> float | None:
        return 100.0 * self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def accuracy(self) -> float | None:
        n = self.tp + self.fp + self.fn
        return 100.0 * self.tp / n if n else None


def predicted_tuples(result: MatchResult, ids_a: Sequence, ids_b: Sequence) -> list[TupleRecord]:
    recs = [TupleRecord(ids_a[i], ids_b[j], i, j, "") for i, j, _ in result.pairs]
    recs += [TupleRecord(ids_a[i], None, i, None, "") for i in result.unmatched_a]
    recs += [TupleRecord(None, ids_b[j], None, j, "") for j in result.unmatched_b]
    return recs


def gt_tuples_from_visibility(matches: Iterable, unmatched_a: Iterable, unmatched_b: Iterable) -> set:
    return {(k, k) for k in matches} | {(k, None) for k in unmatched_a} | {(None, k) for k in unmatched_b}


def tuple_metrics(result: MatchResult, ids_a: Sequence, ids_b: Sequence, gt_tuples) -> TupleScores:
    """Compare predicted (idA, idB) tuples against the GT tuple set.

    A detection without a GT id can never form a true tuple, so any tuple
    containing one is a false positive.
    """
    gt = set(gt_tuples)
    recs = predicted_tuples(result, ids_a, ids_b)
    hit = set()
    for r in recs:
        real = (r.det_a is None or r.id_a is not None) and (r.det_b is None or r.id_b is not None)
        key = (r.id_a, r.id_b)
        if real and key in gt and key not in hit:
            r.kind = "TP"
            hit.add(key)
        else:
            r.kind = "FP"
    missed = sorted(gt - hit, key=repr)
    recs += [TupleRecord(a, b, None, None, "FN") for a, b in missed]
    tp = len(hit)
    return TupleScores(tp, len(recs) - tp - len(missed), len(missed), recs)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def oracle_gtmatch(ids_a: Sequence, ids_b: Sequence) -> MatchResult:
    """Pair detections that share a GT id; everything else goes to the dustbins."""
    where_b = {k: j for j, k in enumerate(ids_b) if k is not None}
    pairs = [(i, where_b[k], 1.0) for i, k in enumerate(ids_a) if k is not None and k in where_b]
    return MatchResult.from_pairs(pairs, len(ids_a), len(ids_b))


def oracle_gtbox(episode) -> tuple[ObjectMap, ObjectMap]:
    """GT boxes of the observed objects with simulated descriptors."""
    return episode.gtbox_maps["A"], episode.gtbox_maps["B"]


# ---------------------------------------------------------------------------
# per-episode evaluation and aggregation
# ---------------------------------------------------------------------------

@dataclass
class DetectionGT:
    """Ground truth re-expressed on one pair of detection maps."""

    ids_a: list
    ids_b: list
    supercategory: dict
    gt_tuples: set

    def category(self, k):
        if k is None:
            return None
        try:
            return self.supercategory[k]
        except KeyError:
            raise EvaluationDataError(f"instance {k!r} has no supercategory") from None


def detection_gt(map_a: ObjectMap, map_b: ObjectMap, episode, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> DetectionGT:
    ids_a = assign_gt_ids(map_a, episode.gt_maps["A"], iou_threshold)
    ids_b = assign_gt_ids(map_b, episode.gt_maps["B"], iou_threshold)
    sup = dict(episode.gt.supercategory)
    bad = sorted(set(sup.values()) - set(CATEGORIES))
    if bad:
        raise EvaluationDataError(f"episode {episode.episode_id}: unknown supercategory {bad}")
    g = episode.gt
    return DetectionGT(ids_a, ids_b, sup,
                       gt_tuples_from_visibility(g.visible_matches, g.visible_unmatched_a, g.visible_unmatched_b))


@dataclass
class EpisodeEval:
    episode_id: str
    ranks: list[RankList]
    b_outcomes: list[tuple[int, bool, str]]  # (B index, correct, supercategory)
    a_outcomes: list[tuple[int, bool, str]]  # A detections absent from B
    tuples: TupleScores
    dustbin_mean: float | None = None

    def correct(self, category: str | None = None) -> tuple[int, int]:
        if category == "removed":
            sel = [c for _, c, cat in self.a_outcomes if cat == "removed"]
        else:
            sel = [c for _, c, cat in self.b_outcomes if category is None or cat == category]
        return int(sum(sel)), len(sel)


def evaluate_episode(scores: np.ndarray, result: MatchResult, dgt: DetectionGT, episode_id: str = "",
                     dustbin_mean: float | None = None) -> EpisodeEval:
    cats = dgt.supercategory
    ranks = rank_lists(scores, dgt.ids_a, dgt.ids_b, cats)
    b = [(j, c, dgt.category(dgt.ids_b[j])) for j, c in outcomes_b(result, dgt.ids_a, dgt.ids_b)]
    a = [(i, c, dgt.category(dgt.ids_a[i])) for i, c in outcomes_a_unpartnered(result, dgt.ids_a, dgt.ids_b)]
    return EpisodeEval(episode_id, ranks, b, a, tuple_metrics(result, dgt.ids_a, dgt.ids_b, dgt.gt_tuples),
                       dustbin_mean)


def dustbin_summary(evals: Sequence[EpisodeEval]) -> dict | None:
    """Mean and population std of per-episode dustbin means, or None if no episode has one.

    Both moments are taken about the first value, so a constant series (a fixed
    dustbin) reports its value exactly and a std of exactly zero.
    """
    x = np.array([e.dustbin_mean for e in evals if e.dustbin_mean is not None], dtype=np.float64)
    if not x.size:
        return None
    dx = x - x[0]
    return {"mean": float(x[0] + dx.mean()), "std": float(dx.std()), "n_episodes": int(x.size)}


def bootstrap_se(samples, n_resamples: int = 1000, seed: int = 0, weights=None) -> float | None:
    """Bootstrap standard error of a (weighted) mean over episodes.

    With ``weights`` the statistic is ``sum(w * x) / sum(w)``, i.e. a pooled
    ratio when ``x`` are per-episode rates and ``w`` their denominators.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    n = len(x)
    if n < 2:
        return None
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n))
    ws = w[idx]
    tot = ws.sum(axis=1)
    ok = tot > 0
    stats = (ws * x[idx]).sum(axis=1)[ok] / tot[ok]
    if len(stats) < 2:
        return None
    return float(np.std(stats, ddof=1))


def paired_difference_se(num_a, num_b, den, n_resamples: int = 1000, seed: int = 0) -> float | None:
    """Bootstrap SE of ``(sum num_a - sum num_b) / sum den`` resampling episodes jointly."""
    num_a = np.asarray(num_a, dtype=np.float64)
    num_b = np.asarray(num_b, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(den > 0, (num_a - num_b) / np.where(den > 0, den, 1.0), 0.0)
    return bootstrap_se(rate, n_resamples, seed, weights=den)


def paired_ratio_difference_se(num_a, den_a, num_b, den_b, n_resamples: int = 1000,
                               seed: int = 0) -> float | None:
    """Bootstrap SE of ``sum num_a / sum den_a - sum num_b / sum den_b``.

    Episodes are resampled jointly, so the two methods may count different
    objects per episode (e.g. detections against GT boxes).
    """
    arrs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in (num_a, den_a, num_b, den_b)]
    n = len(arrs[0])
    if n < 2:
        return None
    idx = np.random.default_rng(seed).integers(0, n, size=(n_resamples, n))
    na, da, nb, db = (v[idx].sum(axis=1) for v in arrs)
    ok = (da > 0) & (db > 0)
    stats = na[ok] / da[ok] - nb[ok] / db[ok]
    if len(stats) < 2:
        return None
    return float(np.std(stats, ddof=1))


@dataclass
class MetricsReport:
    method: str
    split: str
    category: str  # "all" or a supercategory
    rank1: float | None = None
    rank5: float | None = None
    mAP: float | None = None
    accuracy: float | None = None
    tuple_accuracy: float | None = None
    tuple_precision: float | None = None
    tuple_recall: float | None = None
    n_episodes: int = 0
    n_queries: int = 0
    n_objects: int = 0
    n_correct: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision_undefined: bool = False
    se: dict = field(default_factory=dict)

    CSV_FIELDS = ("method", "split", "category", "rank1", "rank5", "mAP", "accuracy", "tuple_accuracy",
                  "tuple_precision", "tuple_recall", "rank1_se", "rank5_se", "mAP_se", "accuracy_se",
                  "n_episodes", "n_queries", "n_objects", "n_correct", "tp", "fp", "fn")

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> dict:
        d = self.to_dict()
        row = {k: d.get(k) for k in self.CSV_FIELDS if not k.endswith("_se")}
        for k in ("rank1", "rank5", "mAP", "accuracy"):
            row[f"{k}_se"] = self.se.get(k)
        return {k: ("" if row[k] is None else row[k]) for k in self.CSV_FIELDS}


def _rank_stats(evals, category, n_resamples, seed):
    per = [[r for r in e.ranks if category is None or r.category == category] for e in evals]
    flat = [r for p in per for r in p]
    if not flat:
        return None, None, None, {}, 0
    cnt = np.array([len(p) for p in per], dtype=np.float64)
    se = {}
    for name, k in (("rank1", 1), ("rank5", 5)):
        rates = np.array([100.0 * sum(r.position <= k for r in p) / len(p) if p else 0.0 for p in per])
        se[name] = bootstrap_se(rates, n_resamples, seed, cnt)
    ap = np.array([100.0 * np.mean([1.0 / r.position for r in p]) if p else 0.0 for p in per])
    se["mAP"] = bootstrap_se(ap, n_resamples, seed, cnt)
    return cmc(flat, 1), cmc(flat, 5), reid_map(flat), se, len(flat)


def aggregate(evals: Sequence[EpisodeEval], method: str, split: str, n_resamples: int = 1000,
              seed: int = 0) -> list[MetricsReport]:
    """Pooled report over all episodes plus one per supercategory."""
    reports = []
    for category in (None, *CATEGORIES):
        rep = MetricsReport(method, split, category or "all", n_episodes=len(evals))
        if category not in ("added", "removed"):
            r1, r5, mp, se, nq = _rank_stats(evals, category, n_resamples, seed)
            rep.rank1, rep.rank5, rep.mAP, rep.n_queries = r1, r5, mp, nq
            rep.se.update(se)
        counts = np.array([e.correct(category) for e in evals], dtype=np.float64).reshape(-1, 2)
        rep.n_correct, rep.n_objects = int(counts[:, 0].sum()), int(counts[:, 1].sum())
        if rep.n_objects:
            rep.accuracy = 100.0 * rep.n_correct / rep.n_objects
            rates = np.where(counts[:, 1] > 0, 100.0 * counts[:, 0] / np.maximum(counts[:, 1], 1), 0.0)
            rep.se["accuracy"] = bootstrap_se(rates, n_resamples, seed, counts[:, 1])
        if category is None:
            rep.tp = sum(e.tuples.tp for e in evals)
            rep.fp = sum(e.tuples.fp for e in evals)
            rep.fn = sum(e.tuples.fn for e in evals)
            pooled = TupleScores(rep.tp, rep.fp, rep.fn)
            rep.tuple_accuracy, rep.tuple_precision, rep.tuple_recall = pooled.accuracy, pooled.precision, pooled.recall
            rep.precision_undefined = pooled.precision_undefined
        reports.append(rep)
    return reports


def breakdown_by_supercategory(evals: Sequence[EpisodeEval], method: str = "", split: str = "") -> dict[str, MetricsReport]:
    reps = aggregate(evals, method, split)
    return {r.category: r for r in reps if r.category != "all"}


def write_reports(reports: Sequence[MetricsReport], json_path=None, csv_path=None) -> str:
    """Write reports as a JSON document and/or CSV; returns the CSV text."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=MetricsReport.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    text = buf.getvalue()
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(text)
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=1, allow_nan=False)
    return text


def format_table(reports: Sequence[MetricsReport], category: str = "all") -> str:
    """Plain-text table with rank@1, rank@5, mAP and accuracy per method."""
    def f(v, se=None):
        if v is None:
            return "    -   "
        return f"{v:6.2f}" + (f"±{se:.2f}" if se is not None else "")
    rows = [r for r in reports if r.category == category]
    width = max([len(r.method) for r in rows] + [6])
    lines = [f"{'method':<{width}}  {'rank@1':>12} {'rank@5':>12} {'mAP':>12} {'Acc':>12}"]
    for r in rows:
        lines.append(f"{r.method:<{width}}  {f(r.rank1, r.se.get('rank1')):>12} {f(r.rank5, r.se.get('rank5')):>12} "
                     f"{f(r.mAP, r.se.get('mAP')):>12} {f(r.accuracy, r.se.get('accuracy')):>12}")
    return "\n".join(lines)
