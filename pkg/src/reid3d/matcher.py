"""Correspondence estimation between two object maps.

The learned matcher projects descriptors linearly, scores pairs by inner
product, appends a dustbin row/column (per-object scores from an attention
MLP, or one shared scalar) and runs log-domain Sinkhorn to obtain a soft
partial assignment. Hungarian baselines on L2 / Mahalanobis / projected
distances are provided alongside.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import linalg

from . import _kernels
from .object_map import MapSchemaError, ObjectMap

PARAMS_SCHEMA = "reid3d-params/1"
DEFAULT_ITERS = 100
DEFAULT_TAU = 1.0
DEFAULT_MATCH_THRESHOLD = 0.2
LOG_CLAMP = math.log(1e-30)

Variant = Literal["adaptive", "fixed"]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class MatcherParams:
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    att: list[tuple[np.ndarray, np.ndarray]] | None = None
    fin: list[tuple[np.ndarray, np.ndarray]] | None = None
    alpha: np.ndarray | None = None
    normalize_descriptors: bool = False

    @property
    def variant(self) -> Variant:
        return "adaptive" if self.att is not None else "fixed"

    @property
    def d_in(self) -> int:
        return self.proj_weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.proj_weight.shape[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        if self.att is None:
            return ()
        return tuple(w.shape[0] for w, _ in self.att[:-1])

    def tensors(self) -> dict[str, np.ndarray]:
        """Named views of every learnable array (stable order)."""
        out = {"proj.weight": self.proj_weight, "proj.bias": self.proj_bias}
        for prefix, layers in (("att", self.att), ("fin", self.fin)):
            if layers is None:
                continue
            for k, (w, b) in enumerate(layers):
                out[f"{prefix}.{k}.weight"] = w
                out[f"{prefix}.{k}.bias"] = b
        if self.alpha is not None:
            out["dustbin.alpha"] = self.alpha
        return out

    def copy(self) -> "MatcherParams":
        def cp(layers):
            return None if layers is None else [(w.copy(), b.copy()) for w, b in layers]
        return MatcherParams(self.proj_weight.copy(), self.proj_bias.copy(), cp(self.att), cp(self.fin),
                             None if self.alpha is None else self.alpha.copy(), self.normalize_descriptors)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors().items()}

    def check(self) -> list[str]:
        out = []
        if self.proj_bias.shape != (self.d_out,):
            out.append("proj.bias shape does not match proj.weight")
        for prefix, layers in (("att", self.att), ("fin", self.fin)):
            if layers is None:
                continue
            fan = 2 * self.d_out
            for k, (w, b) in enumerate(layers):
                if w.ndim != 2 or w.shape[1] != fan or b.shape != (w.shape[0],):
                    out.append(f"{prefix}.{k} has inconsistent shape {w.shape}/{b.shape}")
                fan = w.shape[0]
            if fan != 1:
                out.append(f"{prefix} must end in a single output")
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                out.append(f"{name} has non-finite entries")
        return out


def _glorot(rng, fan_out, fan_in):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def _mlp_init(rng, d_in, dims):
    layers = []
    fan = d_in
    for width in dims:
        layers.append((_glorot(rng, width, fan), np.zeros(width)))
        fan = width
    return layers


def init_params(d: int, d_out: int = 256, variant: Variant = "adaptive", hidden=(256, 64),
                seed: int = 0, noise: float = 1e-2, alpha: float = 1.0,
                normalize_descriptors: bool = False) -> MatcherParams:
    """Truncated-identity projection plus small noise; Glorot-uniform MLPs."""
    rng = np.random.default_rng(seed)
    W = np.eye(d_out, d) + rng.uniform(-noise, noise, size=(d_out, d))
    b = np.zeros(d_out)
    if variant == "adaptive":
        dims = (*hidden, 1)
        att = _mlp_init(rng, 2 * d_out, dims)
        fin = _mlp_init(rng, 2 * d_out, dims)
        return MatcherParams(W, b, att, fin, None, normalize_descriptors)
    if variant == "fixed":
        return MatcherParams(W, b, None, None, np.array(float(alpha)), normalize_descriptors)
    raise ValueError(f"unknown matcher variant {variant!r}")


def params_to_dict(p: MatcherParams) -> dict:
    return {
        "version": PARAMS_SCHEMA,
        "variant": p.variant,
        "d_in": p.d_in,
        "d_out": p.d_out,
        "hidden": list(p.hidden),
        "normalize_descriptors": p.normalize_descriptors,
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in p.tensors().items()},
    }


def params_from_dict(doc: dict, source: str = "<params>") -> MatcherParams:
    if doc.get("version") != PARAMS_SCHEMA:
        raise MapSchemaError(f"{source}: unsupported params version {doc.get('version')!r}")
    t = {}
    for k, rec in doc["tensors"].items():
        arr = np.asarray(rec["data"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape)):
            raise MapSchemaError(f"{source}: tensor {k} has {arr.size} values for shape {shape}")
        t[k] = arr.reshape(shape)

    def layers(prefix):
        if f"{prefix}.0.weight" not in t:
            return None
        out, k = [], 0
        while f"{prefix}.{k}.weight" in t:
            out.append((t[f"{prefix}.{k}.weight"], t[f"{prefix}.{k}.bias"]))
            k += 1
        return out

    p = MatcherParams(t["proj.weight"], t["proj.bias"], layers("att"), layers("fin"),
                      t.get("dustbin.alpha"), bool(doc.get("normalize_descriptors", False)))
    problems = p.check()
    if problems:
        raise MapSchemaError(f"{source}: " + "; ".join(problems))
    return p


def save_params(p: MatcherParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(p)))


def load_params(path) -> MatcherParams:
    return params_from_dict(json.loads(Path(path).read_text()), str(path))


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def _prepare(F: np.ndarray, params: MatcherParams) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or (F.shape[0] and F.shape[1] != params.d_in):
        raise MapSchemaError(f"descriptor dim {F.shape[-1]} != matcher input dim {params.d_in}")
    if F.shape[0] == 0:
        return np.zeros((0, params.d_in))
    if params.normalize_descriptors:
        F = F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), 1e-12)
    return F


def project_descriptors(m: ObjectMap | np.ndarray, params: MatcherParams) -> np.ndarray:
    """Rows ``h_i = W f_i + b``."""
    F = m.descriptors() if isinstance(m, ObjectMap) else m
    F = _prepare(F, params)
    return F @ params.proj_weight.T + params.proj_bias


def score_matrix(HA: np.ndarray, HB: np.ndarray) -> np.ndarray:
    return np.asarray(HA) @ np.asarray(HB).T


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class _MLPTrace:
    pre1: np.ndarray
    a1: np.ndarray
    pre2: np.ndarray
    a2: np.ndarray
    out: np.ndarray


def _mlp_from_pre1(layers, pre1) -> _MLPTrace:
    """Layers 2..3 of a 3-layer ReLU MLP given the first pre-activation."""
    (w2, b2), (w3, b3) = layers[1], layers[2]
    a1 = _relu(pre1)
    pre2 = a1 @ w2.T + b2
    a2 = _relu(pre2)
    out = (a2 @ w3.T + b3)[..., 0]
    return _MLPTrace(pre1, a1, pre2, a2, out)


def _softmax(x, axis):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class _SideTrace:
    """Intermediates for one dustbin vector (query side -> gallery side)."""
    att: _MLPTrace       # logits, shape (n_query, n_gallery)
    weights: np.ndarray  # softmaxed attention
    feats: np.ndarray    # attention features a_i
    fin: _MLPTrace       # dustbin scores z


def _dustbin_side(Hq, Hg, params) -> _SideTrace:
    D = params.d_out
    (w1, b1) = params.att[0]
    pre1 = (Hq @ w1[:, :D].T)[:, None, :] + (Hg @ w1[:, D:].T)[None, :, :] + b1
    att = _mlp_from_pre1(params.att, pre1)
    weights = _softmax(att.out, axis=1)
    feats = weights @ Hg
    (f1, c1) = params.fin[0]
    fpre1 = Hq @ f1[:, :D].T + feats @ f1[:, D:].T + c1
    fin = _mlp_from_pre1(params.fin, fpre1)
    return _SideTrace(att, weights, feats, fin)


def dustbin_scores(HA: np.ndarray, HB: np.ndarray, params: MatcherParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-object dustbin scores (z^A, z^B) from attention over the other set."""
    if params.att is None:
        raise ValueError("fixed-dustbin params have no dustbin MLPs")
    if len(HA) == 0 or len(HB) == 0:
        return np.zeros(0), np.zeros(0)
    return _dustbin_side(HA, HB, params).fin.out, _dustbin_side(HB, HA, params).fin.out


def augment_with_dustbins(S: np.ndarray, zA=None, zB=None, alpha: float | None = None) -> np.ndarray:
    """Append the dustbin column (``zA``) and row (``zB``).

    With ``alpha`` given, every dustbin entry including the corner is
    ``alpha``; otherwise the corner is 0 and empty z vectors read as zeros.
    """
    S = np.asarray(S, dtype=np.float64)
    mA, mB = S.shape
    out = np.empty((mA + 1, mB + 1))
    out[:mA, :mB] = S
    if alpha is not None:
        out[:mA, mB] = alpha
        out[mA, :] = alpha
        return out
    zA = np.zeros(mA) if zA is None or len(zA) == 0 else np.asarray(zA, dtype=np.float64)
    zB = np.zeros(mB) if zB is None or len(zB) == 0 else np.asarray(zB, dtype=np.float64)
    out[:mA, mB] = zA
    out[mA, :mB] = zB
    out[mA, mB] = 0.0
    return out


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------

@dataclass
class SinkhornTrace:
    Z: np.ndarray
    log_mu: np.ndarray
    log_nu: np.ndarray
    u_hist: np.ndarray
    v_hist: np.ndarray
    logP: np.ndarray
    degenerate: bool


def _degenerate_plan(mA, mB):
    P = np.zeros((mA + 1, mB + 1))
    if mA and not mB:
        P[:mA, 0] = 1.0
    elif mB and not mA:
        P[0, :mB] = 1.0
    return P


def sinkhorn_trace(S_aug: np.ndarray, iterations: int = DEFAULT_ITERS, tau: float = DEFAULT_TAU) -> SinkhornTrace:
    S_aug = np.asarray(S_aug, dtype=np.float64)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not np.all(np.isfinite(S_aug)):
        raise ValueError("sinkhorn received non-finite scores")
    mA, mB = S_aug.shape[0] - 1, S_aug.shape[1] - 1
    if mA == 0 or mB == 0:
        P = _degenerate_plan(mA, mB)
        with np.errstate(divide="ignore"):
            logP = np.log(P)
        return SinkhornTrace(S_aug / tau, np.zeros(0), np.zeros(0), np.zeros((0, 0)), np.zeros((0, 0)), logP, True)
    Z = S_aug / tau
    log_mu = np.zeros(mA + 1)
    log_mu[mA] = math.log(mB)
    log_nu = np.zeros(mB + 1)
    log_nu[mB] = math.log(mA)
    u_hist, v_hist = _kernels.sinkhorn_log_forward(Z, log_mu, log_nu, int(iterations))
    logP = Z + u_hist[-1][:, None] + v_hist[-1][None, :]
    return SinkhornTrace(Z, log_mu, log_nu, u_hist, v_hist, logP, False)


def sinkhorn(S_aug: np.ndarray, iterations: int = DEFAULT_ITERS, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Soft partial assignment for an augmented score matrix.

    Rows are normalised toward marginals ``(1, ..., 1, m_B)`` and columns
    toward ``(1, ..., 1, m_A)``; returns ``P`` of shape ``(m_A+1, m_B+1)``.
    """
    return np.exp(sinkhorn_trace(S_aug, iterations, tau).logP)


def sinkhorn_backward(tr: SinkhornTrace, G: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the augmented scores given ``G = dL/dlogP``."""
    if tr.degenerate:
        return np.zeros_like(tr.Z)
    return _kernels.sinkhorn_log_backward(tr.Z, tr.log_mu, tr.log_nu, tr.u_hist, tr.v_hist, G)


# ---------------------------------------------------------------------------
# Full forward
# ---------------------------------------------------------------------------

@dataclass
class MatcherForward:
    FA: np.ndarray
    FB: np.ndarray
    HA: np.ndarray
    HB: np.ndarray
    S_aug: np.ndarray
    sk: SinkhornTrace
    side_a: _SideTrace | None = None
    side_b: _SideTrace | None = None
    tau: float = DEFAULT_TAU

    @property
    def P(self) -> np.ndarray:
        return np.exp(self.sk.logP)

    @property
    def logP(self) -> np.ndarray:
        return self.sk.logP

    @property
    def dustbin_values(self) -> np.ndarray:
        """All non-corner dustbin entries of the augmented score matrix."""
        mA, mB = self.HA.shape[0], self.HB.shape[0]
        return np.concatenate([self.S_aug[:mA, mB], self.S_aug[mA, :mB]])


def matcher_forward(FA, FB, params: MatcherParams, iterations: int = DEFAULT_ITERS,
                    tau: float = DEFAULT_TAU) -> MatcherForward:
    FA = _prepare(FA, params)
    FB = _prepare(FB, params)
    HA = FA @ params.proj_weight.T + params.proj_bias
    HB = FB @ params.proj_weight.T + params.proj_bias
    S = HA @ HB.T
    side_a = side_b = None
    if params.att is None:
        S_aug = augment_with_dustbins(S, alpha=float(params.alpha))
    else:
        if len(HA) and len(HB):
            side_a = _dustbin_side(HA, HB, params)
            side_b = _dustbin_side(HB, HA, params)
            S_aug = augment_with_dustbins(S, side_a.fin.out, side_b.fin.out)
        else:
            S_aug = augment_with_dustbins(S)
    sk = sinkhorn_trace(S_aug, iterations, tau)
    return MatcherForward(FA, FB, HA, HB, S_aug, sk, side_a, side_b, tau)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_a: list[int] = field(default_factory=list)
    unmatched_b: list[int] = field(default_factory=list)

    def pair_map(self) -> dict[int, int]:
        return {a: b for a, b, _ in self.pairs}

    def partner_of_b(self) -> dict[int, int]:
        return {b: a for a, b, _ in self.pairs}

    def to_dict(self) -> dict:
        return {
            "pairs": [{"a": a, "b": b, "score": s} for a, b, s in self.pairs],
            "unmatched_a": list(self.unmatched_a),
            "unmatched_b": list(self.unmatched_b),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MatchResult":
        return cls([(int(p["a"]), int(p["b"]), float(p["score"])) for p in doc["pairs"]],
                   [int(i) for i in doc["unmatched_a"]], [int(j) for j in doc["unmatched_b"]])

    @classmethod
    def from_pairs(cls, pairs, mA: int, mB: int) -> "MatchResult":
        pairs = sorted(pairs)
        used_a = {a for a, _, _ in pairs}
        used_b = {b for _, b, _ in pairs}
        return cls(list(pairs), [i for i in range(mA) if i not in used_a], [j for j in range(mB) if j not in used_b])


def extract_matches(P: np.ndarray, match_threshold: float = DEFAULT_MATCH_THRESHOLD) -> MatchResult:
    """Mutual-argmax decoding of an augmented assignment matrix.

    Argmaxes run over the non-dustbin block; a pair is accepted when it is
    mutual and ``P_ij >= match_threshold``. Everything else goes to the dustbins.
    """
    P = np.asarray(P, dtype=np.float64)
    mA, mB = P.shape[0] - 1, P.shape[1] - 1
    if mA == 0 or mB == 0:
        return MatchResult([], list(range(mA)), list(range(mB)))
    core = P[:mA, :mB]
    row_best = np.argmax(core, axis=1)
    col_best = np.argmax(core, axis=0)
    pairs = []
    for i in range(mA):
        j = int(row_best[i])
        if col_best[j] == i and P[i, j] >= match_threshold:
            pairs.append((i, j, float(P[i, j])))
    return MatchResult.from_pairs(pairs, mA, mB)


def match_maps(mapA: ObjectMap, mapB: ObjectMap, params: MatcherParams, iterations: int = DEFAULT_ITERS,
               tau: float = DEFAULT_TAU, match_threshold: float = DEFAULT_MATCH_THRESHOLD):
    """Run the learned matcher; returns (forward record, MatchResult)."""
    fw = matcher_forward(mapA.descriptors(), mapB.descriptors(), params, iterations, tau)
    return fw, extract_matches(fw.P, match_threshold)


# ---------------------------------------------------------------------------
# Hungarian and baselines
# ---------------------------------------------------------------------------

def hungarian(cost) -> list[tuple[int, int]]:
    """Min-cost rectangular assignment: ``min(n, m)`` (row, col) pairs sorted by row."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian requires finite costs")
    rows, cols = _kernels.linear_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def pooled_covariance(descriptors: np.ndarray, shrinkage: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Shrunk sample covariance toward a scaled identity, and its inverse."""
    X = np.asarray(descriptors, dtype=np.float64)
    d = X.shape[1]
    if X.shape[0] < 2:
        return np.eye(d), np.eye(d)
    C = np.cov(X, rowvar=False, bias=False).reshape(d, d)
    mean_var = max(float(np.trace(C)) / d, 1e-12)
    sigma = (1.0 - shrinkage) * C + shrinkage * mean_var * np.eye(d)
    cf = linalg.cho_factor(sigma, lower=True)
    inv = linalg.cho_solve(cf, np.eye(d))
    return sigma, 0.5 * (inv + inv.T)


def pairwise_l2(XA: np.ndarray, XB: np.ndarray) -> np.ndarray:
    diff = XA[:, None, :] - XB[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def mahalanobis_distances(XA, XB, shrinkage: float = 0.1) -> np.ndarray:
    XA = np.asarray(XA, dtype=np.float64)
    XB = np.asarray(XB, dtype=np.float64)
    sigma, _ = pooled_covariance(np.concatenate([XA, XB]), shrinkage)
    L = np.linalg.cholesky(sigma)
    wa = linalg.solve_triangular(L, XA.T, lower=True).T
    wb = linalg.solve_triangular(L, XB.T, lower=True).T
    return pairwise_l2(wa, wb)


@dataclass
class ProjectionNet:
    """Descriptor mapping for the projected-Hungarian baselines (ReLU between layers)."""
    layers: list[tuple[np.ndarray, np.ndarray]]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        for k, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if k < len(self.layers) - 1:
                h = _relu(h)
        return h

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(self.layers):
            out[f"proj.{k}.weight"] = w
            out[f"proj.{k}.bias"] = b
        return out

    def to_dict(self) -> dict:
        return {
            "version": PARAMS_SCHEMA,
            "variant": f"projection-{len(self.layers)}l",
            "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.tensors().items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProjectionNet":
        t = {k: np.asarray(r["data"], dtype=np.float64).reshape(r["shape"]) for k, r in doc["tensors"].items()}
        n = sum(1 for k in t if k.endswith(".weight"))
        return cls([(t[f"proj.{k}.weight"], t[f"proj.{k}.bias"]) for k in range(n)])


def init_projection(d: int, d_out: int = 256, n_layers: int = 1, seed: int = 0) -> ProjectionNet:
    rng = np.random.default_rng(seed)
    layers, fan = [], d
    for _ in range(n_layers):
        layers.append((_glorot(rng, d_out, fan), np.zeros(d_out)))
        fan = d_out
    return ProjectionNet(layers)


BaselineKind = Literal["l2", "mahalanobis", "projected"]


def baseline_distances(FA, FB, kind: BaselineKind = "l2", projection: ProjectionNet | None = None,
                       shrinkage: float = 0.1) -> np.ndarray:
    FA = np.asarray(FA, dtype=np.float64)
    FB = np.asarray(FB, dtype=np.float64)
    if FA.shape[0] and FB.shape[0] and FA.shape[1] != FB.shape[1]:
        raise MapSchemaError(f"descriptor dims differ: {FA.shape[1]} vs {FB.shape[1]}")
    if FA.shape[0] == 0 or FB.shape[0] == 0:
        return np.zeros((FA.shape[0], FB.shape[0]))
    if kind == "l2":
        return pairwise_l2(FA, FB)
    if kind == "mahalanobis":
        return mahalanobis_distances(FA, FB, shrinkage)
    if kind == "projected":
        if projection is None:
            raise ValueError("projected baseline needs a trained projection")
        return pairwise_l2(projection(FA), projection(FB))
    raise ValueError(f"unknown baseline kind {kind!r}")


def baseline_match(mapA: ObjectMap, mapB: ObjectMap, kind: BaselineKind = "l2",
                   projection: ProjectionNet | None = None, shrinkage: float = 0.1):
    """Hungarian matching on a descriptor distance; no dustbins.

    Returns (scores, MatchResult) with ``scores = -distance``.
    """
    dist = baseline_distances(mapA.descriptors(), mapB.descriptors(), kind, projection, shrinkage)
    pairs = [(i, j, float(-dist[i, j])) for i, j in hungarian(dist)] if dist.size else []
    return -dist, MatchResult.from_pairs(pairs, dist.shape[0], dist.shape[1])
