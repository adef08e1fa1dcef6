"""Training for the Sinkhorn matcher and the triplet-projection baselines.

Gradients are computed by an explicit reverse pass through the projection,
inner-product scores, attention/dustbin MLPs, softmax and every unrolled
log-domain Sinkhorn iteration. ``gradient_check`` compares them against
central finite differences.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .matcher import (
    DEFAULT_ITERS,
    DEFAULT_MATCH_THRESHOLD,
    DEFAULT_TAU,
    LOG_CLAMP,
    MatcherParams,
    ProjectionNet,
    _MLPTrace,
    _SideTrace,
    extract_matches,
    init_params,
    init_projection,
    matcher_forward,
    sinkhorn_backward,
)

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class SupervisedEpisode:
    """Descriptors of two maps plus ground-truth matches and unmatchables."""
    FA: np.ndarray
    FB: np.ndarray
    matches: list[tuple[int, int]]
    unmatched_a: list[int]
    unmatched_b: list[int]
    episode_id: str = ""

    def __post_init__(self):
        self.FA = np.asarray(self.FA, dtype=np.float64)
        self.FB = np.asarray(self.FB, dtype=np.float64)
        ma = {i for i, _ in self.matches}
        mb = {j for _, j in self.matches}
        if ma & set(self.unmatched_a) or mb & set(self.unmatched_b):
            raise ValueError("match indices overlap the unmatchable sets")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _gt_cells(mA, mB, matches, unmatched_a, unmatched_b):
    cells = [(i, j) for i, j in matches]
    cells += [(i, mB) for i in unmatched_a]
    cells += [(mA, j) for j in unmatched_b]
    for i, j in cells:
        if not (0 <= i <= mA and 0 <= j <= mB):
            raise IndexError(f"ground-truth cell ({i}, {j}) outside a {mA + 1}x{mB + 1} assignment")
    return cells


def nll_loss(P: np.ndarray, matches, unmatched_a=(), unmatched_b=()) -> float:
    """Negative log-likelihood of the ground-truth cells of ``P`` (clamped at 1e-30)."""
    P = np.asarray(P, dtype=np.float64)
    mA, mB = P.shape[0] - 1, P.shape[1] - 1
    total = 0.0
    for i, j in _gt_cells(mA, mB, matches, unmatched_a, unmatched_b):
        total -= max(math.log(P[i, j]) if P[i, j] > 0 else -math.inf, LOG_CLAMP)
    return total


def _nll_from_log(logP, cells):
    G = np.zeros_like(logP)
    total = 0.0
    for i, j in cells:
        v = logP[i, j]
        if v > LOG_CLAMP:
            total -= v
            G[i, j] -= 1.0
        else:
            total -= LOG_CLAMP
    return total, G


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


def _mlp_tail_backward(layers, tr: _MLPTrace, dout, grads, prefix):
    """Backprop layers 3 and 2; returns d(pre1) with the leading dims of ``dout``."""
    (w2, _), (w3, _) = layers[1], layers[2]
    lead = dout.shape
    a2 = tr.a2.reshape(-1, tr.a2.shape[-1])
    a1 = tr.a1.reshape(-1, tr.a1.shape[-1])
    d = dout.reshape(-1, 1)
    grads[f"{prefix}.2.weight"] += d.T @ a2
    grads[f"{prefix}.2.bias"] += d.sum(axis=0)
    dpre2 = (d @ w3) * (tr.pre2.reshape(a2.shape) > 0)
    grads[f"{prefix}.1.weight"] += dpre2.T @ a1
    grads[f"{prefix}.1.bias"] += dpre2.sum(axis=0)
    dpre1 = (dpre2 @ w2) * (tr.pre1.reshape(a1.shape) > 0)
    return dpre1.reshape(*lead, -1)


def _side_backward(params, Hq, Hg, tr: _SideTrace, dz, grads, dHq, dHg):
    D = params.d_out
    (f1, _) = params.fin[0]
    dfpre1 = _mlp_tail_backward(params.fin, tr.fin, dz, grads, "fin")
    grads["fin.0.weight"][:, :D] += dfpre1.T @ Hq
    grads["fin.0.weight"][:, D:] += dfpre1.T @ tr.feats
    grads["fin.0.bias"] += dfpre1.sum(axis=0)
    dHq += dfpre1 @ f1[:, :D]
    dfeats = dfpre1 @ f1[:, D:]
    _finite("final MLP", dfeats)

    dweights = dfeats @ Hg.T
    dHg += tr.weights.T @ dfeats
    dlogits = tr.weights * (dweights - np.sum(tr.weights * dweights, axis=1, keepdims=True))
    _finite("attention softmax", dlogits)

    (w1, _) = params.att[0]
    dpre1 = _mlp_tail_backward(params.att, tr.att, dlogits, grads, "att")
    dq = dpre1.sum(axis=1)
    dg = dpre1.sum(axis=0)
    grads["att.0.weight"][:, :D] += dq.T @ Hq
    grads["att.0.weight"][:, D:] += dg.T @ Hg
    grads["att.0.bias"] += dq.sum(axis=0)
    dHq += dq @ w1[:, :D]
    dHg += dg @ w1[:, D:]
    _finite("attention MLP", dHq)


def loss_and_grad(ep: SupervisedEpisode, params: MatcherParams, iterations: int = DEFAULT_ITERS,
                  tau: float = DEFAULT_TAU):
    """Loss of one episode and its gradient for every parameter tensor."""
    fw = matcher_forward(ep.FA, ep.FB, params, iterations, tau)
    mA, mB = fw.HA.shape[0], fw.HB.shape[0]
    cells = _gt_cells(mA, mB, ep.matches, ep.unmatched_a, ep.unmatched_b)
    loss, G = _nll_from_log(fw.logP, cells)
    grads = params.zeros_like()
    if fw.sk.degenerate:
        return loss, grads, fw

    gS_aug = sinkhorn_backward(fw.sk, G) / tau
    _finite("sinkhorn", gS_aug)
    gS = gS_aug[:mA, :mB]
    dHA = gS @ fw.HB
    dHB = gS.T @ fw.HA
    if params.att is None:
        grads["dustbin.alpha"] += gS_aug[:mA, mB].sum() + gS_aug[mA, :].sum()
    else:
        _side_backward(params, fw.HA, fw.HB, fw.side_a, gS_aug[:mA, mB], grads, dHA, dHB)
        _side_backward(params, fw.HB, fw.HA, fw.side_b, gS_aug[mA, :mB], grads, dHB, dHA)
    grads["proj.weight"] += dHA.T @ fw.FA + dHB.T @ fw.FB
    grads["proj.bias"] += dHA.sum(axis=0) + dHB.sum(axis=0)
    _finite("projection", grads["proj.weight"])
    return loss, grads, fw


def backward(ep: SupervisedEpisode, params: MatcherParams, iterations: int = DEFAULT_ITERS,
             tau: float = DEFAULT_TAU) -> dict[str, np.ndarray]:
    return loss_and_grad(ep, params, iterations, tau)[1]


def batch_loss_and_grad(batch: Sequence[SupervisedEpisode], params: MatcherParams,
                        iterations: int = DEFAULT_ITERS, tau: float = DEFAULT_TAU, reduction: str = "mean"):
    total = 0.0
    grads = params.zeros_like()
    for ep in batch:
        loss, g, _ = loss_and_grad(ep, params, iterations, tau)
        total += loss
        for k in grads:
            grads[k] += g[k]
    if reduction == "mean" and batch:
        total /= len(batch)
        for k in grads:
            grads[k] /= len(batch)
    return total, grads


def episode_loss(ep: SupervisedEpisode, params: MatcherParams, iterations=DEFAULT_ITERS, tau=DEFAULT_TAU) -> float:
    fw = matcher_forward(ep.FA, ep.FB, params, iterations, tau)
    cells = _gt_cells(fw.HA.shape[0], fw.HB.shape[0], ep.matches, ep.unmatched_a, ep.unmatched_b)
    return _nll_from_log(fw.logP, cells)[0]


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_gradient(f: Callable[[], float], tensor: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``tensor`` (perturbed in place)."""
    out = np.full(tensor.shape, np.nan)
    flat = tensor.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for k in idx:
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        out.reshape(-1)[k] = (fp - fm) / (2.0 * h)
    return out


def min_relu_margin(ep: SupervisedEpisode, params: MatcherParams, iterations: int = DEFAULT_ITERS) -> float:
    """Smallest |pre-activation| feeding any ReLU (inf for the fixed variant)."""
    fw = matcher_forward(ep.FA, ep.FB, params, iterations)
    vals = [np.inf]
    for side in (fw.side_a, fw.side_b):
        if side is None:
            continue
        for tr in (side.att, side.fin):
            vals += [np.abs(tr.pre1).min(), np.abs(tr.pre2).min()]
    return float(min(vals))


def gradient_check(ep: SupervisedEpisode, params: MatcherParams, h: float = 1e-5, iterations: int = DEFAULT_ITERS,
                   tau: float = DEFAULT_TAU, max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative error per tensor between analytic and numeric gradients."""
    params = params.copy()
    loss, analytic, _ = loss_and_grad(ep, params, iterations, tau)
    # central differences lose ~eps*|L|/h to cancellation; floor scales with |L|
    floor = 1e-6 * max(1.0, abs(loss))
    rng = np.random.default_rng(seed)
    out = {}
    for name, t in params.tensors().items():
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        num = numeric_gradient(lambda: episode_loss(ep, params, iterations, tau), t, h, idx)
        mask = ~np.isnan(num)
        out[name] = float(relative_error(analytic[name][mask], num[mask], floor).max()) if mask.any() else 0.0
    return out


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    batch_size: int
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled, applied to every tensor
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def apply(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place parameter update."""
        self.step += 1
        if self.weight_decay:
            for t in tensors.values():
                t *= 1.0 - self.lr * self.weight_decay
        if self.kind == "sgd":
            for k, t in tensors.items():
                t -= self.lr * grads[k]
            return
        if self.kind != "adam":
            raise ValueError(f"unknown optimizer {self.kind!r}")
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for k, t in tensors.items():
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(t))
            v = self.v.setdefault(k, np.zeros_like(t))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Matcher training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 5e-3
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    optimizer: str = "adam"
    iterations: int = DEFAULT_ITERS
    tau: float = DEFAULT_TAU
    reduction: str = "mean"
    max_steps: int | None = None
    match_threshold: float = DEFAULT_MATCH_THRESHOLD
    weight_decay: float = 0.0
    gain_augment: float = 0.9  # half-width of the log-uniform per-map descriptor rescaling
    select_best: bool = True  # keep the epoch with the best validation accuracy when val episodes exist


def _augment(batch, rng, width):
    if width <= 0:
        return batch
    g = np.exp(rng.uniform(-width, width, size=(len(batch), 2)))
    return [SupervisedEpisode(e.FA * ga, e.FB * gb, e.matches, e.unmatched_a, e.unmatched_b, e.episode_id)
            for e, (ga, gb) in zip(batch, g)]


def _val_accuracy(episodes, params, cfg):
    correct = total = 0
    for ep in episodes:
        fw = matcher_forward(ep.FA, ep.FB, params, cfg.iterations, cfg.tau)
        res = extract_matches(fw.P, cfg.match_threshold)
        partner = res.partner_of_b()
        gt = {j: i for i, j in ep.matches}
        for j in range(ep.FB.shape[0]):
            total += 1
            if j in gt:
                correct += partner.get(j) == gt[j]
            else:
                correct += j not in partner
    return 100.0 * correct / total if total else float("nan")


def train_matcher(episodes: Sequence[SupervisedEpisode], params: MatcherParams | None = None,
                  config: TrainConfig | None = None, val_episodes: Sequence[SupervisedEpisode] = (),
                  d_out: int | None = None, variant: str = "adaptive", hidden=(256, 64)):
    """Mini-batch training on the assignment NLL.

    Returns (params, curve) where curve rows are
    ``(epoch, mean_loss, match_accuracy_on_val)``.
    """
    cfg = config or TrainConfig()
    if not episodes:
        raise ValueError("train_matcher needs at least one training episode")
    if params is None:
        d = episodes[0].FA.shape[1] if episodes[0].FA.size else episodes[0].FB.shape[1]
        params = init_params(d, d_out or d, variant, hidden=hidden, seed=cfg.seed)
    else:
        params = params.copy()
    opt = OptimizerState(cfg.lr, cfg.batch_size, cfg.optimizer, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    tensors = params.tensors()
    curve = []
    steps = 0
    best = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = _augment([episodes[k] for k in order[s:s + cfg.batch_size]], rng, cfg.gain_augment)
            loss, grads = batch_loss_and_grad(batch, params, cfg.iterations, cfg.tau, cfg.reduction)
            opt.apply(tensors, grads)
            losses.append(loss)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val = _val_accuracy(val_episodes, params, cfg) if val_episodes else float("nan")
        if cfg.select_best and val_episodes and (best is None or val > best[0]):
            best = (val, params.copy())
        curve.append((epoch, float(np.mean(losses)), val))
        log.info("epoch %d loss %.4f val_acc %.2f", epoch, curve[-1][1], val)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    if best is not None:
        log.info("keeping epoch with val_acc %.2f", best[0])
        params = best[1]
    return params, curve


# ---------------------------------------------------------------------------
# Triplet baselines
# ---------------------------------------------------------------------------

@dataclass
class TripletSample:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def triplet_loss(sample: TripletSample | tuple, margin: float = 1.0) -> float:
    a, p, n = (sample.anchor, sample.positive, sample.negative) if isinstance(sample, TripletSample) else sample
    a, p, n = (np.asarray(x, dtype=np.float64) for x in (a, p, n))
    return max(float(np.linalg.norm(a - p) - np.linalg.norm(a - n)) + margin, 0.0)


def mine_triplets(FA: np.ndarray, FB: np.ndarray, matches: Iterable[tuple[int, int]],
                  rng: np.random.Generator) -> list[TripletSample]:
    """One triplet per ground-truth pair with a uniformly drawn other object of B as negative."""
    FA = np.asarray(FA)
    FB = np.asarray(FB)
    mB = FB.shape[0]
    out = []
    for i, j in matches:
        if mB < 2:
            continue
        k = int(rng.integers(mB - 1))
        k = k + 1 if k >= j else k
        out.append(TripletSample(FA[i].copy(), FB[j].copy(), FB[k].copy()))
    return out


def _proj_forward(net: ProjectionNet, X):
    acts = [X]
    pres = []
    h = X
    for k, (w, b) in enumerate(net.layers):
        pre = h @ w.T + b
        pres.append(pre)
        h = np.maximum(pre, 0.0) if k < len(net.layers) - 1 else pre
        acts.append(h)
    return acts, pres


def _proj_backward(net: ProjectionNet, acts, pres, dout, grads):
    d = dout
    for k in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[k]
        if k < len(net.layers) - 1:
            d = d * (pres[k] > 0)
        grads[f"proj.{k}.weight"] += d.T @ acts[k]
        grads[f"proj.{k}.bias"] += d.sum(axis=0)
        d = d @ w


def triplet_batch_loss_and_grad(net: ProjectionNet, A, P, N, margin: float = 1.0):
    """Mean projected triplet hinge loss and its gradient."""
    n = len(A)
    X = np.concatenate([A, P, N])
    acts, pres = _proj_forward(net, X)
    out = acts[-1]
    ga, gp, gn = out[:n], out[n:2 * n], out[2 * n:]
    dap = ga - gp
    dan = ga - gn
    nap = np.linalg.norm(dap, axis=1)
    nan_ = np.linalg.norm(dan, axis=1)
    viol = nap - nan_ + margin
    active = viol > 0
    loss = float(np.where(active, viol, 0.0).mean()) if n else 0.0
    uap = dap / np.maximum(nap, 1e-12)[:, None]
    uan = dan / np.maximum(nan_, 1e-12)[:, None]
    w = (active / max(n, 1))[:, None]
    d_a = w * (uap - uan)
    d_p = -w * uap
    d_n = w * uan
    grads = {k: np.zeros_like(v) for k, v in net.tensors().items()}
    _proj_backward(net, acts, pres, np.concatenate([d_a, d_p, d_n]), grads)
    return loss, grads


@dataclass
class TripletConfig:
    n_layers: int = 1
    d_out: int = 256
    batch_size: int = 64
    lr: float = 1.5e-2
    epochs: int = 50
    margin: float = 1.0
    seed: int = 0
    optimizer: str = "adam"


def train_projection(triplets: Sequence[TripletSample], d: int, config: TripletConfig | None = None):
    """Train the descriptor mapping of the H-1L/2L/3L baselines; returns (net, curve)."""
    cfg = config or TripletConfig()
    net = init_projection(d, cfg.d_out, cfg.n_layers, cfg.seed)
    if not triplets:
        return net, []
    A = np.stack([t.anchor for t in triplets])
    P = np.stack([t.positive for t in triplets])
    N = np.stack([t.negative for t in triplets])
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(cfg.lr, cfg.batch_size, cfg.optimizer)
    tensors = net.tensors()
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(A))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = triplet_batch_loss_and_grad(net, A[idx], P[idx], N[idx], cfg.margin)
            opt.apply(tensors, grads)
            losses.append(loss)
        curve.append((epoch, float(np.mean(losses))))
    return net, curve

