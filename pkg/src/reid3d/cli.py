"""Command-line front end: ``reid3d {gen,train,eval,match,bench}``.

Every run writes ``resolved_config.json`` next to its outputs; re-running
with ``--config`` pointing at that file reproduces the run. Exit codes:
0 success, 1 usage error, 2 data or schema error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .episode_sim import (DetectionNoiseConfig, EpisodeFormatError, GenerationError, SimConfig, generate_dataset,
                          load_split)
from .evaluation import EvaluationDataError, aggregate, dustbin_summary, format_table, write_reports
from .learning import NonFiniteError, TrainConfig, TripletConfig
from .matcher import (MatcherParams, ProjectionNet, baseline_match, extract_matches, matcher_forward, params_from_dict,
                      params_to_dict)
from .object_map import MapParseError, MapSchemaError, load_map
from .pipeline import METHODS, TRAINABLE, TrainSettings, evaluate_method, supervised_set, train_method

log = logging.getLogger("reid3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_SCHEMA = "reid3d-checkpoint/1"
RESOLVED_NAME = "resolved_config.json"
# methods of the main comparison table; the h2l/h3l ablations run when named
EVAL_METHODS = ("h-l2", "h-m", "h1l", "sinkhorn-fixed", "3dsmnet", "gtbox", "gtmatch")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a subcommand needs; flags override file values."""
    seed: int = 0
    threads: int = 1
    sim: dict = field(default_factory=lambda: SimConfig().to_dict())
    train: dict = field(default_factory=lambda: {
        "matcher": asdict(TrainConfig()),
        "triplet": asdict(TripletConfig()),
        "d_out": None,
        "hidden": [256, 64],
        "iou_threshold": 0.25,
    })
    eval: dict = field(default_factory=lambda: {
        "split": "test",
        "iou_threshold": 0.25,
        "n_resamples": 1000,
        "match_threshold": 0.2,
    })

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        base = cls()
        unknown = set(doc) - {"seed", "threads", "sim", "train", "eval", "command"}
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        # split tables replace the defaults wholesale; only the noise block merges
        over = dict(doc.get("sim", {}))
        noise = _merge(base.sim["noise"], over.pop("noise", {}))
        sim = {**base.sim, **over, "noise": noise}
        train = _merge(base.train, doc.get("train", {}))
        ev = _merge(base.eval, doc.get("eval", {}))
        return cls(int(doc.get("seed", base.seed)), int(doc.get("threads", base.threads)), sim, train, ev)

    def sim_config(self) -> SimConfig:
        doc = dict(self.sim)
        doc["seed"] = self.seed
        doc["noise"] = DetectionNoiseConfig.from_dict(_merge(DetectionNoiseConfig().to_dict(), doc.get("noise", {})))
        return SimConfig.from_dict(doc)

    def train_settings(self) -> TrainSettings:
        t = self.train
        return TrainSettings(seed=self.seed, d_out=t.get("d_out"), hidden=tuple(t.get("hidden", (256, 64))),
                             matcher=TrainConfig(**t.get("matcher", {})),
                             triplet=TripletConfig(**t.get("triplet", {})),
                             iou_threshold=float(t.get("iou_threshold", 0.25)))


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _write_resolved(cfg: RunConfig, out: Path, command: str, name: str = RESOLVED_NAME) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _dump({**cfg.to_dict(), "command": command}, out / name)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(method: str, artifact, path: Path) -> None:
    if isinstance(artifact, MatcherParams):
        doc = {"version": CHECKPOINT_SCHEMA, "method": method, "kind": "matcher", "params": params_to_dict(artifact)}
    else:
        doc = {"version": CHECKPOINT_SCHEMA, "method": method, "kind": "projection", "params": artifact.to_dict()}
    path.write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> tuple[str, MatcherParams | ProjectionNet]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: checkpoint not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MapParseError(f"{path}: {exc}") from None
    if doc.get("version") != CHECKPOINT_SCHEMA:
        raise MapSchemaError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    if doc.get("kind") == "matcher":
        return doc["method"], params_from_dict(doc["params"], str(path))
    if doc.get("kind") == "projection":
        return doc["method"], ProjectionNet.from_dict(doc["params"])
    raise MapSchemaError(f"{path}: unknown checkpoint kind {doc.get('kind')!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    sim = cfg.sim_config()
    if args.n_episodes is not None:
        splits = args.splits.split(",") if args.splits else list(sim.split_sizes)
        bad = [s for s in splits if s not in sim.split_sizes]
        if bad:
            raise UsageError(f"unknown split(s) {bad}")
        sim.split_sizes = {s: int(args.n_episodes) for s in splits}
        cfg.sim = sim.to_dict()
    out = Path(args.out)
    index = generate_dataset(out, sim, threads=cfg.threads)
    _write_resolved(cfg, out, "gen")
    for split, ids in index.items():
        print(f"{split}: {len(ids)} episodes")
    return EXIT_OK


def _require_dataset(path) -> Path:
    root = Path(path)
    if not (root / "dataset.json").exists():
        raise FileNotFoundError(f"{root}: no dataset.json (run `reid3d gen` first)")
    return root


def cmd_train(cfg: RunConfig, args) -> int:
    if args.variant not in TRAINABLE:
        raise UsageError(f"--variant {args.variant} has nothing to train (choose from {sorted(TRAINABLE)})")
    root = _require_dataset(args.data)
    settings = cfg.train_settings()
    train_eps = load_split(root, "train")
    if not train_eps:
        raise EvaluationDataError(f"{root}: the train split is empty")
    val_eps = load_split(root, "val")
    S = supervised_set(train_eps, settings.iou_threshold)
    V = supervised_set(val_eps, settings.iou_threshold) if not isinstance(TRAINABLE[args.variant], int) else []
    artifact, curve = train_method(args.variant, S, settings, V)
    out = Path(args.out)
    _write_resolved(cfg, out, "train", f"resolved_config_{args.variant}.json")
    save_checkpoint(args.variant, artifact, out / f"{args.variant}.json")
    with open(out / f"loss_{args.variant}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if curve and len(curve[0]) == 3:
            w.writerow(["epoch", "loss", "val_accuracy"])
            for e, loss, val in curve:
                w.writerow([e, repr(float(loss)), "" if not np.isfinite(val) else repr(float(val))])
        else:
            w.writerow(["epoch", "loss"])
            for e, loss in curve:
                w.writerow([e, repr(float(loss))])
    print(f"{args.variant}: {len(curve)} epochs, final loss {curve[-1][1]:.6g}" if curve else f"{args.variant}: no data")
    return EXIT_OK


def _artifacts_for(methods, ckpt_dir: Path) -> dict:
    arts = {}
    for m in methods:
        need = "3dsmnet" if m == "gtbox" else m
        if need in TRAINABLE and need not in arts:
            name, art = load_checkpoint(ckpt_dir / f"{need}.json")
            if name != need:
                raise MapSchemaError(f"{ckpt_dir / (need + '.json')}: holds {name!r}, expected {need!r}")
            arts[need] = art
    return arts


def cmd_eval(cfg: RunConfig, args) -> int:
    root = _require_dataset(args.data)
    methods = list(EVAL_METHODS) if args.variant in (None, "all") else args.variant.split(",")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {bad}")
    ev = cfg.eval
    episodes = load_split(root, ev["split"])
    if not episodes:
        raise EvaluationDataError(f"{root}: split {ev['split']!r} is empty")
    arts = _artifacts_for(methods, Path(args.checkpoints or args.out))
    dims = {ep.maps["A"].descriptor_dim for ep in episodes}
    for name, art in arts.items():
        d_in = art.d_in if isinstance(art, MatcherParams) else art.layers[0][0].shape[1]
        if dims != {d_in}:
            raise MapSchemaError(f"checkpoint {name} expects {d_in}-d descriptors, dataset {root} has {sorted(dims)}")
    reports, dustbin = [], {}
    for m in methods:
        evals = evaluate_method(m, episodes, arts, float(ev["iou_threshold"]), seed=cfg.seed)
        reports += aggregate(evals, m, ev["split"], int(ev["n_resamples"]), cfg.seed)
        summary = dustbin_summary(evals)
        if summary is not None:
            dustbin[m] = summary
    out = Path(args.out)
    _write_resolved(cfg, out, "eval")
    write_reports(reports, csv_path=out / "metrics.csv")
    _dump({"reports": [r.to_dict() for r in reports], "dustbin": dustbin}, out / "metrics.json")
    print(format_table(reports))
    for cat in ("unchanged", "moved", "added", "removed"):
        print(f"\n[{cat}]")
        print(format_table(reports, cat))
    for m, s in dustbin.items():
        print(f"\ndustbin {m}: mean {s['mean']:.3f} std {s['std']:.3f}")
    return EXIT_OK


def cmd_match(cfg: RunConfig, args) -> int:
    a, b = load_map(args.map_a), load_map(args.map_b)
    if a.descriptor_dim != b.descriptor_dim:
        raise MapSchemaError(f"{args.map_a} has {a.descriptor_dim}-d descriptors, {args.map_b} has {b.descriptor_dim}")
    variant = args.variant or "3dsmnet"
    if variant in ("h-l2", "h-m"):
        _, res = baseline_match(a, b, "l2" if variant == "h-l2" else "mahalanobis")
    else:
        if not args.checkpoint:
            raise UsageError(f"--variant {variant} needs --checkpoint")
        _, art = load_checkpoint(args.checkpoint)
        if isinstance(art, ProjectionNet):
            _, res = baseline_match(a, b, "projected", projection=art)
        else:
            if art.d_in != a.descriptor_dim:
                raise MapSchemaError(f"{args.checkpoint} expects {art.d_in}-d descriptors, maps have {a.descriptor_dim}")
            fw = matcher_forward(a.descriptors(), b.descriptors(), art)
            res = extract_matches(fw.P, float(cfg.eval["match_threshold"]))
    doc = {"version": "reid3d-match/1", "map_a": str(args.map_a), "map_b": str(args.map_b), "variant": variant,
           **res.to_dict()}
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(cfg, out, "match")
        out = out / "match.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    _dump(doc, out)
    print(f"matched {len(res.pairs)}  added {len(res.unmatched_b)}  removed {len(res.unmatched_a)}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    from .bench import format_rows, run_benchmarks
    rows = run_benchmarks(args.repeats, cfg.seed)
    print(format_rows(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "backend", "size", "seconds", "speedup"])
            for r in rows:
                w.writerow([r.kernel, r.backend, r.size, r.seconds, r.speedup])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (flags win over file values)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="worker processes; 1 guarantees bit-identical output")
    p = _Parser(prog="reid3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate an episode dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-episodes", type=int, help="episodes per selected split")
    g.add_argument("--splits", help="comma-separated splits to generate with --n-episodes (default: all)")
    g.add_argument("--dim", type=int, help="descriptor dimension")

    t = sub.add_parser("train", parents=[common], help="train a matcher or projection")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", required=True, choices=sorted(TRAINABLE))
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate methods on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--variant", help="method, comma list, or 'all'")
    e.add_argument("--checkpoints", help="directory with <method>.json checkpoints (default: --out)")
    e.add_argument("--split")
    e.add_argument("--out", required=True)

    m = sub.add_parser("match", parents=[common], help="match two object maps")
    m.add_argument("--map-a", required=True)
    m.add_argument("--map-b", required=True)
    m.add_argument("--variant", choices=("h-l2", "h-m", "h1l", "h2l", "h3l", "sinkhorn-fixed", "3dsmnet"))
    m.add_argument("--checkpoint")
    m.add_argument("--out", required=True)

    b = sub.add_parser("bench", parents=[common], help="time compiled and pure-Python kernels")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out")
    return p


def resolve_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"{path}: config file not found")
        try:
            cfg = RunConfig.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise MapParseError(f"{path}: {exc}") from None
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg.threads = args.threads
    if getattr(args, "dim", None):
        cfg.sim["descriptor_dim"] = args.dim
    if getattr(args, "epochs", None):
        cfg.train["matcher"]["epochs"] = args.epochs
        cfg.train["triplet"]["epochs"] = args.epochs
    if getattr(args, "split", None):
        cfg.eval["split"] = args.split
    return cfg


def _setup_logging():
    level = os.environ.get("REID3D_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "match": cmd_match, "bench": cmd_bench}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"reid3d: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"reid3d: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, EpisodeFormatError, MapParseError, MapSchemaError, EvaluationDataError,
            GenerationError, KeyError, TypeError, ValueError, OSError) as exc:
        print(f"reid3d: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
