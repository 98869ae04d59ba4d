"""Command-line entry point: ``dhc generate | train | eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .cotrain import CoTrainState, TrainConfig, predictors, run_experiment
from .metrics import evaluate, mean_report
from .model import read_checkpoint, write_checkpoint
from .synthdata import (Dataset, PhantomSpec, VolumeFormatError, generate_phantom, read_volume,
                        write_volume)
from .weighting import STRATEGIES, format_float

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# The desk-scale ablation phantom: K=6, ~90% background, rarest class under 0.2%.
ACCEPTANCE_SPEC = {
    "dims": [32, 32, 32],
    "num_classes": 6,
    "target_fractions": [0.9, 0.05, 0.03, 0.015, 0.0031, 0.0019],
    "shape_kinds": ["sphere", "ellipsoid", "sphere", "box", "sphere", "sphere"],
    "intensity_means": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "noise_sigma": 0.15,
    "seed": 2023,
    "spacing": [1.0, 1.0, 1.0],
}

PRESETS = {"acceptance": ACCEPTANCE_SPEC}


class RunManifest:
    """manifest.json in the output directory, rewritten at start and end of a run."""

    def __init__(self, out_dir: Path, command: str, config: dict, seed=None):
        self.path = out_dir / "manifest.json"
        self.t0 = time.perf_counter()
        self.data = {
            "tool": "dhc",
            "version": __version__,
            "command": command,
            "seed": seed,
            "config": config,
            "artifacts": {},
            "status": "running",
            "duration_s": None,
        }
        self._flush()

    def _flush(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finalize(self, artifacts: dict, status="complete"):
        self.data["artifacts"] = artifacts
        self.data["status"] = status
        self.data["duration_s"] = round(time.perf_counter() - self.t0, 3)
        self._flush()


def thread_limit():
    n = int(os.environ.get("DHC_THREADS", "0") or 0)
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# -- dataset directories ----------------------------------------------------

def write_dataset_dir(out: Path, spec: PhantomSpec, n_labeled: int, n_unlabeled: int, n_eval: int) -> dict:
    if n_labeled < 1 or n_unlabeled < 1 or n_eval < 0:
        raise ValueError("need >= 1 labeled and >= 1 unlabeled sample")
    files = {"labeled": [], "unlabeled": [], "truth": [], "eval": []}
    for sub in files:
        (out / sub).mkdir(parents=True, exist_ok=True)
    idx = 0
    for split, n in (("labeled", n_labeled), ("unlabeled", n_unlabeled), ("eval", n_eval)):
        for _ in range(n):
            v, l = generate_phantom(spec, idx)
            img = f"{split}/{idx:03d}_image.dhcv"
            write_volume(out / img, v)
            if split == "unlabeled":
                lab = f"truth/{idx:03d}_label.dhcv"
                files["unlabeled"].append(img)
                files["truth"].append(lab)
            else:
                lab = f"{split}/{idx:03d}_label.dhcv"
                files[split].append([img, lab])
            write_volume(out / lab, l)
            idx += 1
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    files["spec"] = "spec.json"
    return files


def read_dataset_dir(data: Path):
    manifest = json.loads((data / "manifest.json").read_text())
    files = manifest["artifacts"]
    spec = PhantomSpec.from_dict(json.loads((data / files["spec"]).read_text()))
    labeled = [(read_volume(data / i), read_volume(data / l)) for i, l in files["labeled"]]
    unlabeled = [read_volume(data / i) for i in files["unlabeled"]]
    truth = [read_volume(data / l) for l in files["truth"]]
    eval_set = [(read_volume(data / i), read_volume(data / l)) for i, l in files.get("eval", [])]
    ds = Dataset(labeled, unlabeled, spec, truth)
    if not eval_set:
        eval_set = list(zip(unlabeled, truth))
    return ds, eval_set


# -- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.spec:
        spec_dict = json.loads(Path(args.spec).read_text())
    else:
        spec_dict = dict(PRESETS[args.preset])
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = PhantomSpec.from_dict(spec_dict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(out, "generate", spec.to_dict(), spec.seed)
    files = write_dataset_dir(out, spec, args.labeled, args.unlabeled, args.eval)
    man.finalize(files)
    print(f"wrote {args.labeled} labeled, {args.unlabeled} unlabeled, {args.eval} eval phantoms to {out}")
    return EXIT_OK


def load_config(args) -> TrainConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "epochs": args.epochs,
        "steps_per_epoch": args.steps_per_epoch,
        "seed": args.seed,
        "strategy_a": args.strategy_a,
        "strategy_b": args.strategy_b,
        "lr0": args.lr0,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = load_config(args)
    ds, eval_set = read_dataset_dir(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(out, "train", cfg.to_dict(), cfg.seed)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    state = CoTrainState.create(cfg, ds.spec.num_classes)
    state, log = run_experiment(cfg, ds, eval_set, out_dir=out, state=state)
    meta = {"epoch": state.epoch, "iteration": state.iteration,
            "strategy_a": cfg.strategy_a, "strategy_b": cfg.strategy_b}
    write_checkpoint(out / "checkpoint.dhcm", {"a": state.a.model, "b": state.b.model}, meta)
    artifacts = {"checkpoint": "checkpoint.dhcm", "config": "config.json",
                 "metrics": "metrics.csv", "losses": "losses.csv", "weights": "weights.csv"}
    man.finalize(artifacts)
    rep = log.final()
    print(f"trained {cfg.strategy_a}/{cfg.strategy_b} for {cfg.epochs} epochs; "
          f"ensemble mean dice {format_float(rep.mean_dice) or 'n/a'}")
    return EXIT_OK


def format_table(rep, num_classes: int) -> str:
    header = ["metric"] + [f"class_{k}" for k in range(1, num_classes)] + ["mean_dice", "mean_asd"]
    cells = [f"{format_float(d) or '-'}/{format_float(a) or '-'}" for d, a in zip(rep.dice, rep.asd)]
    row = ["dice/asd"] + cells + [format_float(rep.mean_dice) or "-", format_float(rep.mean_asd) or "-"]
    widths = [max(len(h), len(c)) for h, c in zip(header, row)]
    line = lambda cols: "  ".join(c.rjust(w) for c, w in zip(cols, widths))
    return line(header) + "\n" + line(row)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    models, meta = read_checkpoint(ckpt)
    if set(models) != {"a", "b"}:
        raise ValueError("checkpoint must hold sub-models 'a' and 'b'")
    ds, eval_set = read_dataset_dir(Path(args.data))
    K = ds.spec.num_classes
    if models["a"].num_classes != K:
        raise ValueError(f"checkpoint has {models['a'].num_classes} classes, data has {K}")
    cfg = TrainConfig(epochs=0, eval_window=args.window, eval_stride=args.stride)
    state = CoTrainState.create(cfg, K)
    state.a.model, state.b.model = models["a"], models["b"]
    rep = mean_report(evaluate(predictors(state, cfg)["ensemble"], eval_set))

    out = Path(args.out) if args.out else ckpt.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    epoch = meta.get("epoch", "")
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "model", "class", "dice", "asd"])
        for k, (d, a) in enumerate(zip(rep.dice, rep.asd), start=1):
            wr.writerow([epoch, "ensemble", k, format_float(d), format_float(a)])
        wr.writerow([epoch, "ensemble", "mean", format_float(rep.mean_dice), format_float(rep.mean_asd)])
    print(format_table(rep, K))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dhc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dhc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="PhantomSpec JSON file")
    src.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--labeled", type=int, default=2)
    g.add_argument("--unlabeled", type=int, default=8)
    g.add_argument("--eval", type=int, default=0, help="held-out evaluation phantoms")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="co-train two sub-models")
    t.add_argument("--config", help="TrainConfig JSON; flags below override it")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--strategy-a", choices=STRATEGIES)
    t.add_argument("--strategy-b", choices=STRATEGIES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr0", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's evaluation split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--window", type=int, nargs=3, metavar=("D", "H", "W"))
    e.add_argument("--stride", type=int, nargs=3, metavar=("D", "H", "W"))
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with thread_limit():
            return args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError, VolumeFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
