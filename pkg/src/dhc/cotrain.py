"""Heterogeneous co-training with cross pseudo supervision.

Two linear sub-models see the same inputs. Each is supervised by ground
truth on the labeled slice of the batch and by the peer's hard pseudo
labels on the whole batch, and each weights both losses with its own
dynamic class-weight tracker (by default DiffDW for model A, DistDW for B).
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ClassWeights, LabelMap, ProbMap, Volume, argmax_labels, class_voxel_counts
from .losses import unsupervised_pair_loss, weighted_cross_entropy
from .metrics import ClassReport, evaluate, mean_report
from .model import LinearModel, OptState, backward, extract_features, forward, sgd_step
from .synthdata import Dataset, rng_for
from .weighting import STRATEGIES, WeightTracker, format_float, weight_row, weights_header

STREAM_SAMPLER = 7
STREAM_MODEL_A = 1
STREAM_MODEL_B = 2


@dataclass
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 10
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 2
    lambda_u: float = 0.1
    rampup_epochs: Optional[int] = None
    crop_size: Optional[tuple[int, int, int]] = None
    flip_augment: bool = True
    seed: int = 0
    strategy_a: str = "diffdw"
    strategy_b: str = "distdw"
    beta: float = 0.99
    tau: int = 50
    epsilon: float = 1e-8
    alpha: float = 0.2
    lr0: float = 0.03
    momentum: float = 0.9
    poly_power: float = 0.9
    init_scale: float = 0.01
    eval_window: Optional[tuple[int, int, int]] = None
    eval_stride: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        if self.crop_size is not None:
            self.crop_size = tuple(int(c) for c in self.crop_size)
        if self.eval_window is not None:
            self.eval_window = tuple(int(c) for c in self.eval_window)
        if self.eval_stride is not None:
            self.eval_stride = tuple(int(c) for c in self.eval_stride)
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be non-negative")
        if self.labeled_per_batch < 1 or self.unlabeled_per_batch < 0:
            raise ValueError("batch composition must be positive")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
        for s in (self.strategy_a, self.strategy_b):
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")

    @property
    def ramp_length(self) -> int:
        return self.rampup_epochs if self.rampup_epochs is not None else max(self.epochs, 1)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("crop_size", "eval_window", "eval_stride"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)


def rampup(epoch: int, rampup_epochs: int) -> float:
    """Gaussian ramp ``exp(-5 (1 - t)^2)`` with ``t = min(epoch / rampup_epochs, 1)``."""
    if rampup_epochs <= 0:
        raise ValueError("rampup_epochs must be positive")
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    t = min(epoch / rampup_epochs, 1.0)
    return math.exp(-5.0 * (1.0 - t) ** 2)


@dataclass
class SubModel:
    model: LinearModel
    opt: OptState
    tracker: WeightTracker


@dataclass
class CoTrainState:
    a: SubModel
    b: SubModel
    num_classes: int
    epoch: int = 0
    iteration: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    @classmethod
    def create(cls, cfg: TrainConfig, num_classes: int) -> "CoTrainState":
        def sub(strategy, stream):
            m = LinearModel.init(num_classes, seed=cfg.seed, stream=stream, scale=cfg.init_scale)
            opt = OptState(max(cfg.total_steps, 1), cfg.lr0, cfg.momentum, cfg.poly_power)
            tr = WeightTracker(strategy, num_classes, cfg.beta, cfg.tau, cfg.epsilon, cfg.alpha)
            return SubModel(m, opt, tr)

        return cls(sub(cfg.strategy_a, STREAM_MODEL_A), sub(cfg.strategy_b, STREAM_MODEL_B),
                   num_classes, rng=rng_for(cfg.seed, 0, STREAM_SAMPLER))

    # spec-facing aliases
    @property
    def model_a(self) -> LinearModel:
        return self.a.model

    @property
    def model_b(self) -> LinearModel:
        return self.b.model


@dataclass
class ModelLosses:
    sup: float
    unsup: float
    total: float


@dataclass
class StepReport:
    iteration: int
    epoch: int
    ramp: float
    loss_a: ModelLosses
    loss_b: ModelLosses
    weights_a: ClassWeights
    weights_b: ClassWeights
    strategy_a: str
    strategy_b: str


def batch_dice(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], K: int) -> tuple[np.ndarray, np.ndarray]:
    """Micro-averaged per-class Dice over a batch and the GT presence mask."""
    inter = np.zeros(K)
    psum = np.zeros(K)
    gsum = np.zeros(K)
    for p, g in zip(preds, gts):
        pc = class_voxel_counts(p, K)
        gc = class_voxel_counts(g, K)
        ic = class_voxel_counts(g[p == g], K)
        inter += ic
        psum += pc
        gsum += gc
    present = gsum > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        dice = np.where(present, 2.0 * inter / np.maximum(psum + gsum, 1), 0.0)
    return dice, present


def model_objective(model: LinearModel, outputs, feats, targets, pseudo, w: ClassWeights,
                    unsup_scale: float):
    """Supervised CE over the labeled inputs plus ``unsup_scale`` times the
    pair loss over every input, both sample-averaged.

    ``outputs``/``feats`` cover labeled inputs first; ``targets`` holds one
    label array per labeled input, ``pseudo`` one per input. Returns the
    loss terms and the parameter gradient of the total.
    """
    n_l, n = len(targets), len(outputs)
    gW = np.zeros_like(model.W)
    gb = np.zeros_like(model.b)
    sup = unsup = 0.0
    for i in range(n):
        logits, probs = outputs[i]
        grad = 0.0
        if i < n_l:
            r = weighted_cross_entropy(logits, targets[i], w, probs=probs)
            sup += r.value / n_l
            grad = r.grad_logits / n_l
        r = unsupervised_pair_loss(logits, pseudo[i], w, probs=probs)
        unsup += r.value / n
        grad = grad + (unsup_scale / n) * r.grad_logits
        dW, db = backward(model, feats[i], grad)
        gW += dW
        gb += db
    return ModelLosses(sup, unsup, sup + unsup_scale * unsup), (gW, gb)


def train_step(state: CoTrainState, labeled_batch, unlabeled_batch, cfg: TrainConfig) -> StepReport:
    K = state.num_classes
    if len(labeled_batch) != cfg.labeled_per_batch or len(unlabeled_batch) != cfg.unlabeled_per_batch:
        raise ValueError("batch sizes do not match config")
    for _, y in labeled_batch:
        if y.num_classes != K:
            raise ValueError(f"class count mismatch: data has {y.num_classes}, model has {K}")

    n_l = len(labeled_batch)
    feats = [extract_features(v) for v, _ in labeled_batch] + [extract_features(v) for v in unlabeled_batch]
    targets = [y.data for _, y in labeled_batch]
    out_a = [forward(state.a.model, f) for f in feats]
    out_b = [forward(state.b.model, f) for f in feats]
    # Pseudo labels are plain arrays: constants for the peer's loss.
    pseudo_a = [argmax_labels(p) for _, p in out_a]
    pseudo_b = [argmax_labels(p) for _, p in out_b]

    # A tracker sees the pseudo labels that supervise its own model (the
    # peer's) and its own model's Dice on the labeled slice.
    for me, own, peer in ((state.a, pseudo_a, pseudo_b), (state.b, pseudo_b, pseudo_a)):
        counts = sum(class_voxel_counts(p, K) for p in peer[n_l:]) if len(peer) > n_l else None
        dice, present = batch_dice(own[:n_l], targets, K)
        me.tracker.update(pseudo_counts=counts, dice=dice, present=present)

    w_a = state.a.tracker.weights()
    w_b = state.b.tracker.weights()
    ramp = rampup(state.epoch, cfg.ramp_length)
    scale = cfg.lambda_u * ramp

    loss_a, grads_a = model_objective(state.a.model, out_a, feats, targets, pseudo_b, w_a, scale)
    loss_b, grads_b = model_objective(state.b.model, out_b, feats, targets, pseudo_a, w_b, scale)
    sgd_step(state.a.model, grads_a, state.a.opt)
    sgd_step(state.b.model, grads_b, state.b.opt)

    report = StepReport(state.iteration, state.epoch, ramp, loss_a, loss_b, w_a, w_b,
                        state.a.tracker.strategy, state.b.tracker.strategy)
    state.iteration += 1
    return report


# -- augmentation and sampling ----------------------------------------------

def augment(rng: np.random.Generator, image: Volume, label: Optional[LabelMap], crop_size, flip: bool):
    """Random crop and per-axis flips, applied identically to image and label."""
    img = image.data
    lab = label.data if label is not None else None
    if crop_size is not None:
        if any(c > d for c, d in zip(crop_size, img.shape)):
            raise ValueError(f"crop {crop_size} larger than volume {img.shape}")
        starts = [int(rng.integers(0, d - c + 1)) for c, d in zip(crop_size, img.shape)]
        sl = tuple(slice(s, s + c) for s, c in zip(starts, crop_size))
        img = img[sl]
        lab = lab[sl] if lab is not None else None
    if flip:
        axes = tuple(ax for ax in range(3) if rng.random() < 0.5)
        if axes:
            img = np.flip(img, axis=axes)
            lab = np.flip(lab, axis=axes) if lab is not None else None
    out_img = Volume(np.ascontiguousarray(img), image.spacing)
    out_lab = LabelMap(np.ascontiguousarray(lab), label.num_classes, label.spacing) if label is not None else None
    return out_img, out_lab


def _pick(rng: np.random.Generator, n: int, k: int) -> list[int]:
    return [int(i) for i in rng.choice(n, size=k, replace=n < k)]


def sample_batch(state: CoTrainState, dataset: Dataset, cfg: TrainConfig):
    rng = state.rng
    labeled = []
    for i in _pick(rng, len(dataset.labeled), cfg.labeled_per_batch):
        labeled.append(augment(rng, *dataset.labeled[i], cfg.crop_size, cfg.flip_augment))
    unlabeled = []
    if cfg.unlabeled_per_batch:
        for i in _pick(rng, len(dataset.unlabeled), cfg.unlabeled_per_batch):
            unlabeled.append(augment(rng, dataset.unlabeled[i], None, cfg.crop_size, cfg.flip_augment)[0])
    return labeled, unlabeled


# -- inference --------------------------------------------------------------

def model_probs(m: LinearModel, v: Volume) -> np.ndarray:
    return forward(m, extract_features(v))[1]


def ensemble_probs(ma: LinearModel, mb: LinearModel, v: Volume) -> np.ndarray:
    f = extract_features(v)
    return 0.5 * (forward(ma, f)[1] + forward(mb, f)[1])


def infer(state: CoTrainState, v: Volume) -> ProbMap:
    """Average of the two sub-models' probability maps."""
    return ProbMap(ensemble_probs(state.a.model, state.b.model, v))


def window_starts(n: int, win: int, stride: int) -> list[int]:
    """Window origins along one axis; the last window is clamped to the edge."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    if win > n or win <= 0:
        raise ValueError(f"window {win} does not fit axis of length {n}")
    starts = list(range(0, n - win + 1, stride))
    if starts[-1] != n - win:
        starts.append(n - win)
    return starts


def sliding_window(prob_fn: Callable[[Volume], np.ndarray], v: Volume, window, stride) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly averaged overlapping window predictions and per-voxel coverage."""
    if len(window) != 3 or len(stride) != 3:
        raise ValueError("window and stride need three entries")
    dims = v.dims
    grids = [window_starts(n, w, s) for n, w, s in zip(dims, window, stride)]
    acc = None
    cover = np.zeros(dims, dtype=np.int64)
    for z in grids[0]:
        for y in grids[1]:
            for x in grids[2]:
                sl = (slice(z, z + window[0]), slice(y, y + window[1]), slice(x, x + window[2]))
                p = prob_fn(Volume(v.data[sl], v.spacing))
                if acc is None:
                    acc = np.zeros((p.shape[0],) + tuple(dims))
                acc[(slice(None),) + sl] += p
                cover[sl] += 1
    return acc / cover[None], cover


def sliding_window_infer(state: CoTrainState, v: Volume, window, stride) -> ProbMap:
    probs, _ = sliding_window(lambda sub: ensemble_probs(state.a.model, state.b.model, sub), v, window, stride)
    return ProbMap(probs)


def predictors(state: CoTrainState, cfg: TrainConfig) -> dict[str, Callable[[Volume], ProbMap]]:
    fns = {
        "ensemble": lambda v: ensemble_probs(state.a.model, state.b.model, v),
        "a": lambda v: model_probs(state.a.model, v),
        "b": lambda v: model_probs(state.b.model, v),
    }
    if cfg.eval_window is not None:
        stride = cfg.eval_stride or cfg.eval_window
        return {k: (lambda v, f=f: ProbMap(sliding_window(f, v, cfg.eval_window, stride)[0]))
                for k, f in fns.items()}
    return {k: (lambda v, f=f: ProbMap(f(v))) for k, f in fns.items()}


# -- experiment driver ------------------------------------------------------

METRICS_HEADER = ["epoch", "model", "class", "dice", "asd"]
LOSSES_HEADER = ["iteration", "model", "sup", "unsup", "total", "ramp"]


@dataclass
class MetricsLog:
    num_classes: int
    reports: dict = field(default_factory=dict)  # (epoch, model) -> ClassReport
    metrics_rows: list = field(default_factory=list)
    loss_rows: list = field(default_factory=list)
    weight_rows: list = field(default_factory=list)

    def add_report(self, epoch: int, model: str, rep: ClassReport) -> None:
        self.reports[(epoch, model)] = rep
        for k, (d, a) in enumerate(zip(rep.dice, rep.asd), start=1):
            self.metrics_rows.append([epoch, model, k, format_float(d), format_float(a)])
        self.metrics_rows.append([epoch, model, "mean", format_float(rep.mean_dice), format_float(rep.mean_asd)])

    def add_step(self, r: StepReport) -> None:
        for name, loss in (("a", r.loss_a), ("b", r.loss_b)):
            self.loss_rows.append([r.iteration, name, format_float(loss.sup), format_float(loss.unsup),
                                   format_float(loss.total), format_float(r.ramp)])
        for name, strategy, w in (("a", r.strategy_a, r.weights_a), ("b", r.strategy_b, r.weights_b)):
            self.weight_rows.append(weight_row(r.iteration, f"{name}:{strategy}", w))

    def final(self, model: str = "ensemble") -> ClassReport:
        last = max(e for e, m in self.reports if m == model)
        return self.reports[(last, model)]

    def write(self, out_dir) -> dict[str, str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "metrics": ("metrics.csv", METRICS_HEADER, self.metrics_rows),
            "losses": ("losses.csv", LOSSES_HEADER, self.loss_rows),
            "weights": ("weights.csv", weights_header(self.num_classes), self.weight_rows),
        }
        for name, header, rows in files.values():
            with open(out / name, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(header)
                wr.writerows(rows)
        return {k: v[0] for k, v in files.items()}


def run_experiment(cfg: TrainConfig, dataset: Dataset, eval_set=None, out_dir=None,
                   state: Optional[CoTrainState] = None, eval_models=("ensemble", "a", "b")):
    """Train for ``cfg.epochs`` and evaluate before training and after every epoch.

    ``eval_set`` defaults to the unlabeled volumes with their retained
    ground truth. Returns ``(state, log)``; CSV logs go to ``out_dir`` if set.
    """
    K = dataset.spec.num_classes
    if eval_set is None:
        eval_set = list(zip(dataset.unlabeled, dataset.unlabeled_truth))
    if state is None:
        state = CoTrainState.create(cfg, K)
    log = MetricsLog(K)

    def run_eval(epoch):
        preds = predictors(state, cfg)
        for name in eval_models:
            log.add_report(epoch, name, mean_report(evaluate(preds[name], eval_set)))

    run_eval(0)
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        for _ in range(cfg.steps_per_epoch):
            labeled, unlabeled = sample_batch(state, dataset, cfg)
            log.add_step(train_step(state, labeled, unlabeled, cfg))
        state.epoch = epoch + 1
        run_eval(epoch + 1)
    if out_dir is not None:
        log.write(out_dir)
    return state, log
