"""Dynamic class weights: distribution-aware (DistDW), difficulty-aware
(DiffDW), and the uniform baseline.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import ClassWeights

DICE_MIN = 1e-3

STRATEGIES = ("uniform", "distdw", "diffdw")


def uniform_weights(K: int) -> ClassWeights:
    if K < 2:
        raise ValueError("need at least two classes")
    return ClassWeights(np.ones(K))


def distdw_raw_weights(counts) -> ClassWeights:
    """Log-ratio weights from per-class voxel counts.

    ``P_k = max(N) / N_k`` and ``w_k = ln P_k / max ln P``: the most frequent
    class gets 0, the rarest gets 1. Zero counts are treated as 1.
    """
    n = np.asarray(counts, dtype=np.float64).reshape(-1)
    if n.size < 2:
        raise ValueError("need at least two classes")
    if n.min() < 0:
        raise ValueError("counts must be non-negative")
    n = np.maximum(n, 1.0)
    logp = np.log(n.max() / n)
    top = logp.max()
    if top == 0:
        return ClassWeights(np.ones(n.size))
    return ClassWeights(logp / top)


@dataclass
class DistDWState:
    num_classes: int
    beta: float = 0.99
    weights: ClassWeights | None = None

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")

    @property
    def initialized(self) -> bool:
        return self.weights is not None


def ema_blend(prev: ClassWeights, raw: ClassWeights, beta: float) -> ClassWeights:
    return ClassWeights(beta * prev.values + (1 - beta) * raw.values)


def distdw_update(state: DistDWState, counts) -> ClassWeights:
    """Fold one count vector into the EMA; the first call adopts the raw weights."""
    raw = distdw_raw_weights(counts)
    if len(raw) != state.num_classes:
        raise ValueError("count vector length does not match num_classes")
    state.weights = raw if state.weights is None else ema_blend(state.weights, raw, state.beta)
    return state.weights


@dataclass
class DiffDWState:
    num_classes: int
    tau: int = 50
    epsilon: float = 1e-8
    alpha: float = 0.2
    history: list = field(default_factory=list)
    records_seen: np.ndarray = None

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not self.history:
            self.history = [deque(maxlen=self.tau + 1) for _ in range(self.num_classes)]
        if self.records_seen is None:
            self.records_seen = np.zeros(self.num_classes, dtype=np.int64)


def diffdw_record(state: DiffDWState, dice, present) -> None:
    dice = np.asarray(dice, dtype=np.float64).reshape(-1)
    present = np.asarray(present, dtype=bool).reshape(-1)
    if dice.size != state.num_classes or present.size != state.num_classes:
        raise ValueError("dice/present length does not match num_classes")
    for k in np.flatnonzero(present):
        state.history[k].append(float(np.clip(dice[k], DICE_MIN, 1.0)))
        state.records_seen[k] += 1


def class_difficulty(hist, epsilon: float) -> float:
    """Learning-speed difficulty ``(du + eps) / (dl + eps)`` over a Dice history.

    ``du`` sums the magnitude of log Dice ratios over non-improving steps,
    ``dl`` over improving ones.
    """
    lam = np.asarray(hist, dtype=np.float64)
    step = np.abs(np.log(lam[1:] / lam[:-1]))
    up = lam[1:] > lam[:-1]
    du = step[~up].sum()
    dl = step[up].sum()
    return (du + epsilon) / (dl + epsilon)


def diffdw_weights(state: DiffDWState) -> ClassWeights:
    K = state.num_classes
    raw = np.full(K, np.nan)
    for k, hist in enumerate(state.history):
        if len(hist) < 2:
            continue
        lam = np.asarray(hist, dtype=np.float64)
        d = class_difficulty(lam, state.epsilon)
        # reversed Dice over the last tau records (the "t" side of each pair)
        w_rev = max(float(np.mean(1.0 - lam[1:])), DICE_MIN)
        raw[k] = w_rev * d ** state.alpha
    if np.all(np.isnan(raw)):
        return ClassWeights(np.ones(K))
    top = np.nanmax(raw)
    raw[np.isnan(raw)] = top
    return ClassWeights(raw / top)


class WeightTracker:
    """One model's weighting strategy plus whatever state it needs."""

    def __init__(self, strategy: str, num_classes: int, beta=0.99, tau=50, epsilon=1e-8, alpha=0.2):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
        self.strategy = strategy
        self.num_classes = num_classes
        self.distdw = DistDWState(num_classes, beta) if strategy == "distdw" else None
        self.diffdw = DiffDWState(num_classes, tau, epsilon, alpha) if strategy == "diffdw" else None

    def update(self, *, pseudo_counts=None, dice=None, present=None) -> None:
        if self.distdw is not None and pseudo_counts is not None:
            distdw_update(self.distdw, pseudo_counts)
        if self.diffdw is not None and dice is not None:
            diffdw_record(self.diffdw, dice, present)

    def weights(self) -> ClassWeights:
        if self.distdw is not None:
            if self.distdw.weights is None:
                return uniform_weights(self.num_classes)
            return self.distdw.weights
        if self.diffdw is not None:
            return diffdw_weights(self.diffdw)
        return uniform_weights(self.num_classes)


def format_float(x) -> str:
    """Six significant digits; empty string for missing values."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return f"{float(x):.6g}"


def weights_header(num_classes: int) -> list[str]:
    return ["iteration", "strategy"] + [f"w_{k}" for k in range(num_classes)]


def weight_row(iteration: int, strategy: str, w: ClassWeights) -> list:
    return [iteration, strategy] + [format_float(v) for v in w]


class WeightsCSV:
    """Appends ``iteration, strategy, w_0..w_{K-1}`` rows to a CSV file."""

    def __init__(self, path, num_classes: int):
        self.path = path
        self.num_classes = num_classes
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(weights_header(num_classes))

    def append(self, iteration: int, strategy: str, w: ClassWeights) -> None:
        if len(w) != self.num_classes:
            raise ValueError("weight vector length does not match header")
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(weight_row(iteration, strategy, w))
