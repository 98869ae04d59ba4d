"""Per-voxel linear-softmax classifier over fixed intensity/position features."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import Volume, softmax_array
from .synthdata import MODEL_MAGIC, MalformedHeaderError, check_payload, read_envelope, write_envelope

NUM_FEATURES = 6
FEATURE_NAMES = ("intensity", "smooth_s1", "smooth_s2", "z", "y", "x")


def gaussian_taps(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return k / k.sum()


KERNEL_S1 = gaussian_taps(1.0, 1)  # 3 taps
KERNEL_S2 = gaussian_taps(2.0, 2)  # 5 taps


def _smooth(data: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = data
    for axis in range(3):
        out = correlate1d(out, kernel, axis=axis, mode="reflect")
    return out


def extract_features(v: Volume) -> np.ndarray:
    """Feature field of shape ``(6, D, H, W)``.

    Channels: raw intensity, separable Gaussian smoothing at sigma 1 and 2
    (reflective boundaries), and z/y/x coordinates scaled to [0, 1].
    """
    data = v.data.astype(np.float64)
    D, H, W = data.shape
    feats = np.empty((NUM_FEATURES, D, H, W), dtype=np.float64)
    feats[0] = data
    feats[1] = _smooth(data, KERNEL_S1)
    feats[2] = _smooth(data, KERNEL_S2)
    for c, n in enumerate((D, H, W)):
        ramp = np.arange(n, dtype=np.float64) / max(n - 1, 1)
        shape = [1, 1, 1]
        shape[c] = n
        feats[3 + c] = np.broadcast_to(ramp.reshape(shape), (D, H, W))
    return feats


@dataclass
class LinearModel:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, num_classes: int, num_features: int = NUM_FEATURES, seed: int = 0, stream: int = 0,
             scale: float = 0.01):
        """Uniform(-scale, scale) parameters from a Philox stream keyed by (seed, stream)."""
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xD1C, stream])))
        W = rng.uniform(-scale, scale, size=(num_classes, num_features))
        b = rng.uniform(-scale, scale, size=num_classes)
        return cls(W, b)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def num_features(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "LinearModel":
        return LinearModel(self.W.copy(), self.b.copy())


def forward(m: LinearModel, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if f.shape[0] != m.num_features:
        raise ValueError(f"model expects {m.num_features} features, got {f.shape[0]}")
    flat = f.reshape(f.shape[0], -1)
    logits = (m.W @ flat + m.b[:, None]).reshape((m.num_classes,) + f.shape[1:])
    return logits, softmax_array(logits)


def backward(m: LinearModel, f: np.ndarray, grad_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if grad_logits.shape[0] != m.num_classes or grad_logits.shape[1:] != f.shape[1:]:
        raise ValueError("shape mismatch between gradient and features")
    if f.shape[0] != m.num_features:
        raise ValueError("feature count does not match model")
    g = grad_logits.reshape(m.num_classes, -1)
    return g @ f.reshape(f.shape[0], -1).T, g.sum(axis=1)


@dataclass
class OptState:
    total_steps: int
    lr0: float = 0.03
    momentum: float = 0.9
    poly_power: float = 0.9
    step: int = 0
    velocity: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def lr(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        return self.lr0 * (1.0 - s / self.total_steps) ** self.poly_power


def sgd_step(m: LinearModel, grads: tuple[np.ndarray, np.ndarray], o: OptState) -> float:
    """Momentum SGD with poly-decayed learning rate. Returns the lr used."""
    if o.step >= o.total_steps:
        raise RuntimeError(f"optimizer step {o.step} exceeds total_steps {o.total_steps}")
    gW, gb = grads
    if o.velocity is None:
        o.velocity = (np.zeros_like(m.W), np.zeros_like(m.b))
    vW = o.momentum * o.velocity[0] + gW
    vb = o.momentum * o.velocity[1] + gb
    o.velocity = (vW, vb)
    lr = o.lr()
    m.W -= lr * vW
    m.b -= lr * vb
    o.step += 1
    return lr


def write_checkpoint(path, models: dict[str, LinearModel], meta: dict | None = None) -> None:
    """Models are stored in key order as W (row-major) then b, little-endian f64."""
    names = list(models)
    first = models[names[0]]
    for m in models.values():
        if m.W.shape != first.W.shape:
            raise ValueError("all models in a checkpoint must share a shape")
    header = {
        "dtype": "f64",
        "num_classes": first.num_classes,
        "num_features": first.num_features,
        "models": names,
        "meta": meta or {},
    }
    payload = b"".join(
        np.concatenate([models[n].W.reshape(-1), models[n].b]).astype("<f8").tobytes() for n in names)
    write_envelope(path, MODEL_MAGIC, header, payload)


def read_checkpoint(path) -> tuple[dict[str, LinearModel], dict]:
    header, payload = read_envelope(path, MODEL_MAGIC)
    try:
        K = int(header["num_classes"])
        F = int(header["num_features"])
        names = list(header["models"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"missing or invalid checkpoint field: {exc}") from None
    if header.get("dtype") != "f64":
        raise MalformedHeaderError("checkpoint dtype must be f64")
    per = K * F + K
    check_payload(payload, 8 * per * len(names))
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    models = {}
    for i, n in enumerate(names):
        chunk = flat[i * per:(i + 1) * per]
        models[n] = LinearModel(chunk[:K * F].reshape(K, F).copy(), chunk[K * F:].copy())
    return models, header.get("meta", {})
