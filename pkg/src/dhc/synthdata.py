"""Synthetic class-imbalanced phantoms and the DHCVOL01 volume file format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import LabelMap, Volume, class_voxel_counts

SHAPE_KINDS = ("sphere", "box", "ellipsoid")

# RNG stream ids, combined with (seed, sample index).
STREAM_GEOMETRY = 0
STREAM_NOISE = 1

VOLUME_MAGIC = b"DHCVOL01"
MODEL_MAGIC = b"DHCMDL01"


class VolumeFormatError(ValueError):
    pass


class MalformedHeaderError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class PayloadSizeMismatchError(VolumeFormatError):
    pass


class LabelOutOfRangeError(VolumeFormatError):
    pass


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    num_classes: int
    target_fractions: list[float]
    shape_kinds: list[str]
    intensity_means: list[float]
    noise_sigma: float = 0.1
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.target_fractions = [float(f) for f in self.target_fractions]
        self.intensity_means = [float(m) for m in self.intensity_means]
        self.shape_kinds = list(self.shape_kinds)
        self.validate()

    def validate(self):
        K = self.num_classes
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if K < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.target_fractions) != K or len(self.intensity_means) != K:
            raise ValueError("target_fractions and intensity_means need one entry per class")
        if len(self.shape_kinds) != K:
            raise ValueError("shape_kinds needs one entry per class")
        bad = [s for s in self.shape_kinds[1:] if s not in SHAPE_KINDS]
        if bad:
            raise ValueError(f"unknown shape kind(s) {bad}")
        fr = np.asarray(self.target_fractions)
        if fr.min() < 0 or abs(fr.sum() - 1.0) > 1e-6:
            raise ValueError("target_fractions must be non-negative and sum to 1")
        if fr[0] < fr[1:].max(initial=0.0):
            raise ValueError("background fraction must be the largest")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "num_classes": self.num_classes,
            "target_fractions": self.target_fractions,
            "shape_kinds": self.shape_kinds,
            "intensity_means": self.intensity_means,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "spacing": list(self.spacing),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        known = {"dims", "num_classes", "target_fractions", "shape_kinds",
                 "intensity_means", "noise_sigma", "seed", "spacing"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown phantom spec fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class Dataset:
    labeled: list[tuple[Volume, LabelMap]]
    unlabeled: list[Volume]
    spec: PhantomSpec
    # Ground truth of the unlabeled volumes, for evaluation only.
    unlabeled_truth: list[LabelMap] = field(default_factory=list)

    @property
    def labeled_ratio(self) -> float:
        return len(self.labeled) / (len(self.labeled) + len(self.unlabeled))


def rng_for(seed: int, index: int, stream: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, sample index, stream)."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(index), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def _shape_axes(kind: str, rng: np.random.Generator) -> np.ndarray:
    # Relative semi-axes with unit product, so kinds of equal volume share a scale.
    if kind == "ellipsoid":
        a = rng.uniform(0.7, 1.4, size=3)
        return a / np.cbrt(a.prod())
    return np.ones(3)


def _shape_distance(kind: str, grid: np.ndarray, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    rel = (grid - center[:, None]) / axes[:, None]
    if kind == "box":
        return np.abs(rel).max(axis=0)
    return np.sqrt((rel ** 2).sum(axis=0))


def generate_phantom(spec: PhantomSpec, index: int) -> tuple[Volume, LabelMap]:
    """Build one labelled phantom.

    Each foreground class is a single primitive grown to its target voxel
    count: the ``n`` voxels nearest to a random center under the primitive's
    norm. Centers are drawn to avoid overlapping earlier primitives; when
    that fails, later classes simply overwrite earlier ones.
    """
    spec.validate()
    D, H, W = spec.dims
    total = D * H * W
    K = spec.num_classes
    rng = rng_for(spec.seed, index, STREAM_GEOMETRY)

    grid = np.indices((D, H, W), dtype=np.float64).reshape(3, -1)
    dims = np.array([D, H, W], dtype=np.float64)
    labels = np.zeros(total, dtype=np.uint8)
    placed: list[tuple[np.ndarray, float]] = []

    for k in range(1, K):
        frac = spec.target_fractions[k]
        if frac == 0:
            continue
        n = int(round(frac * total))
        if n < 1:
            raise ValueError(f"class too small for grid (class {k})")
        kind = spec.shape_kinds[k]
        axes = _shape_axes(kind, rng)
        # equivalent-sphere radius; boxes use half the cube side
        radius = np.cbrt(n / 8.0) if kind == "box" else np.cbrt(3.0 * n / (4.0 * np.pi))
        extent = radius * axes + 0.5
        lo = np.minimum(extent, dims / 2.0) - 0.5
        hi = np.maximum(dims - 1 - extent + 0.5, lo)
        center = rng.uniform(lo, hi)
        for _ in range(200):
            if all(np.linalg.norm(center - c) >= radius * axes.max() + r for c, r in placed):
                break
            center = rng.uniform(lo, hi)
        placed.append((center, radius * axes.max()))
        dist = _shape_distance(kind, grid, center, axes)
        nearest = np.argsort(dist, kind="stable")[:n]
        labels[nearest] = k

    labels = labels.reshape(D, H, W)
    means = np.asarray(spec.intensity_means, dtype=np.float64)
    image = means[labels]
    if spec.noise_sigma > 0:
        noise = rng_for(spec.seed, index, STREAM_NOISE).standard_normal((D, H, W))
        image = image + spec.noise_sigma * noise
    return (Volume(image.astype(np.float32), spec.spacing),
            LabelMap(labels, K, spec.spacing))


def make_dataset(spec: PhantomSpec, n_labeled: int, n_unlabeled: int) -> Dataset:
    if n_labeled < 1 or n_unlabeled < 1:
        raise ValueError("need at least one labeled and one unlabeled sample")
    labeled = [generate_phantom(spec, i) for i in range(n_labeled)]
    unlabeled, truth = [], []
    for i in range(n_labeled, n_labeled + n_unlabeled):
        v, l = generate_phantom(spec, i)
        unlabeled.append(v)
        truth.append(l)
    return Dataset(labeled, unlabeled, spec, truth)


def make_eval_set(spec: PhantomSpec, n: int, offset: int) -> list[tuple[Volume, LabelMap]]:
    """Held-out phantoms using sample indices ``offset .. offset+n-1``."""
    return [generate_phantom(spec, i) for i in range(offset, offset + n)]


def imbalance_ratio(labels: list[LabelMap]) -> float:
    """max class count / min nonzero class count over a set of label maps."""
    counts = sum(class_voxel_counts(l, l.num_classes) for l in labels)
    nz = counts[counts > 0]
    return float(nz.max() / nz.min())


# -- file format -----------------------------------------------------------

def write_envelope(path, magic: bytes, header: dict, payload: bytes) -> None:
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(payload)


def read_envelope(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < len(magic) + 4 or raw[:len(magic)] != magic:
        raise MalformedHeaderError("bad magic")
    (hlen,) = struct.unpack_from("<I", raw, len(magic))
    start = len(magic) + 4
    if start + hlen > len(raw):
        raise MalformedHeaderError("header length exceeds file size")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header is not a JSON object")
    return header, raw[start + hlen:]


def check_payload(payload: bytes, expected: int) -> None:
    if len(payload) < expected:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise PayloadSizeMismatchError(
            f"payload of {len(payload)} bytes does not match declared dims ({expected} bytes)")


def write_volume(path, v: Volume | LabelMap) -> None:
    header = {"dims": list(v.dims), "spacing": list(v.spacing)}
    if isinstance(v, LabelMap):
        header.update(dtype="u8", num_classes=v.num_classes)
        payload = v.data.astype("<u1").tobytes()
    else:
        header["dtype"] = "f32"
        payload = v.data.astype("<f4").tobytes()
    write_envelope(path, VOLUME_MAGIC, header, payload)


def read_volume(path) -> Volume | LabelMap:
    header, payload = read_envelope(path, VOLUME_MAGIC)
    try:
        dims = tuple(int(d) for d in header["dims"])
        dtype = header["dtype"]
        spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"missing or invalid header field: {exc}") from None
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3:
        raise MalformedHeaderError(f"invalid dims {dims}")
    n = dims[0] * dims[1] * dims[2]

    if dtype == "f32":
        check_payload(payload, 4 * n)
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        return Volume(data, spacing)
    if dtype == "u8":
        K = header.get("num_classes")
        if not isinstance(K, int) or K < 2:
            raise MalformedHeaderError("label file needs integer num_classes >= 2")
        check_payload(payload, n)
        data = np.frombuffer(payload, dtype="<u1").reshape(dims)
        if data.max() >= K:
            raise LabelOutOfRangeError("label out of range")
        return LabelMap(data.copy(), K, spacing)
    raise MalformedHeaderError(f"unknown dtype {dtype!r}")
