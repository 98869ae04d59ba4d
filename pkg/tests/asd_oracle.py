"""Brute-force surface distance: explicit neighbour scan plus all-pairs distances."""
import numpy as np

OFFSETS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def boundary_points(mask):
    D, H, W = mask.shape
    pts = []
    for z, y, x in zip(*np.nonzero(mask)):
        for dz, dy, dx in OFFSETS:
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < D and 0 <= ny < H and 0 <= nx < W) or not mask[nz, ny, nx]:
                pts.append((z, y, x))
                break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def brute_asd(pred, gt, k, spacing=(1.0, 1.0, 1.0)):
    sp = np.asarray(spacing, dtype=np.float64)
    a = boundary_points(pred == k) * sp
    b = boundary_points(gt == k) * sp
    if len(a) == 0 or len(b) == 0:
        return None
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return float((d.min(axis=1).mean() + d.min(axis=0).mean()) / 2.0)
