"""Occlusion masks: synthetic long-time occlusion, detector confidences, RLE.

Masks are (2*N_jt, T) arrays with 1 = occluded, 0 = visible. Rows 2j and
2j+1 hold the u and v coordinate of joint j and are always equal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONFIDENCE_THRESHOLD = 0.3


class UnfillableJointError(ValueError):
    def __init__(self, rows):
        self.rows = sorted(set(int(r) for r in rows))
        super().__init__(f"never visible, cannot interpolate: joints {self.rows}")


@dataclass
class MaskGenConfig:
    theta: float
    kernel: int = 1
    n_joints: int = 17
    frames: int = 243
    seed: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel K must be a positive odd integer, got {self.kernel}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")


def smooth_uniform(p: np.ndarray, kernel: int) -> np.ndarray:
    """Moving average of width ``kernel`` along the last axis, edge-replicated."""
    if kernel == 1:
        return p.copy()
    half = kernel // 2
    padded = np.pad(p, [(0, 0)] * (p.ndim - 1) + [(half, half)], mode="edge")
    csum = np.cumsum(padded, axis=-1)
    csum = np.concatenate([np.zeros(p.shape[:-1] + (1,)), csum], axis=-1)
    return (csum[..., kernel:] - csum[..., :-kernel]) / kernel


def expand_joint_rows(joint_mask: np.ndarray) -> np.ndarray:
    """(..., N, T) per-joint mask -> (..., 2N, T) per-coordinate mask."""
    return np.repeat(joint_mask, 2, axis=-2)


def joint_rows(mask: np.ndarray) -> np.ndarray:
    """(..., 2N, T) -> (..., N, T); a joint counts as occluded if either row is."""
    return np.maximum(mask[..., 0::2, :], mask[..., 1::2, :])


def sample_masks(rng: np.random.Generator, theta, kernel: int, n_joints: int,
                 frames: int, batch: int | None = None) -> np.ndarray:
    """Draw masks: P ~ U(0,1) per joint and frame, smooth, threshold ``P_hat > theta``.

    ``theta`` may be an array broadcastable against the batch axis.
    """
    shape = (n_joints, frames) if batch is None else (batch, n_joints, frames)
    p_hat = smooth_uniform(rng.random(shape), kernel)
    theta = np.asarray(theta, dtype=np.float64)
    if batch is not None and theta.ndim == 1:
        theta = theta[:, None, None]
    return expand_joint_rows((p_hat > theta).astype(np.float64))


def generate_mask(cfg: MaskGenConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return sample_masks(rng, cfg.theta, cfg.kernel, cfg.n_joints, cfg.frames)


def occluded_fraction(mask) -> float:
    mask = np.asarray(mask)
    return float(mask.mean()) if mask.size else 0.0


def calibrate_theta(target_ratio: float, kernel: int = 1, n_samples: int = 100_000,
                    seed: int = 0) -> float:
    """Threshold giving an occluded fraction of ``target_ratio`` for width ``kernel``.

    Solved on a Monte Carlo sample of smoothed values by taking the matching
    empirical quantile, which is the exact root of the (monotone, stepwise)
    empirical fraction-vs-theta curve.
    """
    if not 0.0 <= target_ratio <= 1.0:
        raise ValueError("target ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    frames = 500
    rows = max(1, int(np.ceil(n_samples / frames)))
    vals = np.sort(smooth_uniform(rng.random((rows, frames)), kernel).ravel())
    n = vals.size
    above = int(round(target_ratio * n))
    if above >= n:
        return 0.0
    # exactly `above` samples exceed vals[n - above - 1]
    return float(vals[n - above - 1])


def confidence_to_mask(conf, threshold: float = CONFIDENCE_THRESHOLD) -> np.ndarray:
    """(N, T) detector confidences -> (2N, T) mask; occluded iff conf < threshold."""
    conf = np.asarray(conf, dtype=np.float64)
    return expand_joint_rows((conf < threshold).astype(np.float64))


def interpolate_missing(seq_2d, mask, on_unfillable: str = "raise") -> np.ndarray:
    """Fill occluded entries by per-row linear interpolation over time.

    Gaps before the first / after the last visible frame hold the nearest
    visible value. Rows with no visible frame raise
    :class:`UnfillableJointError`, or are zeroed when ``on_unfillable='zero'``.
    Visible entries are returned untouched.
    """
    x = np.array(seq_2d, dtype=np.float64, copy=True)
    vis = np.asarray(mask) == 0
    t = np.arange(x.shape[-1])
    dead = []
    for r in range(x.shape[0]):
        ok = vis[r]
        if ok.all():
            continue
        if not ok.any():
            dead.append(r)
            continue
        x[r, ~ok] = np.interp(t[~ok], t[ok], x[r, ok])
    if dead:
        if on_unfillable == "zero":
            x[dead] = 0.0
        else:
            raise UnfillableJointError([r // 2 for r in dead])
    return x


def run_lengths(row) -> list[int]:
    """Run lengths of consecutive 1s."""
    row = np.asarray(row).astype(np.int8)
    padded = np.concatenate([[0], row, [0]])
    edges = np.flatnonzero(np.diff(padded))
    return list((edges[1::2] - edges[0::2]).tolist())


def mean_run_length(mask) -> float:
    runs = [r for row in joint_rows(np.asarray(mask)) for r in run_lengths(row)]
    return float(np.mean(runs)) if runs else 0.0


def rle_encode(row) -> list[int]:
    """Alternating run lengths starting with a run of 0s (possibly empty)."""
    row = np.asarray(row).astype(np.int8)
    out, cur, n = [], 0, 0
    for v in row:
        if v == cur:
            n += 1
        else:
            out.append(n)
            cur, n = v, 1
    out.append(n)
    return out


def rle_decode(runs, length: int | None = None) -> np.ndarray:
    vals = np.concatenate([np.full(n, i % 2, dtype=np.float64) for i, n in enumerate(runs)]
                          + [np.zeros(0)])
    if length is not None and vals.size != length:
        raise ValueError(f"RLE row decodes to {vals.size} frames, expected {length}")
    return vals
