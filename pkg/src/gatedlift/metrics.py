"""MPJPE under similarity (Protocol 1) and scale-only (Protocol 2) alignment."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


class AlignmentError(ValueError):
    pass


@dataclass
class EvalReport:
    protocol: int
    per_action: dict[str, float]
    frame_counts: dict[str, int]
    per_frame: np.ndarray
    overall: float
    scales: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["protocol", "action", "frames", "mpjpe_mm"])
        for a in sorted(self.per_action):
            w.writerow([self.protocol, a, self.frame_counts[a], repr(self.per_action[a])])
        w.writerow([self.protocol, "Avg.", sum(self.frame_counts.values()), repr(self.overall)])
        return buf.getvalue()

    def table(self, method: str = "Proposed") -> str:
        """Actions as columns, one row per method, average last."""
        cols = sorted(self.per_action) + ["Avg."]
        vals = [self.per_action[a] for a in cols[:-1]] + [self.overall]
        width = max(8, *(len(c) + 1 for c in cols))
        name_w = max(len(method), 10) + 2
        title = f"3D Pose Error (Protocol {self.protocol}, Errors in mm)"
        head = " " * name_w + "".join(c.rjust(width) for c in cols)
        row = method.ljust(name_w) + "".join(f"{v:.1f}".rjust(width) for v in vals)
        return "\n".join([title, head, row])


def mpjpe(pred, gt) -> np.ndarray:
    """Per-frame mean joint distance for (F, N, 3) arrays (or (N, 3))."""
    return np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1).mean(axis=-1)


def procrustes_align(pred, gt):
    """Similarity transform (s, R, T) minimizing sum ||s R pred_i + T - gt_i||^2.

    Returns ``(s, R, T, aligned)`` with det(R) = +1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise AlignmentError(f"need matching (N, 3) point sets, got {pred.shape}, {gt.shape}")
    if len(pred) < 3:
        raise AlignmentError("need at least 3 points")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    p0, g0 = pred - mu_p, gt - mu_g
    sg = np.linalg.svd(g0, compute_uv=False)
    if sg[1] <= 1e-9 * max(sg[0], 1e-300):
        raise AlignmentError("ground-truth points are collinear or coincident")
    var_p = (p0**2).sum()
    if var_p == 0:
        raise AlignmentError("predicted points are coincident")
    u, s, vt = np.linalg.svd(g0.T @ p0)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag(d) @ vt
    scale = float((s * d).sum() / var_p)
    trans = mu_g - scale * rot @ mu_p
    return scale, rot, trans, scale * pred @ rot.T + trans


def _as_seq(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2 and a.shape[1] % 3 == 0 and a.shape[1] != 3:
        a = a.reshape(a.shape[0], -1, 3)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (F, N, 3) poses, got {a.shape}")
    return a


def _report(protocol, errors, actions, scales=None) -> EvalReport:
    actions = np.asarray(["all"] * len(errors) if actions is None else actions)
    if len(actions) != len(errors):
        raise ValueError("one action label per frame required")
    per_action, counts = {}, {}
    for a in np.unique(actions):
        sel = actions == a
        per_action[str(a)] = float(errors[sel].mean())
        counts[str(a)] = int(sel.sum())
    overall = float(errors.mean()) if len(errors) else 0.0
    return EvalReport(protocol, per_action, counts, errors, overall, scales or {})


def protocol1(pred_seq, gt_seq, actions=None) -> EvalReport:
    """Per-frame Procrustes alignment, then MPJPE."""
    pred, gt = _as_seq(pred_seq), _as_seq(gt_seq)
    if pred.shape != gt.shape:
        raise ValueError(f"frame/joint counts differ: {pred.shape} vs {gt.shape}")
    errs = np.array([mpjpe(procrustes_align(p, g)[3], g) for p, g in zip(pred, gt)])
    return _report(1, errs, actions)


def optimal_scale(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    den = float((pred * pred).sum())
    if den == 0:
        raise AlignmentError("prediction is identically zero; scale undefined")
    return float((pred * np.asarray(gt)).sum()) / den


def protocol2(pred_seq, gt_seq, actions=None, per_frame_scale: bool = False,
              sequence_ids=None) -> EvalReport:
    """Scale-only alignment in camera coordinates, then MPJPE.

    One scale per sequence by default (``sequence_ids`` labels frames of
    different sequences; all frames form one sequence when omitted).
    """
    pred, gt = _as_seq(pred_seq), _as_seq(gt_seq)
    if pred.shape != gt.shape:
        raise ValueError(f"frame/joint counts differ: {pred.shape} vs {gt.shape}")
    aligned = np.empty_like(pred)
    scales = {}
    if per_frame_scale:
        for t in range(len(pred)):
            s = optimal_scale(pred[t], gt[t])
            aligned[t] = s * pred[t]
            scales[str(t)] = s
    else:
        ids = np.zeros(len(pred), dtype=int) if sequence_ids is None else np.asarray(sequence_ids)
        for sid in np.unique(ids):
            sel = ids == sid
            s = optimal_scale(pred[sel], gt[sel])
            aligned[sel] = s * pred[sel]
            scales[str(sid)] = s
    return _report(2, mpjpe(aligned, gt), actions, scales)
