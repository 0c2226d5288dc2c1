"""Global root trajectory from root-relative poses by masked back-projection.

Minimizes, over per-frame root positions C_t (mm, camera frame),

    sum_t sum_i (1 - M_it) ||rho(X_it + C_t) - x_it||^2
      + lambda1 sum_t ||C_t - C_{t-1}||^2
      + lambda2 sum_t ||C_{t-1} + C_{t+1} - 2 C_t||^2

with Levenberg-Marquardt. The smoothness terms are measured on C expressed
in ``prior_unit_mm`` units (metres by default) while residuals stay in
pixels, so lambda1 = lambda2 = 1 is a weak prior that only decides frames
with little or no data. The Gauss-Newton matrix is block-diagonal (data)
plus a pentadiagonal-in-time prior, so each step is a banded solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from .camera import BehindCameraError, CameraIntrinsics, project, project_jacobian

MIN_VISIBLE_FOR_INIT = 2


class InsufficientObservationError(ValueError):
    pass


class UnsolvableError(ValueError):
    pass


@dataclass
class TrajectoryProblem:
    poses_rel: np.ndarray  # (F, N, 3) mm
    obs_2d: np.ndarray  # (F, N, 2) px
    cam: CameraIntrinsics
    mask: np.ndarray | None = None  # (F, N), 1 = occluded
    lambda1: float = 1.0
    lambda2: float = 1.0
    prior_unit_mm: float = 1000.0

    def __post_init__(self):
        self.poses_rel = np.asarray(self.poses_rel, dtype=np.float64)
        self.obs_2d = np.asarray(self.obs_2d, dtype=np.float64)
        n_frames, n_joints = self.poses_rel.shape[:2]
        if self.mask is None:
            self.mask = np.zeros((n_frames, n_joints))
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.poses_rel.shape != (n_frames, n_joints, 3):
            raise ValueError("poses_rel must be (F, N, 3)")
        if self.obs_2d.shape != (n_frames, n_joints, 2):
            raise ValueError(f"obs_2d must be ({n_frames}, {n_joints}, 2), got {self.obs_2d.shape}")
        if self.mask.shape != (n_frames, n_joints):
            raise ValueError(f"mask must be ({n_frames}, {n_joints}), got {self.mask.shape}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("smoothness weights must be non-negative")
        if not self.prior_unit_mm > 0:
            raise ValueError("prior_unit_mm must be positive")

    @property
    def w1(self) -> float:
        """First-order weight per mm^2."""
        return self.lambda1 / self.prior_unit_mm**2

    @property
    def w2(self) -> float:
        return self.lambda2 / self.prior_unit_mm**2

    @property
    def n_frames(self) -> int:
        return self.poses_rel.shape[0]

    @property
    def visible(self) -> np.ndarray:
        return self.mask == 0

    def visible_counts(self) -> np.ndarray:
        return self.visible.sum(axis=1)

    def slice(self, start: int, stop: int) -> "TrajectoryProblem":
        return TrajectoryProblem(
            self.poses_rel[start:stop], self.obs_2d[start:stop], self.cam,
            self.mask[start:stop], self.lambda1, self.lambda2, self.prior_unit_mm,
        )


@dataclass
class TrajectorySolution:
    roots: np.ndarray  # (F, 3) mm
    objective: float
    initial_objective: float
    iterations: int
    converged: bool
    visible_counts: np.ndarray
    zero_data: bool = False
    history: list[float] = field(default_factory=list)


def _data_terms(problem: TrajectoryProblem, roots: np.ndarray):
    """Residuals (V, 2), Jacobians (V, 2, 3) and frame index of visible joints."""
    frames, joints = np.nonzero(problem.visible)
    pts = problem.poses_rel[frames, joints] + roots[frames]
    if pts.size and np.any(pts[:, 2] <= 0):
        raise BehindCameraError("a visible joint lies behind the camera")
    res = project(pts, problem.cam) - problem.obs_2d[frames, joints] if pts.size else np.zeros((0, 2))
    return res, frames, pts


def objective(problem: TrajectoryProblem, roots) -> float:
    roots = np.asarray(roots, dtype=np.float64)
    res, _, _ = _data_terms(problem, roots)
    val = float((res * res).sum())
    d1 = roots[1:] - roots[:-1]
    d2 = roots[:-2] + roots[2:] - 2 * roots[1:-1]
    return val + problem.w1 * float((d1 * d1).sum()) + problem.w2 * float((d2 * d2).sum())


def _half_gradient(problem, roots, res, frames, pts) -> np.ndarray:
    """J^T r (half the objective gradient)."""
    g = np.zeros_like(roots)
    if frames.size:
        jac = project_jacobian(pts, problem.cam)
        np.add.at(g, frames, np.einsum("vij,vi->vj", jac, res))
    d1 = roots[1:] - roots[:-1]
    g[1:] += problem.w1 * d1
    g[:-1] -= problem.w1 * d1
    d2 = roots[:-2] + roots[2:] - 2 * roots[1:-1]
    g[:-2] += problem.w2 * d2
    g[2:] += problem.w2 * d2
    g[1:-1] -= 2 * problem.w2 * d2
    return g


def objective_gradient(problem: TrajectoryProblem, roots) -> np.ndarray:
    roots = np.asarray(roots, dtype=np.float64)
    res, frames, pts = _data_terms(problem, roots)
    return 2.0 * _half_gradient(problem, roots, res, frames, pts)


def _prior_bands(n_frames: int, lambda1: float, lambda2: float) -> list[np.ndarray]:
    """Diagonals 0, 1, 2 of lambda1 D1'D1 + lambda2 D2'D2 (per axis, in frames)."""
    bands = [np.zeros(n_frames), np.zeros(max(n_frames - 1, 0)), np.zeros(max(n_frames - 2, 0))]

    def add_row(weight, entries):
        for a, ca in entries:
            for b, cb in entries:
                if b >= a:
                    bands[b - a][a] += weight * ca * cb

    for t in range(1, n_frames):
        add_row(lambda1, [(t - 1, -1.0), (t, 1.0)])
    for t in range(1, n_frames - 1):
        add_row(lambda2, [(t - 1, 1.0), (t, -2.0), (t + 1, 1.0)])
    return bands


UPPER = 8  # scalar bandwidth of the normal matrix with index 3*t + axis


def _normal_matrix_banded(problem, frames, pts, prior) -> np.ndarray:
    """Upper banded storage of J^T J for scipy.linalg.solveh_banded."""
    n = 3 * problem.n_frames
    ab = np.zeros((UPPER + 1, n))
    blocks = np.zeros((problem.n_frames, 3, 3))
    if frames.size:
        jac = project_jacobian(pts, problem.cam)
        np.add.at(blocks, frames, np.einsum("vij,vik->vjk", jac, jac))
    base = 3 * np.arange(problem.n_frames)
    for k in range(3):
        for m in range(k, 3):
            # A[3t+k, 3t+m] lives at row UPPER + (3t+k) - (3t+m)
            ab[UPPER + k - m, base + m] += blocks[:, k, m]
    for d, band in enumerate(prior):
        if band.size == 0:
            continue
        for k in range(3):
            ab[UPPER - 3 * d, base[d:] + k] += band
    return ab


@dataclass
class SolverOptions:
    max_iterations: int = 200
    step_tol: float = 1e-6  # mm
    rel_decrease_tol: float = 1e-10
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.5
    damping_max: float = 1e16


def init_trajectory(problem: TrajectoryProblem) -> np.ndarray:
    """Closed-form start: depth from 2D/3D spread ratio, X/Y from centroid back-projection.

    Spread is the RMS pairwise distance of visible joints in the image plane
    (X, Y of the relative pose vs. pixel u, v). Frames with fewer than two
    visible joints are linearly interpolated (held at the ends).
    """
    cam = problem.cam
    n_frames = problem.n_frames
    roots = np.full((n_frames, 3), np.nan)
    for t in range(n_frames):
        vis = problem.visible[t]
        if vis.sum() < MIN_VISIBLE_FOR_INIT:
            continue
        rel = problem.poses_rel[t, vis]
        uv = problem.obs_2d[t, vis]
        s3 = _rms_pairwise(rel[:, :2])
        s2 = _rms_pairwise(uv)
        if s2 <= 0 or s3 <= 0:
            continue
        depth = cam.f * s3 / s2
        cen3 = rel.mean(axis=0)
        cen2 = uv.mean(axis=0)
        roots[t, 0] = (cen2[0] - cam.cx) * depth / cam.f - cen3[0]
        roots[t, 1] = (cen2[1] - cam.cy) * depth / cam.f - cen3[1]
        roots[t, 2] = depth - cen3[2]
    ok = ~np.isnan(roots[:, 0])
    if not ok.any():
        raise InsufficientObservationError(
            f"no frame has at least {MIN_VISIBLE_FOR_INIT} visible joints")
    t = np.arange(n_frames)
    for k in range(3):
        roots[~ok, k] = np.interp(t[~ok], t[ok], roots[ok, k])
    return roots


def _rms_pairwise(p: np.ndarray) -> float:
    # mean over ordered pairs of ||p_i - p_j||^2 = 2 * n/(n-1) * mean ||p_i - mean||^2
    n = len(p)
    centred = p - p.mean(axis=0)
    return float(np.sqrt(2.0 * (centred**2).sum() / (n - 1)))


def solve(problem: TrajectoryProblem, roots0=None,
          opts: SolverOptions | None = None) -> TrajectorySolution:
    opts = opts or SolverOptions()
    counts = problem.visible_counts()
    if counts.sum() == 0:
        if problem.lambda1 == 0 and problem.lambda2 == 0:
            raise UnsolvableError("every frame is fully occluded and no smoothness prior is set")
        if roots0 is None:
            raise InsufficientObservationError("no observations to initialise from")
        roots0 = np.array(roots0, dtype=np.float64)
        val = objective(problem, roots0)
        return TrajectorySolution(roots0, val, val, 0, True, counts, zero_data=True, history=[val])
    roots = init_trajectory(problem) if roots0 is None else np.array(roots0, dtype=np.float64)

    prior = _prior_bands(problem.n_frames, problem.w1, problem.w2)
    res, frames, pts = _data_terms(problem, roots)
    obj = objective(problem, roots)
    obj0 = obj
    history = [obj]
    mu = opts.damping_init
    converged = False
    it = 0
    need_linearize = True
    while it < opts.max_iterations:
        it += 1
        if need_linearize:
            g = _half_gradient(problem, roots, res, frames, pts)
            ab = _normal_matrix_banded(problem, frames, pts, prior)
            diag = ab[UPPER].copy()
            floor = 1e-12 * max(diag.max(), 1e-300)
            need_linearize = False
        damped = ab.copy()
        damped[UPPER] += mu * np.maximum(diag, floor)
        try:
            step = solveh_banded(damped, -g.ravel(), lower=False).reshape(-1, 3)
        except np.linalg.LinAlgError:
            mu *= opts.damping_up
            continue
        if np.linalg.norm(step) < opts.step_tol:
            converged = True
            break
        cand = roots + step
        try:
            cand_obj = objective(problem, cand)
        except BehindCameraError:
            cand_obj = np.inf
        if cand_obj < obj:
            rel = (obj - cand_obj) / obj if obj > 0 else 0.0
            roots, obj = cand, cand_obj
            history.append(obj)
            res, frames, pts = _data_terms(problem, roots)
            need_linearize = True
            mu = max(mu * opts.damping_down, 1e-15)
            if rel < opts.rel_decrease_tol or obj == 0.0:
                converged = True
                break
        else:
            mu *= opts.damping_up
            if mu > opts.damping_max:
                converged = True  # no descent direction left at this precision
                break
    return TrajectorySolution(roots, obj, obj0, it, converged, counts, history=history)


def solve_long(problem: TrajectoryProblem, chunk: int = 100, overlap: int = 50,
               opts: SolverOptions | None = None) -> TrajectorySolution:
    """Solve overlapping chunks independently and cross-fade the overlaps."""
    n = problem.n_frames
    if n < 1:
        raise ValueError("empty problem")
    if n <= chunk:
        return solve(problem, opts=opts)
    if not 0 <= overlap < chunk:
        raise ValueError("overlap must be in [0, chunk)")
    stride = chunk - overlap
    starts = list(range(0, n - chunk + 1, stride))
    if starts[-1] + chunk < n:
        starts.append(n - chunk)
    init = init_trajectory(problem)
    acc = np.zeros((n, 3))
    wsum = np.zeros(n)
    iters, conv = 0, True
    for ci, s in enumerate(starts):
        e = s + chunk
        sol = solve(problem.slice(s, e), init[s:e], opts)
        iters += sol.iterations
        conv &= sol.converged
        w = np.ones(chunk)
        if ci > 0:
            ov = starts[ci - 1] + chunk - s
            w[:ov] = np.minimum(w[:ov], (np.arange(ov) + 1) / (ov + 1))
        if ci < len(starts) - 1:
            ov = e - starts[ci + 1]
            w[chunk - ov:] = np.minimum(w[chunk - ov:], (ov - np.arange(ov)) / (ov + 1))
        acc[s:e] += w[:, None] * sol.roots
        wsum[s:e] += w
    roots = acc / wsum[:, None]
    return TrajectorySolution(
        roots, objective(problem, roots), objective(problem, init), iters, conv,
        problem.visible_counts(),
    )
