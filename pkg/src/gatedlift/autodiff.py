"""Small define-by-run reverse-mode engine over numpy arrays.

Only the operations the pose-lifting network needs are provided. Every
forward op appends one node to the active :class:`Tape`; :func:`backward`
walks that tape in reverse exactly once.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class WindowError(ValueError):
    """Temporal extent too short for a valid convolution."""


class EmptyTapeError(RuntimeError):
    """backward() called with nothing recorded."""


class Tensor:
    """An array plus the bookkeeping needed to route gradients to it."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"


class Parameter(Tensor):
    """Trainable leaf. Gradients accumulate until :meth:`zero_grad`."""

    def __init__(self, name: str, value, requires_grad: bool = True):
        super().__init__(np.array(value, dtype=np.float64), requires_grad, name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
        out.tape = self
        out.requires_grad = any(t.requires_grad for t in inputs)
        if out.requires_grad:
            self.nodes.append(_Node(out, tuple(inputs), backward_fn))
        return out

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def new_tape() -> Tape:
    """Start a fresh tape; called at the top of every forward pass.

    The previous tape's nodes are dropped (tensors point back at their tape,
    so leaving them would keep every activation alive until a GC cycle).
    """
    old = getattr(_local, "tape", None)
    if old is not None:
        old.nodes.clear()
    _local.tape = Tape()
    return _local.tape


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    return current_tape().record(Tensor(out_data), inputs, backward_fn)


# --------------------------------------------------------------------------
# ops


def _check3(x: Tensor, what: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{what} must be (batch, channel, time), got {x.shape}")


def conv1d_dilated(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    dilation: int = 1,
    padding: str = "valid",
) -> Tensor:
    """Dilated temporal convolution (cross-correlation, as in deep-learning libs).

    ``kernel`` is (out_ch, in_ch, k). ``padding='replicate'`` pads both ends
    by repeating boundary frames so output length equals input length; ``k``
    must then make ``(k-1)*dilation`` even.
    """
    _check3(x, "input")
    w = kernel.data
    if w.ndim != 3 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel {w.shape} does not match input channels {x.shape[1]}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"bias {bias.shape} does not match out_ch {w.shape[0]}")
    if dilation < 1:
        raise ValueError("dilation must be positive")
    out_ch, in_ch, k = w.shape
    span = (k - 1) * dilation
    xd = x.data
    t_in = xd.shape[2]
    if padding == "replicate":
        if span % 2:
            raise ValueError("replicate padding needs an even (k-1)*dilation")
        pad = span // 2
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad)), mode="edge")
    elif padding == "valid":
        pad = 0
        if t_in < span + 1:
            raise WindowError(f"time {t_in} shorter than receptive span {span + 1}")
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    batch = xd.shape[0]
    t_out = xd.shape[2] - span
    # time-major im2col: cols[b, s, j*in_ch + c] = x[b, c, s + j*dilation]
    xt = xd.transpose(0, 2, 1)
    cols = np.concatenate([xt[:, j * dilation : j * dilation + t_out] for j in range(k)], axis=2)
    cols = cols.reshape(batch * t_out, k * in_ch)
    wmat = w.transpose(0, 2, 1).reshape(out_ch, k * in_ch)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(batch, t_out, out_ch).transpose(0, 2, 1)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 1).reshape(batch * t_out, out_ch)
        gw = (g2.T @ cols).reshape(out_ch, k, in_ch).transpose(0, 2, 1)
        gb = g2.sum(axis=0) if bias is not None else None
        gcols = (g2 @ wmat).reshape(batch, t_out, k, in_ch)
        gxt = np.zeros((batch, t_out + span, in_ch))
        for j in range(k):
            gxt[:, j * dilation : j * dilation + t_out] += gcols[:, :, j]
        gx = gxt.transpose(0, 2, 1)
        if pad:
            core = gx[:, :, pad:-pad].copy()
            core[:, :, 0] += gx[:, :, :pad].sum(axis=2)
            core[:, :, -1] += gx[:, :, -pad:].sum(axis=2)
            gx = core
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, inputs, backward_fn)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    # batch-size-weighted sums of batch mean and batch variance, filled by
    # recalibration passes (None = momentum updates)
    _acc: list | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))

    def start_accumulating(self) -> None:
        self._acc = [0, np.zeros_like(self.mean), np.zeros_like(self.mean)]

    def finish_accumulating(self) -> None:
        n, s_mu, s_var = self._acc
        self._acc = None
        if n == 0:
            return
        # Average of within-batch (biased) statistics, i.e. what training
        # normalized with. Population variance would add the between-batch
        # spread of means, which the net never saw. One batch reproduces
        # train-mode normalization exactly.
        self.mean = s_mu / n
        self.var = s_var / n


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalization over (batch, time).

    In training mode batch statistics are used and ``running`` is updated in
    place (unbiased variance, as the usual deep-learning convention).
    """
    _check3(x, "input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[0] * x.shape[2]
    if n == 0:
        raise ValueError("batch_norm on an empty batch")
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        if running._acc is not None:
            running._acc[0] += n
            running._acc[1] += n * mu
            running._acc[2] += n * var
        else:
            unbiased = var * n / (n - 1) if n > 1 else var
            running.mean = (1 - momentum) * running.mean + momentum * mu
            running.var = (1 - momentum) * running.var + momentum * unbiased
    else:
        mu, var = running.mean, running.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None]) * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward_fn(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * gamma.data[None, :, None]
        if training:
            gx = (
                inv[None, :, None]
                / n
                * (
                    n * gxhat
                    - gxhat.sum(axis=(0, 2))[None, :, None]
                    - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
                )
            )
        else:
            gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _record(out, (x, gamma, beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form avoids exp overflow for large |x|
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def crop_time(x: Tensor, start: int, length: int) -> Tensor:
    """Slice ``[start, start+length)`` along the time axis."""
    _check3(x, "input")
    if start < 0 or start + length > x.shape[2]:
        raise WindowError(f"crop [{start}, {start + length}) outside time {x.shape[2]}")
    t = x.shape[2]

    def backward_fn(g):
        gx = np.zeros((g.shape[0], g.shape[1], t))
        gx[:, :, start : start + length] = g
        return (gx,)

    return _record(x.data[:, :, start : start + length].copy(), (x,), backward_fn)


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant (scalar or broadcastable array)."""
    f = np.asarray(factor, dtype=np.float64)
    return _record(x.data * f, (x,), lambda g: (g * f,))


def flatten_time1(x: Tensor) -> Tensor:
    """(batch, channel, 1) -> (batch, channel)."""
    _check3(x, "input")
    if x.shape[2] != 1:
        raise ShapeError(f"expected a single time step, got {x.shape[2]}")
    shp = x.shape
    return _record(x.data[:, :, 0].copy(), (x,), lambda g: (g.reshape(shp),))


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


def mse_loss(pred: Tensor, gt) -> Tensor:
    """Mean over the batch of (1/N_jt) * sum_i ||pred_i - gt_i||^2.

    ``pred`` and ``gt`` are (batch, 3*N_jt); coordinates of one joint are
    contiguous.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.data.ndim != 2 or pred.shape[1] % 3:
        raise ShapeError("pose vectors must be (batch, 3*N_jt)")
    batch, dim = pred.shape
    n_joints = dim // 3
    diff = pred.data - gt
    loss = float((diff**2).sum() / (n_joints * batch))
    return _record(
        np.array(loss), (pred,), lambda g: (g * 2.0 * diff / (n_joints * batch),)
    )


# --------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    tape = loss.tape
    if tape is None or len(tape) == 0:
        raise EmptyTapeError("nothing recorded: run a forward pass first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tape is tape:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
            elif isinstance(inp, Parameter):
                inp.grad = inp.grad + gi
            else:
                inp.grad = gi if inp.grad is None else inp.grad + gi


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    offending: list[str]
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.offending


def numerical_gradient(loss_fn: Callable[[], float], param: Tensor, idx, h: float = 1e-5) -> float:
    """Central difference of ``loss_fn`` w.r.t. one entry of ``param``."""
    old = param.data[idx]
    param.data[idx] = old + h
    fp = loss_fn()
    param.data[idx] = old - h
    fm = loss_fn()
    param.data[idx] = old
    return (fp - fm) / (2 * h)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int = 200,
    seed: int = 0,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` must run a full forward pass and return the scalar loss
    tensor. Layers with more than ``max_entries`` entries are checked on a
    seeded random subsample of that size. ``analytic`` overrides the
    backward-pass gradients (used for fault injection).

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor`` is 1e-6 of the largest numerical gradient magnitude seen, so
    that entries that are zero up to rounding do not dominate.
    """
    if analytic is None:
        for p in params:
            p.zero_grad()
        backward(loss_fn())
        analytic = {p.name: p.grad.copy() for p in params}
    rng = np.random.default_rng(seed)

    def scalar_loss() -> float:
        return float(loss_fn().data)

    pairs: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for p in params:
        flat = np.arange(p.data.size)
        if flat.size > max_entries:
            flat = np.sort(rng.choice(flat, size=max_entries, replace=False))
        a = np.empty(flat.size)
        n = np.empty(flat.size)
        for k, f in enumerate(flat):
            idx = np.unravel_index(f, p.data.shape)
            a[k] = analytic[p.name][idx]
            n[k] = numerical_gradient(scalar_loss, p, idx, h)
        pairs[p.name] = (a, n)

    scale_ = max((np.abs(n).max() for _, n in pairs.values() if n.size), default=0.0)
    floor = max(1e-6 * scale_, 1e-12)
    per_param = {}
    for name, (a, n) in pairs.items():
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        per_param[name] = float((np.abs(a - n) / denom).max()) if a.size else 0.0
    offending = [k for k, v in per_param.items() if v > tolerance]
    return GradCheckReport(max(per_param.values(), default=0.0), offending, per_param, tolerance)
