"""Training loop: MSE loss on root-relative joints, AMSGrad, per-epoch exponential lr decay."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import WindowSet, apply_fill
from .masks import calibrate_theta, sample_masks
from .metrics import mpjpe
from .network import (AMSGradState, PoseLiftNet, TrainConfig, amsgrad_step, save_checkpoint,
                      save_loss_csv)

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class MaskPolicy:
    """How occlusion masks are drawn for each training sample.

    ``ratios`` lists target occlusion ratios; each sample draws one uniformly
    and a fresh mask with the calibrated threshold. ``ratios=()`` keeps the
    masks stored in the window set.
    """
    ratios: tuple[float, ...] = ()
    kernel: int = 9
    fill: str = "zero"
    thetas: tuple[float, ...] = field(init=False, default=())

    def __post_init__(self):
        self.thetas = tuple(calibrate_theta(r, self.kernel) for r in self.ratios)

    def apply(self, ws: WindowSet, idx: np.ndarray, rng: np.random.Generator):
        if not self.ratios:
            return ws.inputs[idx], ws.masks[idx]
        n_rows, T = ws.clean_inputs.shape[1:]
        theta = np.asarray(self.thetas)[rng.integers(len(self.thetas), size=len(idx))]
        masks = sample_masks(rng, theta, self.kernel, n_rows // 2, T, batch=len(idx))
        return apply_fill(ws.clean_inputs[idx], masks, self.fill), masks


@dataclass
class TrainResult:
    net: PoseLiftNet
    history: list[dict]
    opt_state: AMSGradState


def evaluate_mpjpe(net: PoseLiftNet, inputs, masks, targets, batch_size: int = 1024) -> float:
    """Mean per-joint error (mm) of root-relative predictions, eval mode."""
    preds = predict_windows(net, inputs, masks, batch_size)
    n = targets.shape[1] // 3
    return float(mpjpe(preds.reshape(-1, n, 3), targets.reshape(-1, n, 3)).mean())


def predict_windows(net, inputs, masks, batch_size: int = 1024) -> np.ndarray:
    out = [net.forward(inputs[s : s + batch_size], masks[s : s + batch_size]).data
           for s in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 3 * net.cfg.n_joints))


def recalibrate_bn(net: PoseLiftNet, ws: WindowSet, policy: MaskPolicy, rng,
                   batch_size: int = 1024) -> None:
    """Replace running BN statistics with averaged batch statistics over ``ws``.

    Momentum averages lag the weights and, for channels that are constant in
    training (e.g. the gate stream with no occlusion), decay toward the true
    near-zero variance only geometrically; eval-mode outputs then drift far
    from train-mode outputs.
    """
    stats = net.running_stats().values()
    for rs in stats:
        rs.start_accumulating()
    # shuffled like training batches so each batch's statistics are representative
    order = rng.permutation(len(ws))
    for s in range(0, len(ws), batch_size):
        idx = order[s : s + batch_size]
        x, m = policy.apply(ws, idx, rng)
        net.forward(x, m, training=True)
    for rs in stats:
        rs.finish_accumulating()


def train(ws: WindowSet, net: PoseLiftNet, cfg: TrainConfig, policy: MaskPolicy | None = None,
          val: tuple | None = None, checkpoint_dir=None) -> TrainResult:
    """Minibatch training. Sample order and mask draws are fixed by ``cfg.seed``.

    ``val`` is an optional (inputs, masks, targets) triple scored each epoch.
    With ``checkpoint_dir`` set, ``checkpoint.npz`` and ``loss.csv`` are
    rewritten after every epoch. When ``cfg.recalibrate_bn`` is set, BN
    statistics are recomputed over the training set before every
    evaluation/checkpoint.
    """
    if len(ws) == 0:
        raise ValueError("empty training set")
    policy = policy or MaskPolicy()
    rng = np.random.default_rng(cfg.seed)
    state = AMSGradState()
    params = net.parameters()
    history = []
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(ws))
        total = 0.0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            x, m = policy.apply(ws, idx, rng)
            net.zero_grad()
            loss = ad.mse_loss(net.forward(x, m, training=True), ws.targets[idx])
            val_loss = float(loss.data)
            if not np.isfinite(val_loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            ad.backward(loss)
            amsgrad_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += val_loss * len(idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / len(ws), "val_mpjpe": None}
        last = epoch == cfg.epochs - 1
        if cfg.recalibrate_bn and (last or val is not None or ckdir):
            recalibrate_bn(net, ws, policy, np.random.default_rng([cfg.seed, epoch]), cfg.batch_size)
        if val is not None:
            row["val_mpjpe"] = evaluate_mpjpe(net, *val)
        history.append(row)
        log.debug("epoch %d lr %.3g loss %.4g", epoch, lr, row["train_loss"])
        if ckdir:
            save_checkpoint(ckdir / "checkpoint.npz", net, state, {"epoch": epoch})
            save_loss_csv(ckdir / "loss.csv", history)
    return TrainResult(net, history, state)
