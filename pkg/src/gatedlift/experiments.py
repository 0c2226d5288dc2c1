"""Synthetic experiments shared by the acceptance suite and ``scripts/``.

``run_overfit`` checks network capacity on a handful of sequences.
``run_occlusion_trend`` trains gated and ungated lifters identically and
scores them on held-out clips at several occlusion ratios.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SynthConfig, apply_fill, make_training_windows, synth_scene
from .masks import calibrate_theta, sample_masks
from .network import NetworkConfig, PoseLiftNet, TrainConfig
from .training import MaskPolicy, evaluate_mpjpe, train


def moving_average(x, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < width:
        return np.zeros(0)
    return np.convolve(x, np.ones(width) / width, mode="valid")


def _scene_windows(n_people: int, n_frames: int, seed: int, window: int):
    sc = synth_scene(SynthConfig(n_people=n_people, n_frames=n_frames, seed=seed))
    seqs = [(sc.joints_2d[p], sc.poses_rel[p]) for p in range(n_people)]
    return make_training_windows(seqs, window, sc.camera)


# --------------------------------------------------------------------------
# capacity


@dataclass
class OverfitConfig:
    n_sequences: int = 8
    n_frames: int = 80
    channels: int = 64
    n_skip_blocks: int = 2
    epochs: int = 500
    batch_size: int = 1024
    lr: float = 0.005
    lr_decay: float = 1.0
    scene_seed: int = 11
    seed: int = 0


@dataclass
class OverfitResult:
    final_mpjpe: float
    history: list[float]
    seconds: float
    n_windows: int

    def ma_increases(self, width: int = 20) -> np.ndarray:
        return np.diff(moving_average(self.history, width))


def run_overfit(cfg: OverfitConfig = OverfitConfig()) -> OverfitResult:
    net_cfg = NetworkConfig(channels=cfg.channels, n_skip_blocks=cfg.n_skip_blocks, seed=cfg.seed)
    ws = _scene_windows(cfg.n_sequences, cfg.n_frames, cfg.scene_seed, net_cfg.receptive_field)
    net = PoseLiftNet(net_cfg)
    t0 = time.perf_counter()
    res = train(ws, net, TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                                     lr_decay=cfg.lr_decay, seed=cfg.seed))
    seconds = time.perf_counter() - t0
    final = evaluate_mpjpe(net, ws.inputs, ws.masks, ws.targets)
    return OverfitResult(final, [r["train_loss"] for r in res.history], seconds, len(ws))


# --------------------------------------------------------------------------
# occlusion robustness


@dataclass
class TrendConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[str, ...] = ("two_stream", "plain")
    test_ratios: tuple[float, ...] = (0.0, 0.25, 0.5)
    train_ratios: tuple[float, ...] = (0.0, 0.25, 0.5)
    kernel: int = 9
    fill: str = "zero"
    # many short clips: pose and viewpoint diversity matters far more than
    # window count for held-out error
    train_people: int = 3000
    test_people: int = 300
    n_frames: int = 28
    channels: int = 48
    n_skip_blocks: int = 2
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.003
    lr_decay: float = 0.95


@dataclass
class TrendResult:
    # errors[mode][seed] -> list aligned with test_ratios
    errors: dict[str, dict[int, list[float]]] = field(default_factory=dict)
    seconds: float = 0.0
    test_ratios: tuple[float, ...] = ()

    def mean(self, mode: str) -> np.ndarray:
        return np.mean([v for v in self.errors[mode].values()], axis=0)

    def table(self) -> str:
        head = "model         seed " + "".join(f"{int(100 * r):>8d}%" for r in self.test_ratios)
        lines = [head]
        for mode, per_seed in self.errors.items():
            for seed, errs in per_seed.items():
                lines.append(f"{mode:<13} {seed:>4} " + "".join(f"{e:9.1f}" for e in errs))
            lines.append(f"{mode:<13} mean " + "".join(f"{e:9.1f}" for e in self.mean(mode)))
        return "\n".join(lines)


def _test_masks(n: int, n_joints: int, frames: int, ratio: float, kernel: int, seed: int):
    rng = np.random.default_rng([seed, int(round(ratio * 1000))])
    theta = calibrate_theta(ratio, kernel)
    return sample_masks(rng, theta, kernel, n_joints, frames, batch=n)


def run_occlusion_trend(cfg: TrendConfig = TrendConfig(), log=None) -> TrendResult:
    out = TrendResult(test_ratios=tuple(cfg.test_ratios))
    t0 = time.perf_counter()
    rf = NetworkConfig(n_skip_blocks=cfg.n_skip_blocks).receptive_field
    policy = MaskPolicy(tuple(cfg.train_ratios), cfg.kernel, cfg.fill)
    for seed in cfg.seeds:
        train_ws = _scene_windows(cfg.train_people, cfg.n_frames, 1000 + seed, rf)
        test_ws = _scene_windows(cfg.test_people, cfg.n_frames, 2000 + seed, rf)
        n_joints = test_ws.inputs.shape[1] // 2
        tests = []
        for ratio in cfg.test_ratios:
            m = _test_masks(len(test_ws), n_joints, rf, ratio, cfg.kernel, seed)
            tests.append((apply_fill(test_ws.clean_inputs, m, cfg.fill), m))
        for mode in cfg.modes:
            net = PoseLiftNet(NetworkConfig(channels=cfg.channels, n_skip_blocks=cfg.n_skip_blocks,
                                            gate_mode=mode, seed=seed))
            train(train_ws, net, TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                             lr=cfg.lr, lr_decay=cfg.lr_decay, seed=seed), policy)
            errs = [evaluate_mpjpe(net, x, m, test_ws.targets) for x, m in tests]
            out.errors.setdefault(mode, {})[seed] = errs
            if log:
                log(f"seed {seed} {mode}: " + " ".join(f"{e:.1f}" for e in errs))
    out.seconds = time.perf_counter() - t0
    return out
