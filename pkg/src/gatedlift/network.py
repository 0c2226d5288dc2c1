"""Temporal gated-convolution pose-lifting network.

Layout follows the usual dilated temporal-convolution lifter: one input
layer (kernel k, dilation 1), then ``n_skip_blocks`` residual blocks each
made of a dilated k-tap layer and a 1x1 layer, then a 1x1 regression head.
Every layer except the head is a :class:`GatedLayer`.

Two-stream gating: the feature stream X and the mask stream M are convolved
with separate kernels; X^l = relu(BN(X^{l-1} * W_f)) * sigmoid(BN(M^{l-1} * W_g))
and M^l is the gate itself. Only the feature stream has residual links.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RunningStats, Tensor

GATE_MODES = ("two_stream", "single_stream", "plain")
CHECKPOINT_VERSION = 1


@dataclass
class GatedLayerConfig:
    in_ch: int
    out_ch: int
    kernel_size: int = 3
    dilation: int = 1
    gate_mode: str = "two_stream"
    mask_in_ch: int | None = None  # defaults to in_ch
    batch_norm: bool = True
    gate_batch_norm: bool = True

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}")
        if min(self.in_ch, self.out_ch, self.kernel_size, self.dilation) < 1:
            raise ValueError("layer dimensions must be positive")
        if self.mask_in_ch is None:
            self.mask_in_ch = self.in_ch


@dataclass
class NetworkConfig:
    n_joints: int = 17
    channels: int = 128
    n_skip_blocks: int = 4
    kernel_size: int = 3
    dilations: list[int] | None = None
    gate_mode: str = "two_stream"
    gate_batch_norm: bool = True
    gate_bias_init: float = 1.0
    dropout: float = 0.0
    output_scale_mm: float = 1000.0
    head_init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}")
        if self.dilations is None:
            self.dilations = [self.kernel_size**i for i in range(self.n_skip_blocks + 1)]
        self.dilations = [int(d) for d in self.dilations]
        if len(self.dilations) != self.n_skip_blocks + 1:
            raise ValueError("need one dilation for the input layer plus one per skip block")

    @property
    def receptive_field(self) -> int:
        return 1 + sum((self.kernel_size - 1) * d for d in self.dilations)


def config_for_window(window: int, kernel_size: int = 3, **kw) -> NetworkConfig:
    """Pick the geometric dilation ladder whose receptive field equals ``window``."""
    for n_blocks in range(0, 12):
        cfg = NetworkConfig(kernel_size=kernel_size, n_skip_blocks=n_blocks, **kw)
        if cfg.receptive_field == window:
            return cfg
        if cfg.receptive_field > window:
            break
    raise ValueError(f"no kernel-{kernel_size} dilation ladder has receptive field {window}")


def _kaiming(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[1] * shape[2]
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class GatedLayer:
    """One temporal convolution layer with optional soft gating."""

    def __init__(self, cfg: GatedLayerConfig, name: str, rng: np.random.Generator,
                 gate_bias_init: float = 1.0):
        self.cfg = cfg
        k = cfg.kernel_size
        self.params: list[Parameter] = []
        self.W_f = self._param(f"{name}.W_f", _kaiming(rng, (cfg.out_ch, cfg.in_ch, k)))
        self.b_f = None if cfg.batch_norm else self._param(f"{name}.b_f", np.zeros(cfg.out_ch))
        if cfg.batch_norm:
            self.bn_f = (
                self._param(f"{name}.bn_f.gamma", np.ones(cfg.out_ch)),
                self._param(f"{name}.bn_f.beta", np.zeros(cfg.out_ch)),
                RunningStats.fresh(cfg.out_ch),
            )
        self.W_g = self.b_g = None
        if cfg.gate_mode != "plain":
            gate_in = cfg.mask_in_ch if cfg.gate_mode == "two_stream" else cfg.in_ch
            self.W_g = self._param(f"{name}.W_g", _kaiming(rng, (cfg.out_ch, gate_in, k)))
            if cfg.gate_batch_norm:
                self.bn_g = (
                    self._param(f"{name}.bn_g.gamma", np.ones(cfg.out_ch)),
                    self._param(f"{name}.bn_g.beta", np.full(cfg.out_ch, gate_bias_init)),
                    RunningStats.fresh(cfg.out_ch),
                )
            else:
                self.b_g = self._param(f"{name}.b_g", np.full(cfg.out_ch, gate_bias_init))

    def _param(self, name, value) -> Parameter:
        p = Parameter(name, value)
        self.params.append(p)
        return p

    @property
    def gate_bias(self) -> Parameter:
        """The additive term in front of the gate sigmoid."""
        return self.bn_g[1] if self.cfg.gate_batch_norm else self.b_g

    def running_stats(self) -> dict[str, RunningStats]:
        out = {}
        if self.cfg.batch_norm:
            out["bn_f"] = self.bn_f[2]
        if self.W_g is not None and self.cfg.gate_batch_norm:
            out["bn_g"] = self.bn_g[2]
        return out

    def forward(self, x: Tensor, m: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if cfg.gate_mode == "two_stream" and (x.shape[0] != m.shape[0] or x.shape[2] != m.shape[2]):
            raise ad.ShapeError(f"feature {x.shape} and mask {m.shape} streams disagree")
        y = ad.conv1d_dilated(x, self.W_f, self.b_f, cfg.dilation)
        if cfg.batch_norm:
            y = ad.batch_norm(y, *self.bn_f, training=training)
        y = ad.relu(y)
        if cfg.gate_mode == "plain":
            return y, m
        src = m if cfg.gate_mode == "two_stream" else x
        g = ad.conv1d_dilated(src, self.W_g, self.b_g, cfg.dilation)
        if cfg.gate_batch_norm:
            g = ad.batch_norm(g, *self.bn_g, training=training)
        gate = ad.sigmoid(g)
        return ad.hadamard(y, gate), gate


def gated_conv_forward(x_prev: Tensor, m_prev: Tensor, layer: GatedLayer,
                       training: bool = False) -> tuple[Tensor, Tensor]:
    return layer.forward(x_prev, m_prev, training)


class PoseLiftNet:
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._drop_rng = np.random.default_rng([cfg.seed, 1])
        k, c, n_in = cfg.kernel_size, cfg.channels, 2 * cfg.n_joints
        mk = dict(gate_mode=cfg.gate_mode, gate_batch_norm=cfg.gate_batch_norm)
        gb = cfg.gate_bias_init
        self.input_layer = GatedLayer(
            GatedLayerConfig(n_in, c, k, cfg.dilations[0], **mk), "in", rng, gb)
        self.blocks: list[tuple[GatedLayer, GatedLayer]] = []
        for b, d in enumerate(cfg.dilations[1:]):
            self.blocks.append((
                GatedLayer(GatedLayerConfig(c, c, k, d, **mk), f"block{b}.dil", rng, gb),
                GatedLayer(GatedLayerConfig(c, c, 1, 1, **mk), f"block{b}.pw", rng, gb),
            ))
        self.W_out = Parameter("head.W", cfg.head_init_scale * _kaiming(rng, (3 * cfg.n_joints, c, 1)))
        self.b_out = Parameter("head.b", np.zeros(3 * cfg.n_joints))
        root_zero = np.ones(3 * cfg.n_joints)
        root_zero[:3] = 0.0
        self._head_scale = root_zero * cfg.output_scale_mm

    @property
    def layers(self) -> list[GatedLayer]:
        out = [self.input_layer]
        for a, b in self.blocks:
            out += [a, b]
        return out

    def parameters(self) -> list[Parameter]:
        ps = [p for layer in self.layers for p in layer.params]
        return ps + [self.W_out, self.b_out]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def running_stats(self) -> dict[str, RunningStats]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.running_stats().items():
                out[f"{i}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, mask, training: bool = False) -> Tensor:
        """(batch, 2N, T) 2D windows + masks -> (batch, 3N) centre-frame pose in mm."""
        ad.new_tape()
        x = x if isinstance(x, Tensor) else Tensor(x)
        m = mask if isinstance(mask, Tensor) else Tensor(mask)
        rf = self.cfg.receptive_field
        if x.data.ndim != 3 or x.shape[1] != 2 * self.cfg.n_joints:
            raise ad.ShapeError(f"expected (batch, {2 * self.cfg.n_joints}, T), got {x.shape}")
        if x.shape[2] != rf:
            raise ad.WindowError(f"window length {x.shape[2]} != receptive field {rf}")
        p = self.cfg.dropout
        h, m = self.input_layer.forward(x, m, training)
        h = ad.dropout(h, p, self._drop_rng, training)
        for dil, pw in self.blocks:
            span = (dil.cfg.kernel_size - 1) * dil.cfg.dilation
            res = ad.crop_time(h, span // 2, h.shape[2] - span)
            h, m = dil.forward(h, m, training)
            h = ad.dropout(h, p, self._drop_rng, training)
            h, m = pw.forward(h, m, training)
            h = ad.add(res, ad.dropout(h, p, self._drop_rng, training))
        out = ad.conv1d_dilated(h, self.W_out, self.b_out)
        return ad.scale(ad.flatten_time1(out), self._head_scale)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def network_forward(x_seq, mask_seq, net: PoseLiftNet, pad: bool = False) -> np.ndarray:
    """Centre-frame root-relative pose for one (2N, T) window (eval mode).

    With ``pad=True`` a window shorter than the receptive field is centred
    and edge-replicated up to it.
    """
    x = np.asarray(x_seq, dtype=np.float64)
    m = np.asarray(mask_seq, dtype=np.float64)
    rf = net.cfg.receptive_field
    if pad and x.shape[-1] != rf:
        x, m = _edge_pad_window(x, rf), _edge_pad_window(m, rf)
    return net.forward(x[None], m[None], training=False).data[0]


def _edge_pad_window(a: np.ndarray, rf: int) -> np.ndarray:
    t = a.shape[-1]
    if t > rf:
        raise ad.WindowError(f"window {t} longer than receptive field {rf}")
    left = (rf - t) // 2
    return np.pad(a, ((0, 0), (left, rf - t - left)), mode="edge")


def predict_sequence(seq_2d, mask, net: PoseLiftNet, batch_size: int = 512) -> np.ndarray:
    """Per-frame poses (F, 3N) for a (2N, F) clip, edge-padding the ends."""
    x = np.asarray(seq_2d, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    n_frames = x.shape[1]
    half = (net.cfg.receptive_field - 1) // 2
    xp = np.pad(x, ((0, 0), (half, half)), mode="edge")
    mp = np.pad(m, ((0, 0), (half, half)), mode="edge")
    rf = net.cfg.receptive_field
    out = []
    for s in range(0, n_frames, batch_size):
        idx = range(s, min(s + batch_size, n_frames))
        xb = np.stack([xp[:, t : t + rf] for t in idx])
        mb = np.stack([mp[:, t : t + rf] for t in idx])
        out.append(net.forward(xb, mb, training=False).data)
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 1024
    lr: float = 0.001
    lr_decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    recalibrate_bn: bool = True

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay**epoch


@dataclass
class AMSGradState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    v_max: dict[str, np.ndarray] = field(default_factory=dict)


def amsgrad_step(params, state: AMSGradState, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place AMSGrad update with bias-corrected moments."""
    state.step += 1
    t = state.step
    for p in params:
        g = p.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
            state.v_max[p.name] = np.zeros_like(p.data)
        m = state.m[p.name] = beta1 * state.m[p.name] + (1 - beta1) * g
        v = state.v[p.name] = beta2 * state.v[p.name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        v_max = state.v_max[p.name] = np.maximum(state.v_max[p.name], v_hat)
        if lr != 0.0:
            p.data -= lr * m_hat / (np.sqrt(v_max) + eps)


# --------------------------------------------------------------------------
# checkpoints


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, net: PoseLiftNet, opt_state: AMSGradState | None = None,
                    extra: dict | None = None) -> None:
    """Versioned zip of .npy arrays plus a JSON header; byte-for-byte deterministic."""
    header = {
        "format": "gatedlift.checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.cfg),
        "opt_step": opt_state.step if opt_state else 0,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "header.json", json.dumps(header, sort_keys=True).encode())
        for name, p in net.named_parameters().items():
            _zip_write(zf, f"param/{name}.npy", _npy_bytes(p.data))
        for name, rs in net.running_stats().items():
            _zip_write(zf, f"stats/{name}.mean.npy", _npy_bytes(rs.mean))
            _zip_write(zf, f"stats/{name}.var.npy", _npy_bytes(rs.var))
        if opt_state is not None:
            for slot in ("m", "v", "v_max"):
                for name, arr in getattr(opt_state, slot).items():
                    _zip_write(zf, f"opt/{slot}/{name}.npy", _npy_bytes(arr))


def load_checkpoint(path) -> tuple[PoseLiftNet, AMSGradState, dict]:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != "gatedlift.checkpoint":
            raise ValueError(f"{path}: not a gatedlift checkpoint")
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")

        def arr(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        net = PoseLiftNet(NetworkConfig(**header["config"]))
        for name, p in net.named_parameters().items():
            p.data = arr(f"param/{name}.npy")
            p.zero_grad()
        for name, rs in net.running_stats().items():
            rs.mean = arr(f"stats/{name}.mean.npy")
            rs.var = arr(f"stats/{name}.var.npy")
        state = AMSGradState(step=header["opt_step"])
        names = set(zf.namelist())
        for slot in ("m", "v", "v_max"):
            for name in net.named_parameters():
                key = f"opt/{slot}/{name}.npy"
                if key in names:
                    getattr(state, slot)[name] = arr(key)
    return net, state, header["extra"]


def save_loss_csv(path, rows: list[dict]) -> None:
    lines = ["epoch,lr,train_loss,val_mpjpe"]
    for r in rows:
        val = "" if r.get("val_mpjpe") is None else repr(r["val_mpjpe"])
        lines.append(f"{r['epoch']},{r['lr']!r},{r['train_loss']!r},{val}")
    Path(path).write_text("\n".join(lines) + "\n")
