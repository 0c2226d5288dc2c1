"""Sequence files, synthetic articulated scenes, and training windows.

Sequence file (JSON lines, UTF-8). First line is a header::

    {"format": "gatedlift.sequence", "version": 1, "n_joints": 17, "joint_order": [...]}

Then one record per line, either a frame record::

    {"type": "frame", "person": 0, "frame": 12, "action": "walk",
     "joints_2d": [[u, v, conf], ...],            # N rows, pixels
     "joints_3d_rel": [[X, Y, Z], ...],           # optional, mm, root at 0
     "root_3d": [X, Y, Z]}                        # optional, mm, camera frame

or a mask record carrying one person's occlusion mask as run lengths::

    {"type": "mask", "person": 0, "start_frame": 0, "frames": 200,
     "rows": [[runs...], ...]}                    # N rows, 0-run first

Floats are written with Python's shortest round-trip repr, so a save/load
cycle is exact.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, project
from .masks import (MaskGenConfig, expand_joint_rows, interpolate_missing, joint_rows,
                    rle_decode, rle_encode, sample_masks)

log = logging.getLogger(__name__)

SEQUENCE_FORMAT = "gatedlift.sequence"
SEQUENCE_VERSION = 1

# Human3.6M 17-joint order
JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
N_JOINTS = len(JOINT_NAMES)

# rest-pose bone directions in the body frame (x right, y down, z forward)
_REST_DIRS = np.array([
    [0, 0, 0],
    [-1, 0, 0], [0, 1, 0], [0, 1, 0],
    [1, 0, 0], [0, 1, 0], [0, 1, 0],
    [0, -1, 0], [0, -1, 0], [0, -1, 0.15], [0, -1, 0],
    [1, -0.1, 0], [1, 0.8, 0], [0.3, 1, 0],
    [-1, -0.1, 0], [-1, 0.8, 0], [-0.3, 1, 0],
], dtype=np.float64)

DEFAULT_LIMBS_MM = (0, 130, 440, 430, 130, 440, 430, 230, 250, 110, 120, 150, 280, 250, 150, 280, 250)


class SequenceFormatError(ValueError):
    pass


class FrameOrderError(SequenceFormatError):
    pass


class GenerationError(ValueError):
    pass


@dataclass
class SequenceRecord:
    person_id: int
    frame_index: int
    joints_2d: np.ndarray  # (N, 3): u, v, confidence
    joints_3d_rel: np.ndarray | None = None
    root_3d: np.ndarray | None = None
    action: str | None = None


def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def save_sequence(path, records, masks: dict[int, np.ndarray] | None = None,
                  mask_start: dict[int, int] | None = None) -> None:
    """Write records (and optional per-person (2N, F) masks) to ``path``."""
    n_joints = records[0].joints_2d.shape[0] if records else N_JOINTS
    lines = [json.dumps({
        "format": SEQUENCE_FORMAT, "version": SEQUENCE_VERSION,
        "n_joints": n_joints, "joint_order": list(JOINT_NAMES) if n_joints == N_JOINTS else None,
    })]
    for r in records:
        doc = {"type": "frame", "person": int(r.person_id), "frame": int(r.frame_index)}
        if r.action is not None:
            doc["action"] = r.action
        doc["joints_2d"] = _floats(r.joints_2d)
        if r.joints_3d_rel is not None:
            doc["joints_3d_rel"] = _floats(r.joints_3d_rel)
        if r.root_3d is not None:
            doc["root_3d"] = _floats(r.root_3d)
        lines.append(json.dumps(doc))
    for pid, m in sorted((masks or {}).items()):
        jm = joint_rows(np.asarray(m))
        lines.append(json.dumps({
            "type": "mask", "person": int(pid),
            "start_frame": int((mask_start or {}).get(pid, 0)), "frames": int(jm.shape[1]),
            "rows": [rle_encode(row) for row in jm],
        }))
    Path(path).write_text("\n".join(lines) + "\n")


def _read_lines(path):
    text = Path(path).read_text()
    if not text.strip():
        return None, []
    lines = text.splitlines()
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SequenceFormatError(f"{path}:1: bad header: {e}") from None
    if header.get("format") != SEQUENCE_FORMAT:
        raise SequenceFormatError(f"{path}:1: not a {SEQUENCE_FORMAT} file")
    if header.get("version") != SEQUENCE_VERSION:
        raise SequenceFormatError(f"{path}:1: unsupported version {header.get('version')}")
    out = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            out.append((no, json.loads(line)))
        except json.JSONDecodeError as e:
            raise SequenceFormatError(f"{path}:{no}: malformed record: {e}") from None
    return header, out


def load_sequence(path) -> list[SequenceRecord]:
    header, docs = _read_lines(path)
    if header is None:
        return []
    n_joints = header["n_joints"]
    records, last = [], {}
    for no, doc in docs:
        kind = doc.get("type", "frame")
        if kind == "mask":
            continue
        if kind != "frame":
            raise SequenceFormatError(f"{path}:{no}: unknown record type {kind!r}")
        try:
            pid, t = int(doc["person"]), int(doc["frame"])
            j2 = np.array(doc["joints_2d"], dtype=np.float64)
            j3 = np.array(doc["joints_3d_rel"], dtype=np.float64) if "joints_3d_rel" in doc else None
            root = np.array(doc["root_3d"], dtype=np.float64) if "root_3d" in doc else None
        except (KeyError, TypeError, ValueError) as e:
            raise SequenceFormatError(f"{path}:{no}: malformed record: {e!r}") from None
        if j2.shape != (n_joints, 3):
            raise SequenceFormatError(f"{path}:{no}: joints_2d must be {n_joints}x3")
        if j3 is not None and j3.shape != (n_joints, 3):
            raise SequenceFormatError(f"{path}:{no}: joints_3d_rel must be {n_joints}x3")
        if j3 is not None and np.any(j3[0] != 0):
            raise SequenceFormatError(f"{path}:{no}: joints_3d_rel root joint must be (0, 0, 0)")
        if root is not None and root.shape != (3,):
            raise SequenceFormatError(f"{path}:{no}: root_3d must have 3 entries")
        if pid in last and t <= last[pid]:
            raise FrameOrderError(f"{path}:{no}: person {pid} frame {t} not after frame {last[pid]}")
        last[pid] = t
        records.append(SequenceRecord(pid, t, j2, j3, root, doc.get("action")))
    return records


def load_masks(path) -> dict[int, np.ndarray]:
    """Per-person (2N, F) masks embedded in a sequence file."""
    header, docs = _read_lines(path)
    out = {}
    for no, doc in docs:
        if doc.get("type") != "mask":
            continue
        try:
            rows = np.stack([rle_decode(r, doc["frames"]) for r in doc["rows"]])
        except (KeyError, ValueError) as e:
            raise SequenceFormatError(f"{path}:{no}: bad mask record: {e}") from None
        out[int(doc["person"])] = expand_joint_rows(rows)
    return out


@dataclass
class PersonTrack:
    """Arrays for one person, frame-major."""
    person_id: int
    frames: np.ndarray  # (F,)
    joints_2d: np.ndarray  # (F, N, 2)
    confidence: np.ndarray  # (F, N)
    joints_3d_rel: np.ndarray | None = None  # (F, N, 3)
    root_3d: np.ndarray | None = None  # (F, 3)
    actions: list | None = None


def group_by_person(records) -> dict[int, PersonTrack]:
    by: dict[int, list[SequenceRecord]] = {}
    for r in records:
        by.setdefault(r.person_id, []).append(r)
    out = {}
    for pid, rs in sorted(by.items()):
        j3 = None if any(r.joints_3d_rel is None for r in rs) else np.stack([r.joints_3d_rel for r in rs])
        root = None if any(r.root_3d is None for r in rs) else np.stack([r.root_3d for r in rs])
        out[pid] = PersonTrack(
            pid, np.array([r.frame_index for r in rs]),
            np.stack([r.joints_2d[:, :2] for r in rs]), np.stack([r.joints_2d[:, 2] for r in rs]),
            j3, root, [r.action or "all" for r in rs],
        )
    return out


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    n_people: int = 1
    n_frames: int = 200
    camera: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(1000.0, 500.0, 500.0))
    seed: int = 0
    limb_lengths_mm: tuple = DEFAULT_LIMBS_MM
    occlusion: MaskGenConfig | None = None
    pixel_noise: float = 0.0
    fps: float = 50.0
    depth_range_mm: tuple = (3500.0, 6000.0)
    min_depth_mm: float = 500.0
    motion_amplitude: float = 1.0


@dataclass
class SynthScene:
    camera: CameraIntrinsics
    poses_rel: np.ndarray  # (P, F, N, 3)
    roots: np.ndarray  # (P, F, 3)
    joints_2d_clean: np.ndarray  # (P, F, N, 2)
    joints_2d: np.ndarray  # (P, F, N, 2)
    masks: np.ndarray | None  # (P, 2N, F)

    def records(self, action: str | None = None) -> list[SequenceRecord]:
        out = []
        n_people, n_frames, n_joints = self.poses_rel.shape[:3]
        for t in range(n_frames):
            for p in range(n_people):
                conf = np.ones(n_joints)
                if self.masks is not None:
                    conf = np.where(joint_rows(self.masks[p])[:, t] > 0, 0.0, 1.0)
                j2 = np.column_stack([self.joints_2d[p, t], conf])
                out.append(SequenceRecord(p, t, j2, self.poses_rel[p, t].copy(),
                                          self.roots[p, t].copy(), action))
        return out


def _rot(axis: int, ang: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) about a coordinate axis."""
    c, s = np.cos(ang), np.sin(ang)
    o, z = np.ones_like(ang), np.zeros_like(ang)
    if axis == 0:
        m = [[o, z, z], [z, c, -s], [z, s, c]]
    elif axis == 1:
        m = [[c, z, s], [z, o, z], [-s, z, c]]
    else:
        m = [[c, -s, z], [s, c, z], [z, z, o]]
    return np.moveaxis(np.array(m), (0, 1), (-2, -1))


def _sinusoids(rng, t, n, amp, freq_range=(0.1, 0.8)) -> np.ndarray:
    """(len(t), n) sums of three random low-frequency sinusoids."""
    out = np.zeros((len(t), n))
    for _ in range(3):
        f = rng.uniform(*freq_range, size=n)
        ph = rng.uniform(0, 2 * np.pi, size=n)
        a = rng.uniform(0.3, 1.0, size=n) * amp / 3
        out += a * np.sin(2 * np.pi * f * t[:, None] + ph)
    return out


# joint-angle amplitude (rad) per joint and axis (x: flex, y: twist, z: abduct)
_ANGLE_AMP = np.zeros((N_JOINTS, 3))
_ANGLE_AMP[[1, 4]] = [0.6, 0.2, 0.25]       # hips
_ANGLE_AMP[[2, 5]] = [0.8, 0.0, 0.0]        # knees
_ANGLE_AMP[[3, 6]] = [0.3, 0.0, 0.1]        # ankles
_ANGLE_AMP[7] = [0.25, 0.3, 0.15]           # spine
_ANGLE_AMP[[8, 9, 10]] = [0.15, 0.2, 0.1]   # thorax, neck, head
_ANGLE_AMP[[11, 14]] = [0.3, 0.2, 0.4]      # shoulders
_ANGLE_AMP[[12, 15]] = [0.9, 0.4, 0.6]      # upper arms
_ANGLE_AMP[[13, 16]] = [1.0, 0.0, 0.3]      # forearms


def synth_person(rng: np.random.Generator, cfg: SynthConfig):
    """Root-relative poses (F, N, 3) and root trajectory (F, 3), both mm."""
    t = np.arange(cfg.n_frames) / cfg.fps
    limbs = np.asarray(cfg.limb_lengths_mm, dtype=np.float64)
    offsets = _REST_DIRS / np.maximum(np.linalg.norm(_REST_DIRS, axis=1, keepdims=True), 1e-12)
    offsets = offsets * limbs[:, None]

    ang = _sinusoids(rng, t, N_JOINTS * 3, 1.0).reshape(-1, N_JOINTS, 3) * _ANGLE_AMP * cfg.motion_amplitude
    ang += rng.uniform(-0.3, 0.3, size=(N_JOINTS, 3)) * _ANGLE_AMP  # per-person resting offsets
    local = _rot(0, ang[..., 0]) @ _rot(1, ang[..., 1]) @ _rot(2, ang[..., 2])
    yaw = rng.uniform(-np.pi, np.pi) + _sinusoids(rng, t, 1, 1.2, (0.05, 0.3))[:, 0]
    pitch = _sinusoids(rng, t, 1, 0.15, (0.05, 0.3))[:, 0]
    glob = [None] * N_JOINTS
    glob[0] = _rot(1, yaw) @ _rot(0, pitch) @ local[:, 0]
    pos = np.zeros((cfg.n_frames, N_JOINTS, 3))
    for j in range(1, N_JOINTS):
        par = PARENTS[j]
        glob[j] = glob[par] @ local[:, j]
        pos[:, j] = pos[:, par] + np.einsum("fij,j->fi", glob[j], offsets[j])

    z0 = rng.uniform(*cfg.depth_range_mm)
    root = np.empty((cfg.n_frames, 3))
    root[:, 0] = rng.uniform(-0.15, 0.15) * z0 + _sinusoids(rng, t, 1, 800.0, (0.03, 0.2))[:, 0]
    root[:, 1] = rng.uniform(-0.03, 0.03) * z0 + _sinusoids(rng, t, 1, 60.0, (0.5, 2.0))[:, 0]
    root[:, 2] = z0 + _sinusoids(rng, t, 1, 900.0, (0.03, 0.2))[:, 0]
    return pos, root


def synth_scene(cfg: SynthConfig) -> SynthScene:
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_people)
    poses, roots, masks, noise_rngs = [], [], [], []
    for p, ss in enumerate(seeds):
        rng_motion, rng_noise, rng_mask = (np.random.default_rng(s) for s in ss.spawn(3))
        noise_rngs.append(rng_noise)
        pos, root = synth_person(rng_motion, cfg)
        depth = (pos + root[:, None])[..., 2]
        if depth.min() <= cfg.min_depth_mm:
            raise GenerationError(
                f"person {p} comes within {depth.min():.0f} mm of the camera plane")
        poses.append(pos)
        roots.append(root)
        if cfg.occlusion is not None:
            oc = cfg.occlusion
            masks.append(sample_masks(rng_mask, oc.theta, oc.kernel, N_JOINTS, cfg.n_frames))
    poses, roots = np.stack(poses), np.stack(roots)
    clean = project(poses + roots[:, :, None], cfg.camera)
    noisy = clean.copy()
    if cfg.pixel_noise > 0:
        for p, rng_noise in enumerate(noise_rngs):
            noisy[p] += rng_noise.normal(0.0, cfg.pixel_noise, size=clean[p].shape)
    return SynthScene(cfg.camera, poses, roots, clean, noisy,
                      np.stack(masks) if masks else None)


# --------------------------------------------------------------------------
# training windows


@dataclass
class WindowSet:
    inputs: np.ndarray  # (S, 2N, T) normalized image coords, occluded entries filled
    masks: np.ndarray  # (S, 2N, T)
    targets: np.ndarray  # (S, 3N) mm, root-relative
    clean_inputs: np.ndarray  # (S, 2N, T) before any masking
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.targets)


def to_channels(joints_2d: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """(F, N, 2) pixels -> (2N, F) normalized rows [u0, v0, u1, v1, ...]."""
    return cam.normalize(joints_2d).reshape(joints_2d.shape[0], -1).T.copy()


def make_training_windows(sequences, receptive_field: int, cam: CameraIntrinsics,
                          masks=None, fill: str = "zero") -> WindowSet:
    """Slice (joints_2d (F,N,2), joints_3d_rel (F,N,3)) pairs into centred windows.

    ``masks`` optionally gives one (2N, F) mask per sequence. Sequences shorter
    than the window are skipped and counted.
    """
    T = receptive_field
    half = (T - 1) // 2
    xs, ms, ys, cs = [], [], [], []
    skipped = 0
    for k, (j2, j3) in enumerate(sequences):
        j2, j3 = np.asarray(j2), np.asarray(j3)
        n_frames = j2.shape[0]
        if n_frames < T:
            skipped += 1
            continue
        clean = to_channels(j2, cam)
        mask = np.zeros_like(clean) if masks is None or masks[k] is None else np.asarray(masks[k], dtype=np.float64)
        filled = apply_fill(clean, mask, fill)
        tgt = (j3 - j3[:, :1]).reshape(n_frames, -1)
        for s in range(n_frames - T + 1):
            cs.append(clean[:, s : s + T])
            xs.append(filled[:, s : s + T])
            ms.append(mask[:, s : s + T])
            ys.append(tgt[s + half])
    if skipped:
        log.warning("skipped %d sequence(s) shorter than the %d-frame window", skipped, T)
    if not ys:
        n2 = 2 * N_JOINTS
        empty = np.zeros((0, n2, T))
        return WindowSet(empty, empty.copy(), np.zeros((0, 3 * N_JOINTS)), empty.copy(), skipped)
    return WindowSet(np.stack(xs), np.stack(ms), np.stack(ys), np.stack(cs), skipped)


def apply_fill(x: np.ndarray, mask: np.ndarray, fill: str) -> np.ndarray:
    """Replace occluded entries of a (..., 2N, T) input: zeros or temporal interpolation."""
    if fill == "zero":
        return np.where(mask > 0, 0.0, x)
    if fill == "interp":
        if x.ndim == 2:
            return interpolate_missing(x, mask, on_unfillable="zero")
        return np.stack([interpolate_missing(a, m, on_unfillable="zero") for a, m in zip(x, mask)])
    raise ValueError(f"unknown fill {fill!r}")
