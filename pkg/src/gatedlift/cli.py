"""Command line: synth, maskgen, train, infer, traj, eval.

Exit codes: 0 success, 1 usage error, 2 data/validation error. Every run
writes ``manifest.json`` next to its outputs. Settings resolve as command
line flag > ``--config`` file (JSON, flat or keyed by subcommand) > default.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .camera import BehindCameraError, CameraIntrinsics, load_camera, save_camera
from .data import (N_JOINTS, GenerationError, SequenceFormatError, SequenceRecord, SynthConfig,
                   apply_fill, group_by_person, load_masks, load_sequence,
                   make_training_windows, save_sequence, synth_scene, to_channels)
from .masks import (MaskGenConfig, UnfillableJointError, calibrate_theta, confidence_to_mask,
                    generate_mask, joint_rows)
from .metrics import AlignmentError, protocol1, protocol2
from .network import (PoseLiftNet, TrainConfig, config_for_window, load_checkpoint,
                      predict_sequence, save_checkpoint)
from .training import MaskPolicy, TrainingDivergedError, train
from .trajectory import (InsufficientObservationError, TrajectoryProblem, UnsolvableError,
                         solve_long)

log = logging.getLogger("gatedlift")

TRAJECTORY_HEADER = "# gatedlift.trajectory v1"
TRAJECTORY_COLUMNS = ["person", "frame", "X", "Y", "Z", "visible_count", "converged"]

# built-in defaults; training values follow the reference hyperparameters
DEFAULTS = {
    "seed": 0,
    "people": 2,
    "frames": 200,
    "noise": 0.0,
    "f": 1000.0, "cx": 500.0, "cy": 500.0,
    "theta": None,
    "occlusion_ratio": None,
    "kernel_k": 9,
    "channels": 128,
    "window": 243,
    "epochs": 80,
    "batch": 1024,
    "lr": 0.001,
    "lr_decay": 0.95,
    "gate_mode": "two_stream",
    "fill": "zero",
    "lambda1": 1.0,
    "lambda2": 1.0,
    "chunk_frames": 100,
    "protocol": 1,
    "action": None,
    "from_confidence": False,
}

DATA_ERRORS = (SequenceFormatError, GenerationError, BehindCameraError, UnfillableJointError,
               InsufficientObservationError, UnsolvableError, AlignmentError,
               TrainingDivergedError, FileNotFoundError, json.JSONDecodeError, KeyError,
               ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _ratios(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ratios, got {text!r}")
    if any(not 0 <= v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("ratios must lie in [0, 1]")
    return vals


def _flag(p, *names, **kw):
    # defaults are suppressed so that only flags actually given override the config
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="gatedlift", description="Occlusion-robust 3D pose lifting and trajectory recovery.")
    top.add_argument("--version", action="version", version=f"gatedlift {__version__}")
    sub = top.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def common(p):
        _flag(p, "--config", help="JSON settings file (flat, or keyed by subcommand)")
        _flag(p, "--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic scene with 3D ground truth")
    common(p)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    _flag(p, "--people", type=int)
    _flag(p, "--frames", type=int)
    _flag(p, "--noise", type=float, help="pixel noise sigma")
    _flag(p, "--camera", type=Path, help="camera file (default f=1000, c=(500,500))")
    _flag(p, "--theta", type=float)
    _flag(p, "--occlusion-ratio", dest="occlusion_ratio", type=float)
    _flag(p, "--kernel-k", dest="kernel_k", type=int)
    _flag(p, "--action", help="action label stored on every frame")

    p = sub.add_parser("maskgen", help="embed occlusion masks in a sequence file")
    common(p)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _flag(p, "--theta", type=float)
    _flag(p, "--occlusion-ratio", dest="occlusion_ratio", type=float)
    _flag(p, "--kernel-k", dest="kernel_k", type=int)
    _flag(p, "--from-confidence", dest="from_confidence", action="store_true",
          help="derive masks from detector confidences instead of sampling")

    p = sub.add_parser("train", help="train the lifting network")
    common(p)
    p.add_argument("--data", required=True, type=Path, nargs="+", help="sequence files with 3D")
    p.add_argument("--out", required=True, type=Path)
    _flag(p, "--camera", type=Path)
    _flag(p, "--val", type=Path, help="validation sequence file")
    _flag(p, "--channels", type=int)
    _flag(p, "--window", type=int, help="temporal window (= receptive field)")
    _flag(p, "--epochs", type=int)
    _flag(p, "--batch", type=int)
    _flag(p, "--lr", type=float)
    _flag(p, "--lr-decay", dest="lr_decay", type=float)
    _flag(p, "--gate-mode", dest="gate_mode", choices=["two_stream", "single_stream", "plain"])
    _flag(p, "--fill", choices=["zero", "interp"])
    _flag(p, "--occlusion-ratio", dest="occlusion_ratio", type=_ratios,
          help="comma-separated ratios; fresh masks are drawn per sample")
    _flag(p, "--kernel-k", dest="kernel_k", type=int)

    p = sub.add_parser("infer", help="predict root-relative 3D poses")
    common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output sequence file")
    _flag(p, "--camera", type=Path)
    _flag(p, "--fill", choices=["zero", "interp"])

    p = sub.add_parser("traj", help="recover global root trajectories")
    common(p)
    p.add_argument("--poses", required=True, type=Path, help="sequence file with predicted 3D")
    p.add_argument("--data", required=True, type=Path, help="sequence file with 2D observations")
    p.add_argument("--out", required=True, type=Path, help="trajectory CSV")
    _flag(p, "--camera", type=Path)
    _flag(p, "--lambda1", type=float)
    _flag(p, "--lambda2", type=float)
    _flag(p, "--chunk-frames", dest="chunk_frames", type=int)

    p = sub.add_parser("eval", help="score predictions under protocol 1 or 2")
    common(p)
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    _flag(p, "--traj", type=Path, help="trajectory CSV (protocol 2)")
    _flag(p, "--protocol", type=int, choices=[1, 2])
    _flag(p, "--per-frame-scale", dest="per_frame_scale", action="store_true")
    top.subcommands = sub.choices
    return top


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags."""
    given = vars(args)
    cfg = dict(DEFAULTS)
    cfg["per_frame_scale"] = False
    if "config" in given:
        doc = json.loads(Path(given["config"]).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
        raw = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        raw.update(doc.get(args.command, {}))
        flat = {k.replace("-", "_"): v for k, v in raw.items()}
        for key, v in flat.items():
            if key not in cfg and key not in ("camera", "val", "traj"):
                raise UsageError(f"unknown config key {key!r}")
            cfg[key] = v
    flags = {k: v for k, v in given.items() if k not in ("config", "verbose")}
    cfg.update(flags)
    cfg["_explicit"] = sorted(set(flags) | (set(flat) if "config" in given else set()))
    if isinstance(cfg.get("occlusion_ratio"), list):
        cfg["occlusion_ratio"] = tuple(cfg["occlusion_ratio"])
    return cfg


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs, outputs, started: float) -> None:
    doc = {
        "subcommand": command,
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items()) if not k.startswith("_")},
        "seed": cfg.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")


def _camera(cfg) -> CameraIntrinsics:
    if cfg.get("camera"):
        return load_camera(cfg["camera"])
    return CameraIntrinsics(float(cfg["f"]), float(cfg["cx"]), float(cfg["cy"]))


def _theta(cfg) -> float | None:
    if cfg.get("theta") is not None:
        return float(cfg["theta"])
    if cfg.get("occlusion_ratio") is not None:
        return calibrate_theta(float(cfg["occlusion_ratio"]), int(cfg["kernel_k"]), seed=cfg["seed"])
    return None


def _person_masks(path: Path, tracks) -> dict[int, np.ndarray]:
    """(2N, F) mask per person: embedded mask records, else detector confidences."""
    embedded = load_masks(path)
    out = {}
    for pid, tr in tracks.items():
        if pid in embedded:
            out[pid] = embedded[pid][:, : len(tr.frames)]
        else:
            out[pid] = confidence_to_mask(tr.confidence.T)
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg, args) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cam = _camera(cfg)
    theta = _theta(cfg)
    occ = None if theta is None else MaskGenConfig(theta=theta, kernel=int(cfg["kernel_k"]))
    scene = synth_scene(SynthConfig(
        n_people=int(cfg["people"]), n_frames=int(cfg["frames"]), camera=cam,
        seed=int(cfg["seed"]), occlusion=occ, pixel_noise=float(cfg["noise"])))
    masks = None if scene.masks is None else {p: m for p, m in enumerate(scene.masks)}
    save_sequence(out / "scene.jsonl", scene.records(cfg.get("action")), masks)
    save_camera(out / "camera.json", cam)
    return [out / "scene.jsonl", out / "camera.json"]


def cmd_maskgen(cfg, args) -> list[Path]:
    records = load_sequence(args.input)
    tracks = group_by_person(records)
    masks = {}
    if cfg["from_confidence"]:
        masks = {pid: confidence_to_mask(tr.confidence.T) for pid, tr in tracks.items()}
    else:
        theta = _theta(cfg)
        if theta is None:
            raise UsageError("maskgen needs --theta or --occlusion-ratio (or --from-confidence)")
        seeds = np.random.SeedSequence(int(cfg["seed"])).generate_state(len(tracks))
        for (pid, tr), s in zip(tracks.items(), seeds):
            masks[pid] = generate_mask(MaskGenConfig(theta=theta, kernel=int(cfg["kernel_k"]),
                                                     n_joints=tr.joints_2d.shape[1],
                                                     frames=len(tr.frames), seed=int(s)))
    # occluded joints get confidence 0 so downstream readers agree with the mask
    start = {pid: int(tr.frames[0]) for pid, tr in tracks.items()}
    pos = {pid: {int(f): i for i, f in enumerate(tr.frames)} for pid, tr in tracks.items()}
    out_recs = []
    for r in records:
        occl = joint_rows(masks[r.person_id])[:, pos[r.person_id][r.frame_index]] > 0
        j2 = r.joints_2d.copy()
        j2[occl, 2] = 0.0
        out_recs.append(SequenceRecord(r.person_id, r.frame_index, j2, r.joints_3d_rel, r.root_3d, r.action))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_sequence(args.out, out_recs, masks, start)
    return [Path(args.out)]


def _windows_from_files(paths, cam, window, fill):
    seqs, masks = [], []
    for path in paths:
        tracks = group_by_person(load_sequence(path))
        pm = _person_masks(path, tracks)
        for pid, tr in tracks.items():
            if tr.joints_3d_rel is None:
                raise SequenceFormatError(f"{path}: person {pid} has no 3D ground truth")
            seqs.append((tr.joints_2d, tr.joints_3d_rel))
            masks.append(pm[pid])
    return make_training_windows(seqs, window, cam, masks, fill)


def cmd_train(cfg, args) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cam = _camera(cfg)
    net_cfg = config_for_window(int(cfg["window"]), channels=int(cfg["channels"]),
                                gate_mode=cfg["gate_mode"], seed=int(cfg["seed"]))
    ws = _windows_from_files(args.data, cam, net_cfg.receptive_field, cfg["fill"])
    if len(ws) == 0:
        raise SequenceFormatError(f"no sequence is at least {net_cfg.receptive_field} frames long")
    val = None
    if cfg.get("val"):
        vs = _windows_from_files([cfg["val"]], cam, net_cfg.receptive_field, cfg["fill"])
        val = (vs.inputs, vs.masks, vs.targets)
    ratios = cfg.get("occlusion_ratio")
    if isinstance(ratios, (int, float)):
        ratios = (float(ratios),)
    policy = MaskPolicy(tuple(ratios or ()), int(cfg["kernel_k"]), cfg["fill"])
    tcfg = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch"]), lr=float(cfg["lr"]),
                       lr_decay=float(cfg["lr_decay"]), seed=int(cfg["seed"]))
    net = PoseLiftNet(net_cfg)
    log.info("training %d parameters on %d windows", net.num_parameters(), len(ws))
    res = train(ws, net, tcfg, policy, val, checkpoint_dir=out)
    # final checkpoint carries the fill mode so inference can match it
    save_checkpoint(out / "checkpoint.npz", res.net, res.opt_state,
                    {"epoch": tcfg.epochs - 1, "fill": cfg["fill"], "train": asdict(tcfg)})
    return [out / "checkpoint.npz", out / "loss.csv"]


def cmd_infer(cfg, args) -> list[Path]:
    net, _, extra = load_checkpoint(args.checkpoint)
    cam = _camera(cfg)
    fill = cfg["fill"] if "fill" in cfg["_explicit"] else extra.get("fill", cfg["fill"])
    records = load_sequence(args.data)
    tracks = group_by_person(records)
    masks = _person_masks(args.data, tracks)
    preds = {}
    for pid, tr in tracks.items():
        x = apply_fill(to_channels(tr.joints_2d, cam), masks[pid], fill)
        p = predict_sequence(x, masks[pid], net).reshape(len(tr.frames), -1, 3)
        p[:, 0] = 0.0
        preds[pid] = {int(f): p[i] for i, f in enumerate(tr.frames)}
    out_recs = [SequenceRecord(r.person_id, r.frame_index, r.joints_2d,
                               preds[r.person_id][r.frame_index], None, r.action) for r in records]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_sequence(args.out, out_recs, masks)
    return [Path(args.out)]


def cmd_traj(cfg, args) -> list[Path]:
    cam = _camera(cfg)
    poses = group_by_person(load_sequence(args.poses))
    obs = group_by_person(load_sequence(args.data))
    masks = _person_masks(args.data, obs)
    chunk = int(cfg["chunk_frames"])
    rows = []
    for pid, tr in obs.items():
        if pid not in poses or poses[pid].joints_3d_rel is None:
            raise SequenceFormatError(f"{args.poses}: no 3D poses for person {pid}")
        pp = poses[pid]
        if not np.array_equal(pp.frames, tr.frames):
            raise SequenceFormatError(f"person {pid}: pose and observation frames differ")
        problem = TrajectoryProblem(pp.joints_3d_rel, tr.joints_2d, cam, joint_rows(masks[pid]).T,
                                    float(cfg["lambda1"]), float(cfg["lambda2"]))
        sol = solve_long(problem, chunk=chunk, overlap=chunk // 2)
        for i, f in enumerate(tr.frames):
            c = sol.roots[i]
            rows.append([pid, int(f), repr(float(c[0])), repr(float(c[1])), repr(float(c[2])),
                         int(sol.visible_counts[i]), int(sol.converged)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        w.writerows(rows)
    return [out]


def load_trajectory(path) -> dict[tuple[int, int], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != TRAJECTORY_HEADER:
        raise SequenceFormatError(f"{path}:1: not a gatedlift trajectory file")
    reader = csv.DictReader(lines[1:])
    out = {}
    for no, row in enumerate(reader, start=3):
        try:
            out[(int(row["person"]), int(row["frame"]))] = np.array(
                [float(row["X"]), float(row["Y"]), float(row["Z"])])
        except (KeyError, TypeError, ValueError) as e:
            raise SequenceFormatError(f"{path}:{no}: bad trajectory row: {e!r}") from None
    return out


def cmd_eval(cfg, args) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gt = {(r.person_id, r.frame_index): r for r in load_sequence(args.gt)}
    pred = {(r.person_id, r.frame_index): r for r in load_sequence(args.pred)}
    keys = sorted(gt)
    if sorted(pred) != keys:
        raise SequenceFormatError("prediction and ground-truth files cover different frames")
    if any(gt[k].joints_3d_rel is None or pred[k].joints_3d_rel is None for k in keys):
        raise SequenceFormatError("both files need joints_3d_rel on every frame")
    actions = [gt[k].action or "all" for k in keys]
    p_rel = np.stack([pred[k].joints_3d_rel for k in keys])
    g_rel = np.stack([gt[k].joints_3d_rel for k in keys])
    protocol = int(cfg["protocol"])
    if protocol == 1:
        report = protocol1(p_rel, g_rel, actions)
    else:
        if any(gt[k].root_3d is None for k in keys):
            raise SequenceFormatError(f"{args.gt}: protocol 2 needs root_3d ground truth")
        if cfg.get("traj"):
            traj = load_trajectory(cfg["traj"])
            missing = [k for k in keys if k not in traj]
            if missing:
                raise SequenceFormatError(f"trajectory lacks person/frame {missing[0]}")
            p_root = np.stack([traj[k] for k in keys])
        elif all(pred[k].root_3d is not None for k in keys):
            p_root = np.stack([pred[k].root_3d for k in keys])
        else:
            raise SequenceFormatError("protocol 2 needs --traj or root_3d in the predictions")
        g_root = np.stack([gt[k].root_3d for k in keys])
        report = protocol2(p_rel + p_root[:, None], g_rel + g_root[:, None], actions,
                           per_frame_scale=bool(cfg["per_frame_scale"]),
                           sequence_ids=[k[0] for k in keys])
    (out / "report.csv").write_text(report.to_csv())
    table = report.table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return [out / "report.csv", out / "report.txt"]


COMMANDS = {"synth": cmd_synth, "maskgen": cmd_maskgen, "train": cmd_train,
            "infer": cmd_infer, "traj": cmd_traj, "eval": cmd_eval}


def _input_paths(args) -> list:
    out = []
    for name in ("input", "data", "checkpoint", "poses", "pred", "gt", "camera", "traj", "val"):
        v = getattr(args, name, None)
        if v is None:
            continue
        out.extend(v if isinstance(v, list) else [v])
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # list the subcommand's own flags, not just the top-level usage
            parser.subcommands[args.command].print_usage(sys.stderr)
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        started = time.time()
        cfg = resolve(args)
        outputs = COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"gatedlift: usage error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"gatedlift: error: {e}", file=sys.stderr)
        return 2
    manifest_dir = Path(args.out) if Path(args.out).is_dir() else Path(args.out).parent
    write_manifest(manifest_dir, args.command, cfg, _input_paths(args), outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
