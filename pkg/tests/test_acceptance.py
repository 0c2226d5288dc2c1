"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavier criteria (7, 8, 9) train real networks and take several minutes.
"""
import time

import numpy as np
from scipy.spatial.transform import Rotation

from gatedlift import autodiff as ad
from gatedlift.autodiff import Parameter, RunningStats, Tensor
from gatedlift.camera import CameraIntrinsics, load_camera, project, save_camera
from gatedlift.cli import load_trajectory, main
from gatedlift.data import (SequenceRecord, SynthConfig, load_masks, load_sequence,
                            make_training_windows, save_sequence, synth_scene)
from gatedlift.experiments import OverfitConfig, TrendConfig, run_occlusion_trend, run_overfit
from gatedlift.masks import (MaskGenConfig, generate_mask, mean_run_length, occluded_fraction,
                             rle_decode, rle_encode)
from gatedlift.metrics import mpjpe, optimal_scale, procrustes_align, protocol1, protocol2
from gatedlift.network import (GatedLayer, GatedLayerConfig, NetworkConfig, PoseLiftNet,
                               TrainConfig, load_checkpoint, save_checkpoint)
from gatedlift.training import MaskPolicy, train
from gatedlift.trajectory import TrajectoryProblem, objective, solve, solve_long

CAM = CameraIntrinsics(1000.0, 500.0, 500.0)
MODES = ("two_stream", "single_stream", "plain")


# --- 1: gradients ----------------------------------------------------------

def _reduce(out: Tensor, rng) -> Tensor:
    """Collapse (B, C, T) to a scalar: fixed random full-width kernel to (B, 3), then MSE."""
    w = Tensor(rng.standard_normal((3,) + out.shape[1:]))
    flat = ad.flatten_time1(ad.conv1d_dilated(out, w, None, 1))
    return ad.mse_loss(flat, rng.standard_normal(flat.shape))


def _op_probes(seed: int):
    """(name, params, forward) triples covering every primitive layer type."""
    rng = np.random.default_rng(seed)

    def par(name, shape):
        return Parameter(name, rng.standard_normal(shape))

    def probe(name, params, build):
        red = np.random.default_rng([seed, len(name)])
        weights_seed = int(red.integers(2**31))

        def loss():
            ad.new_tape()
            return _reduce(build(), np.random.default_rng(weights_seed))

        return name, params, loss

    out = []
    x, w, b = par("x", (2, 3, 11)), par("w", (4, 3, 3)), par("b", (4,))
    out.append(probe("conv1d_dilated", [x, w, b], lambda x=x, w=w, b=b: ad.conv1d_dilated(x, w, b, 2)))
    for training in (True, False):
        x, g, be = par("x", (3, 4, 6)), par("gamma", (4,)), par("beta", (4,))
        rs = RunningStats(rng.standard_normal(4), rng.uniform(0.5, 2, 4))
        out.append(probe(f"batch_norm[{'train' if training else 'eval'}]", [x, g, be],
                         lambda x=x, g=g, be=be, rs=rs, t=training:
                         ad.batch_norm(x, g, be, rs, t, momentum=0.0)))
    for name, fn in (("relu", ad.relu), ("sigmoid", ad.sigmoid)):
        x = par("x", (2, 3, 5))
        out.append(probe(name, [x], lambda x=x, fn=fn: fn(x)))
    a, c = par("a", (2, 3, 5)), par("c", (2, 3, 5))
    out.append(probe("hadamard", [a, c], lambda a=a, c=c: ad.hadamard(a, c)))
    a, c = par("a", (2, 3, 5)), par("c", (2, 3, 5))
    out.append(probe("add", [a, c], lambda a=a, c=c: ad.add(a, c)))
    x = par("x", (2, 3, 9))
    out.append(probe("crop_time", [x], lambda x=x: ad.crop_time(x, 2, 4)))
    x = par("x", (2, 3, 5))
    out.append(probe("scale", [x], lambda x=x: ad.scale(x, -0.7)))
    x = par("x", (2, 3, 5))
    out.append(probe("dropout", [x], lambda x=x: ad.dropout(x, 0.3, np.random.default_rng(seed), True)))

    p, y = par("pred", (4, 6)), rng.standard_normal((4, 6))

    def mse():
        ad.new_tape()
        return ad.mse_loss(p, y)

    out.append(("mse_loss", [p], mse))
    return out


def _layer_probes(seed: int):
    out = []
    for mode in MODES:
        for gate_bn in ((True, False) if mode != "plain" else (True,)):
            rng = np.random.default_rng(seed)
            layer = GatedLayer(GatedLayerConfig(3, 4, 3, 2, gate_mode=mode, gate_batch_norm=gate_bn),
                               "l", rng)
            x = Parameter("x", rng.standard_normal((3, 3, 9)))
            m = Tensor((rng.random((3, 3, 9)) < 0.4).astype(float))
            wseed = int(rng.integers(2**31))

            def loss(layer=layer, x=x, m=m, wseed=wseed):
                ad.new_tape()
                return _reduce(layer.forward(x, m, training=True)[0], np.random.default_rng(wseed))

            out.append((f"gated_layer[{mode},gate_bn={gate_bn}]", layer.params + [x], loss))
    for mode in MODES:
        rng = np.random.default_rng(seed)
        net = PoseLiftNet(NetworkConfig(channels=4, n_skip_blocks=1, gate_mode=mode, seed=seed))
        xin = rng.standard_normal((3, 34, 9))
        m = (rng.random((3, 34, 9)) < 0.4).astype(float)
        y = rng.standard_normal((3, 51)) * 50

        def loss(net=net, xin=xin, m=m, y=y):
            return ad.mse_loss(net.forward(xin, m, training=True), y)

        out.append((f"network[{mode}]", net.parameters(), loss))
    return out


def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    worst, failures, n_checks = 0.0, [], 0
    for seed in range(10):
        for name, params, loss in _op_probes(seed) + _layer_probes(seed):
            rep = ad.grad_check(loss, params, tolerance=1e-4, max_entries=20, seed=seed)
            n_checks += 1
            worst = max(worst, rep.max_rel_err)
            if not rep.passed:
                failures.append(f"{name}/seed{seed}:{rep.offending}")
    seconds = time.perf_counter() - t0
    ok = not failures and seconds < 120
    criterion(1, ok, f"{n_checks} checks over 10 seeds, max rel err {worst:.2e} (tol 1e-4), "
                     f"{seconds:.1f}s (limit 120s) {failures[:5]}")
    assert ok


# --- 2: gate algebra ------------------------------------------------------

def test_criterion_2_gate_algebra(criterion):
    open_err, closed_max = 0.0, 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for gate_bn in (True, False):
            kw = dict(channels=8, n_skip_blocks=2, gate_batch_norm=gate_bn, seed=seed)
            gated = PoseLiftNet(NetworkConfig(**kw))
            plain = PoseLiftNet(NetworkConfig(gate_mode="plain", **kw))
            shared = gated.named_parameters()
            for name, p in plain.named_parameters().items():
                p.data = shared[name].data.copy()
            x = rng.standard_normal((4, 34, 27))
            m = (rng.random((4, 34, 27)) < 0.5).astype(float)
            for layer in gated.layers:
                layer.gate_bias.data[:] = 50.0  # sigma -> 1
            diff = np.abs(gated.forward(x, m, training=True).data - plain.forward(x, m, training=True).data)
            open_err = max(open_err, float(diff.max()))
            for layer in gated.layers:
                layer.gate_bias.data[:] = -50.0  # sigma -> 0
            closed_max = max(closed_max, float(np.abs(gated.forward(x, m, training=True).data).max()))
    ok = open_err <= 1e-10 and closed_max <= 1e-12
    criterion(2, ok, f"open-gate max |gated - plain| {open_err:.1e} (tol 1e-10); "
                     f"closed-gate max |out| {closed_max:.1e} (tol 1e-12)")
    assert ok


# --- 3: mask statistics ---------------------------------------------------

def test_criterion_3_mask_statistics(criterion):
    notes, ok = [], True
    frames = -(-100_000 // 17)  # >= 1e5 independent joint entries
    for k in (1, 3, 5, 9):
        frac = occluded_fraction(generate_mask(MaskGenConfig(theta=0.5, kernel=k, frames=frames, seed=k)))
        ok &= abs(frac - 0.5) <= 0.02
        notes.append(f"K={k}:{frac:.4f}")
    runs = [np.mean([mean_run_length(generate_mask(MaskGenConfig(theta=0.5, kernel=k, seed=s)))
                     for s in range(50)]) for k in (1, 3, 5, 9)]
    ok &= all(a <= b for a, b in zip(runs, runs[1:]))
    notes.append("runs " + "/".join(f"{r:.2f}" for r in runs))
    for theta in (0.25, 0.5, 0.75):
        m = generate_mask(MaskGenConfig(theta=theta, kernel=1, frames=frames, seed=7))
        n, p = m.size // 2, 1 - theta
        dev = abs(occluded_fraction(m) - p) / np.sqrt(p * (1 - p) / n)
        ok &= dev <= 3
        notes.append(f"theta={theta}:{dev:.2f}sigma")
    criterion(3, ok, "; ".join(notes))
    assert ok


# --- 4: trajectory oracle -------------------------------------------------

def _rmse(a, b):
    return float(np.sqrt(((a - b) ** 2).sum(axis=-1).mean()))


def _clip(n_frames, seed, roots=None, mask=None):
    sc = synth_scene(SynthConfig(n_frames=n_frames, seed=seed, camera=CAM))
    truth = sc.roots[0] if roots is None else roots
    obs = project(sc.poses_rel[0] + truth[:, None], CAM)
    return TrajectoryProblem(sc.poses_rel[0], obs, CAM, mask), truth


def test_criterion_4_trajectory_oracle(criterion):
    worst_rmse, worst_s = 0.0, 0.0
    for seed in range(3):
        p, truth = _clip(100, seed)
        t0 = time.perf_counter()
        sol = solve(p)
        worst_s = max(worst_s, time.perf_counter() - t0)
        worst_rmse = max(worst_rmse, _rmse(sol.roots, truth))
    n = 100
    line = np.array([-400.0, 100.0, 4000.0]) + np.arange(n)[:, None] * np.array([8.0, -1.0, 6.0])
    mask = np.zeros((n, 17))
    mask[40:60] = 1
    p, truth = _clip(n, 0, roots=line, mask=mask)
    t0 = time.perf_counter()
    sol = solve(p)
    worst_s = max(worst_s, time.perf_counter() - t0)
    gap = _rmse(sol.roots[40:60], truth[40:60])
    ok = worst_rmse < 1.0 and gap < 10.0 and worst_s < 30.0
    criterion(4, ok, f"visible RMSE {worst_rmse:.2e} mm (<1); gap RMSE {gap:.3f} mm (<10); "
                     f"slowest clip {worst_s:.2f}s (<30)")
    assert ok


# --- 5: objective structure -----------------------------------------------

def _random_problem(rng, n_frames=12):
    poses = rng.normal(0, 250, (n_frames, 17, 3))
    poses[:, 0] = 0
    truth = (np.array([-400.0, 100.0, 4000.0]) + np.arange(n_frames)[:, None] * [8.0, -1.0, 6.0]
             + rng.normal(0, 30, (n_frames, 3)))
    obs = project(poses + truth[:, None], CAM) + rng.normal(0, 2, (n_frames, 17, 2))
    mask = (rng.random((n_frames, 17)) < 0.3).astype(float)
    mask[rng.integers(n_frames)] = 1
    lam = rng.uniform(0, 3, 2)
    return TrajectoryProblem(poses, obs, CAM, mask, lam[0], lam[1]), truth


def test_criterion_5_objective_structure(criterion):
    rng = np.random.default_rng(5)
    unchanged = improved = 0
    for _ in range(100):
        p, truth = _random_problem(rng)
        roots = truth + rng.normal(0, 50, truth.shape)
        before = objective(p, roots)
        dead = np.flatnonzero(p.mask.all(axis=1))
        p.obs_2d[dead] += rng.normal(0, 500, p.obs_2d[dead].shape)
        p.obs_2d[dead, 0, 0] = np.nan
        unchanged += objective(p, roots) == before
        sol = solve(p)
        improved += sol.objective <= sol.initial_objective
    ok = unchanged == 100 and improved == 100
    criterion(5, ok, f"objective bitwise unchanged after perturbing occluded frames {unchanged}/100; "
                     f"objective(solution) <= objective(init) {improved}/100")
    assert ok


# --- 6: metrics -----------------------------------------------------------

def test_criterion_6_metrics(criterion):
    rng = np.random.default_rng(6)
    p1_worst = 0.0
    for _ in range(200):
        gt = rng.normal(0, 300, (3, 17, 3)) + [0, 0, 4000]
        rot = Rotation.random(3, random_state=rng).as_matrix()
        pred = (rng.uniform(0.2, 5.0, (3, 1, 1)) * np.einsum("fij,fkj->fki", rot, gt)
                + rng.normal(0, 1000, (3, 1, 3)))
        p1_worst = max(p1_worst, protocol1(pred, gt).overall)
    gt = rng.normal(0, 200, (8, 17, 3)) + [0, 0, 4000]
    s = protocol2(2 * gt, gt).scales["0"]
    lsq_bad = mpjpe_bad = 0
    for _ in range(1000):
        n = int(rng.integers(3, 18))
        gt = rng.normal(0, 200, (n, 3)) + rng.normal(0, 2000, 3)
        pred = gt + rng.normal(0, rng.uniform(1, 100), (n, 3))
        aligned = procrustes_align(pred, gt)[3]
        scaled = optimal_scale(pred, gt) * pred
        lsq_bad += ((aligned - gt) ** 2).sum() > ((scaled - gt) ** 2).sum() * (1 + 1e-12)
        mpjpe_bad += mpjpe(aligned, gt) > mpjpe(scaled, gt) + 1e-9
    ok = p1_worst <= 1e-9 and abs(s - 0.5) <= 1e-12 and lsq_bad == 0
    criterion(6, ok, f"P1 on similarity transforms max {p1_worst:.1e} mm (tol 1e-9); P2 scale {s!r}; "
                     f"nested squared residual violations {lsq_bad}/1000 "
                     f"(mean-distance violations, not guaranteed: {mpjpe_bad}/1000)")
    assert ok


# --- 7: capacity ----------------------------------------------------------

def test_criterion_7_overfit(criterion):
    t0 = time.perf_counter()
    res = run_overfit(OverfitConfig())
    seconds = time.perf_counter() - t0
    rises = res.ma_increases(20)
    ok = res.final_mpjpe < 10.0 and np.all(rises <= 0) and seconds < 300
    criterion(7, ok, f"train MPJPE {res.final_mpjpe:.2f} mm (<10) after {len(res.history)} epochs; "
                     f"largest 20-epoch MA rise {rises.max():.3g} (<=0); {seconds:.0f}s (<300)")
    assert ok


# --- 8: occlusion robustness trend ----------------------------------------

def test_criterion_8_occlusion_trend(criterion):
    cfg = TrendConfig()
    res = run_occlusion_trend(cfg, log=print)
    print(res.table())
    monotone = all(all(a <= b for a, b in zip(e, e[1:]))
                   for per_seed in res.errors.values() for e in per_seed.values())
    gated, plain = res.errors["two_stream"], res.errors["plain"]
    wins = sum(gated[s][-1] < plain[s][-1] for s in cfg.seeds)
    ok = monotone and wins == len(cfg.seeds) and res.seconds < 1800
    g50, p50 = res.mean("two_stream")[-1], res.mean("plain")[-1]
    criterion(8, ok, f"non-decreasing in ratio for every model: {monotone}; gated < plain at 50% in "
                     f"{wins}/{len(cfg.seeds)} seeds (mean {g50:.1f} vs {p50:.1f} mm); "
                     f"{res.seconds:.0f}s (<1800)")
    assert ok


# --- 9: determinism, formats, CLI pipeline ---------------------------------

def _scene_bytes(seed):
    sc = synth_scene(SynthConfig(n_people=2, n_frames=60, seed=seed, pixel_noise=1.0))
    return b"".join(a.tobytes() for a in (sc.poses_rel, sc.roots, sc.joints_2d_clean, sc.joints_2d))


def _trained_checkpoint(path):
    sc = synth_scene(SynthConfig(n_people=2, n_frames=40, seed=3))
    cfg = NetworkConfig(channels=8, n_skip_blocks=1, seed=4)
    ws = make_training_windows([(sc.joints_2d[p], sc.poses_rel[p]) for p in range(2)],
                               cfg.receptive_field, sc.camera)
    net = PoseLiftNet(cfg)
    res = train(ws, net, TrainConfig(epochs=3, batch_size=16, lr=0.003, seed=5),
                MaskPolicy((0.0, 0.5), kernel=3))
    save_checkpoint(path, net, res.opt_state, {"epoch": 2})
    return path.read_bytes()


def _determinism(tmp_path):
    checks = {}
    checks["synth"] = _scene_bytes(9) == _scene_bytes(9) and _scene_bytes(9) != _scene_bytes(10)
    checks["checkpoint"] = (_trained_checkpoint(tmp_path / "a.npz")
                            == _trained_checkpoint(tmp_path / "b.npz"))
    p, _ = _clip(230, 4)
    p.obs_2d = p.obs_2d + np.random.default_rng(0).normal(0, 2, p.obs_2d.shape)
    checks["trajectory"] = solve_long(p).roots.tobytes() == solve_long(p).roots.tobytes()
    return checks


def _round_trips(tmp_path):
    rng = np.random.default_rng(9)
    checks = {}
    def record(pid, frame):
        uv = rng.normal(0, 1e3, (17, 2)) * rng.choice([1.0, 1e-300, 1e300])
        rel = np.vstack([np.zeros(3), rng.normal(0, 300, (16, 3))])
        return SequenceRecord(pid, frame, np.hstack([uv, rng.random((17, 1))]), rel,
                              rng.normal(0, 4000, 3), "walk" if pid else None)

    recs = [record(p, f) for p in range(2) for f in range(30)]
    masks = {0: np.repeat((rng.random((17, 30)) < 0.4).astype(float), 2, axis=0)}
    save_sequence(tmp_path / "s.jsonl", recs, masks)
    back = load_sequence(tmp_path / "s.jsonl")
    checks["sequence"] = all(
        a.person_id == b.person_id and a.frame_index == b.frame_index and a.action == b.action
        and np.array_equal(a.joints_2d, b.joints_2d) and np.array_equal(a.joints_3d_rel, b.joints_3d_rel)
        and np.array_equal(a.root_3d, b.root_3d) for a, b in zip(recs, back)) and len(back) == len(recs)
    save_sequence(tmp_path / "s2.jsonl", back, load_masks(tmp_path / "s.jsonl"))
    checks["sequence bytes"] = (tmp_path / "s.jsonl").read_bytes() == (tmp_path / "s2.jsonl").read_bytes()
    checks["masks"] = np.array_equal(load_masks(tmp_path / "s.jsonl")[0], masks[0])
    row = (rng.random(500) < 0.3).astype(float)
    checks["rle"] = np.array_equal(rle_decode(rle_encode(row), 500), row)
    cam = CameraIntrinsics(1145.0494384765625, 512.54150390625, 515.4514770507812)
    save_camera(tmp_path / "c.json", cam)
    checks["camera"] = load_camera(tmp_path / "c.json") == cam
    raw = _trained_checkpoint(tmp_path / "k.npz")
    net, state, extra = load_checkpoint(tmp_path / "k.npz")
    save_checkpoint(tmp_path / "k2.npz", net, state, extra)
    checks["checkpoint"] = (tmp_path / "k2.npz").read_bytes() == raw
    return checks


def _pipeline(tmp_path):
    def run(*argv):
        return main([str(a) for a in argv])

    d = tmp_path / "cli"
    codes = [run("synth", "--out", d / "scene", "--people", 2, "--frames", 200, "--seed", 7,
                 "--action", "walk")]
    data, cam = d / "scene" / "scene.jsonl", d / "scene" / "camera.json"
    masked = d / "masked.jsonl"
    codes.append(run("maskgen", "--input", data, "--out", masked, "--occlusion-ratio", 0.2,
                     "--kernel-k", 5, "--seed", 3))
    codes.append(run("train", "--data", masked, "--camera", cam, "--out", d / "model", "--window", 27,
                     "--channels", 16, "--epochs", 5, "--batch", 64, "--lr", 0.003,
                     "--occlusion-ratio", "0,0.25,0.5", "--kernel-k", 5, "--seed", 1))
    pred = d / "pred.jsonl"
    codes.append(run("infer", "--checkpoint", d / "model" / "checkpoint.npz", "--data", masked,
                     "--camera", cam, "--out", pred))
    trajs = [d / "traj_a.csv", d / "traj_b.csv"]
    for t in trajs:
        codes.append(run("traj", "--poses", pred, "--data", masked, "--camera", cam, "--out", t))
    numbers = {}
    for proto in (1, 2):
        out = d / f"eval{proto}"
        extra = ["--traj", trajs[0]] if proto == 2 else []
        codes.append(run("eval", "--pred", pred, "--gt", data, "--out", out, "--protocol", proto, *extra))
        numbers[proto] = float((out / "report.csv").read_text().splitlines()[-1].split(",")[3])
    roots = load_trajectory(trajs[0])
    checks = {
        "exit codes": codes == [0] * len(codes),
        "traj deterministic": trajs[0].read_bytes() == trajs[1].read_bytes(),
        "traj rows": len(roots) == 400 and all(np.isfinite(v).all() for v in roots.values()),
        "finite P1/P2": all(np.isfinite(v) for v in numbers.values()),
    }
    return checks, numbers


def test_criterion_9_determinism_formats_pipeline(criterion, tmp_path):
    det = _determinism(tmp_path)
    fmt = _round_trips(tmp_path)
    t0 = time.perf_counter()
    cli, numbers = _pipeline(tmp_path)
    seconds = time.perf_counter() - t0
    failed = [f"{group}:{k}" for group, d in (("determinism", det), ("format", fmt), ("cli", cli))
              for k, v in d.items() if not v]
    ok = not failed and seconds < 600
    criterion(9, ok, f"{len(det)} determinism, {len(fmt)} round-trip and {len(cli)} pipeline checks, "
                     f"failed {failed}; pipeline {seconds:.0f}s (<600), P1 {numbers[1]:.1f} mm, "
                     f"P2 {numbers[2]:.1f} mm")
    assert ok
