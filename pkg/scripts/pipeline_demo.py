"""Run synth -> maskgen -> train -> infer -> traj -> eval through the CLI.

    python scripts/pipeline_demo.py --workdir /tmp/gatedlift_demo
"""
import argparse
import sys
from pathlib import Path

from gatedlift.cli import main as cli


def run(*argv) -> None:
    argv = [str(a) for a in argv]
    print("$ gatedlift " + " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, default=Path("demo_run"))
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--people", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()
    d = args.workdir
    scene, cam = d / "scene" / "scene.jsonl", d / "scene" / "camera.json"
    masked, pred, traj = d / "masked.jsonl", d / "pred.jsonl", d / "traj.csv"
    run("synth", "--out", d / "scene", "--people", args.people, "--frames", args.frames, "--seed", 0)
    run("maskgen", "--input", scene, "--out", masked, "--occlusion-ratio", 0.2, "--kernel-k", 5)
    run("train", "--data", masked, "--camera", cam, "--out", d / "model", "--window", 27,
        "--channels", 32, "--epochs", args.epochs, "--batch", 128, "--lr", 0.003,
        "--occlusion-ratio", "0,0.25,0.5", "--kernel-k", 5)
    run("infer", "--checkpoint", d / "model" / "checkpoint.npz", "--data", masked, "--camera", cam,
        "--out", pred)
    run("traj", "--poses", pred, "--data", masked, "--camera", cam, "--out", traj)
    run("eval", "--pred", pred, "--gt", scene, "--out", d / "eval_p1", "--protocol", 1)
    run("eval", "--pred", pred, "--gt", scene, "--out", d / "eval_p2", "--protocol", 2, "--traj", traj)


if __name__ == "__main__":
    main()
