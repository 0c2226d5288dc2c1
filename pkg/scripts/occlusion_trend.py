"""Train gated and plain lifters identically, score them at several occlusion ratios.

    python scripts/occlusion_trend.py --seeds 0 1 2
"""
import argparse

from gatedlift.experiments import TrendConfig, run_occlusion_trend


def main() -> None:
    d = TrendConfig()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(d.seeds))
    ap.add_argument("--modes", nargs="+", default=list(d.modes),
                    choices=["two_stream", "single_stream", "plain"])
    ap.add_argument("--test-ratios", type=float, nargs="+", default=list(d.test_ratios))
    ap.add_argument("--train-ratios", type=float, nargs="+", default=list(d.train_ratios))
    ap.add_argument("--fill", default=d.fill, choices=["zero", "interp"])
    ap.add_argument("--epochs", type=int, default=d.epochs)
    ap.add_argument("--channels", type=int, default=d.channels)
    ap.add_argument("--train-people", type=int, default=d.train_people)
    args = ap.parse_args()
    cfg = TrendConfig(seeds=tuple(args.seeds), modes=tuple(args.modes),
                      test_ratios=tuple(args.test_ratios), train_ratios=tuple(args.train_ratios),
                      fill=args.fill, epochs=args.epochs, channels=args.channels,
                      train_people=args.train_people)
    res = run_occlusion_trend(cfg, log=print)
    print(res.table())
    print(f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
