"""Command line entry point: ``run``, ``estimate`` and ``sweep``."""
import argparse
import json
import sys
from pathlib import Path

from .harness import (ConfigError, emit_csv, estimation_csv, parse_config, run_estimation_study,
                      run_experiment)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bandit-control",
                                description="Bandit control experiments on linear dynamical systems.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")
        sp.add_argument("--threads", type=int, help="worker threads (default: BANDIT_CONTROL_THREADS)")

    run = sub.add_parser("run", help="run every controller on every seed and write CSVs")
    common(run)
    run.add_argument("--out", help="output directory (default: config out_dir)")

    est = sub.add_parser("estimate", help="system-identification error study")
    common(est)
    est.add_argument("--out", help="write estimation.csv here instead of stdout")

    sw = sub.add_parser("sweep", help="run with a list of learning-rate multipliers")
    common(sw)
    sw.add_argument("--param", required=True, choices=["eta_multiplier"])
    sw.add_argument("--values", type=float, nargs="+", required=True)
    sw.add_argument("--out", help="output directory (default: config out_dir)")
    return p


def _summary_line(report) -> str:
    lines = []
    for (noise, label), stats in report.aggregate().items():
        lines.append(f"{noise:14s} {label:22s} total={stats['total_cost_mean']:.4f}"
                     f"±{stats['total_cost_std']:.4f} final_quarter={stats['final_quarter_mean']:.4f}"
                     f" regret={stats['regret_fro_mean']:.4f}")
    return "\n".join(lines)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text())
        if args.command == "sweep":
            raw["eta_multipliers"] = list(args.values)
        config = parse_config(raw, args.seeds)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"invalid experiment config: {args.config}: {exc}", file=sys.stderr)
        return 2

    if args.command == "estimate":
        text = estimation_csv(run_estimation_study(config))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "estimation.csv").write_text(text)
        else:
            sys.stdout.write(text)
        return 0

    out_dir = args.out or config.out_dir
    if not out_dir:
        print("no output directory: pass --out or set out_dir in the config", file=sys.stderr)
        return 2
    report = run_experiment(config, args.threads)
    paths = emit_csv(report, out_dir)
    print(_summary_line(report))
    print(f"wrote {len(paths)} files to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
