"""Command line entry point: ``handmpc {walk,sweep,bench,maxpush}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from . import experiments as ex

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handmpc", description=__doc__)
    p.add_argument("command", choices=("walk", "sweep", "bench", "maxpush"))
    p.add_argument("--config", help="TOML experiment file (defaults built in)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (u64)")
    p.add_argument("--samples", type=int, help="sweep sample count")
    p.add_argument("--full-scale", action="store_true", help=f"sweep {ex.FULL_SCALE_SAMPLES} samples")
    return p


def cmd_walk(cfg: ExperimentConfig, out: Path, seed: int | None) -> int:
    from .plotting import plot_trace
    from .sim import simulate

    trace = simulate(cfg.scenario(seed=seed))
    trace.write_csv(out / "trace.csv")
    plot_trace(trace, out / "trace.png")
    summary = {
        "fallen": trace.fallen,
        "contacts_used": trace.contacts_used,
        "max_slack_norm": trace.max_slack_norm,
        "saturation_events": trace.saturation_events,
        "duration": trace.rows[-1][0] if trace.rows else 0.0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_FAILED if trace.fallen else EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path, seed, samples) -> int:
    stats, _ = ex.run_sweep(cfg, samples, seed, out / "sweep.csv")
    lines = stats.lines()
    (out / "sweep_summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, out: Path, seed) -> int:
    res = ex.run_bench(cfg, seed, out / "bench.csv")
    print("horizon  contacts  median_ms  p90_ms")
    for h, n, med, p90, _ in res.rows:
        print(f"{h:7d}  {n:8d}  {med:9.3f}  {p90:6.3f}")
    print(f"in-contact force: median {res.in_contact_median_ms:.3f} ms, p90 {res.in_contact_p90_ms:.3f} ms "
          f"(random single-step instances: median {res.in_contact_random_median_ms:.3f} ms)")
    return EXIT_OK


def cmd_maxpush(cfg: ExperimentConfig, out: Path, seed) -> int:
    res = ex.run_maxpush(cfg, seed, out / "maxpush.csv", out / "maxpush.png", log=print)
    for v in cfg.maxpush.variants:
        print(f"{v}-step improvement: {100 * res.improvement(v):.0f}%")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.samples is not None and args.samples < 1:
        print("config error: --samples must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "walk":
        return cmd_walk(cfg, out, args.seed)
    if args.command == "sweep":
        samples = ex.FULL_SCALE_SAMPLES if args.full_scale else args.samples
        return cmd_sweep(cfg, out, args.seed, samples)
    if args.command == "bench":
        return cmd_bench(cfg, out, args.seed)
    return cmd_maxpush(cfg, out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
