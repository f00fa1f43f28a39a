"""``kvsim`` command line: run one scenario, sweep an axis, or compare policies.

Exit codes: 0 success, 2 configuration error, 3 simulation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ConfigError, ScenarioConfig, load_config
from .engine import BASELINE, LAYERKV, Policy, Simulation, SimulationError
from .kv_manager import ConfigurationError, KVError
from .metrics import MetricsReport

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIM = 3

AXES = ("context_length", "arrival_rate", "dop")
SUMMARY_KEYS = ("mean_ttft_s", "p50_ttft_s", "p99_ttft_s", "mean_queuing_s", "queuing_share",
                "mean_tpot_s", "p99_tpot_s", "throughput_tok_s", "violation_rate",
                "ttft_violations", "tpot_violations", "completed", "rejected", "preemptions",
                "truncated")
COMPARE_POLICIES = (Policy(BASELINE), Policy(LAYERKV), Policy(LAYERKV, slo_scheduler=False))

log = logging.getLogger("kvsim")


# file helpers

def atomic_write(path: Path, text: str) -> None:
    """Write to a sibling temp file and rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


# simulation wrappers

def simulate(cfg: ScenarioConfig, out: Optional[Path] = None, transfer_log: bool = False,
             decision_log: bool = False) -> MetricsReport:
    """Build and run one scenario; raises ConfigError or SimulationError."""
    sc = cfg.build()
    try:
        sim = Simulation(sc, keep_transfer_log=transfer_log)
    except (ConfigurationError, ValueError) as e:
        raise ConfigError(str(e)) from e
    try:
        report = sim.run()
    except (KVError, RuntimeError) as e:
        raise SimulationError(str(e)) from e
    if out is not None:
        if transfer_log:
            out.mkdir(parents=True, exist_ok=True)
            sim.bus.write_log(out / "transfer_log.csv")
        if decision_log:
            out.mkdir(parents=True, exist_ok=True)
            sim.write_decision_log(out / "decision_log.csv")
    return report


def write_run_outputs(out: Path, cfg: ScenarioConfig, report: MetricsReport) -> None:
    s = report.summary()
    atomic_write(out / "requests.csv", report.requests_csv())
    atomic_write(out / "report.json", report.to_json() + "\n")
    atomic_write(out / "effective_config.toml", cfg.to_toml())
    atomic_write(out / "summary.csv", csv_text(("policy",) + SUMMARY_KEYS,
                                               [[cfg.policy.label] + [s[k] for k in SUMMARY_KEYS]]))


def apply_axis(cfg: ScenarioConfig, axis: str, value: float) -> ScenarioConfig:
    w = cfg.workload
    if axis == "context_length":
        if w.kind != "fixed":
            raise ConfigError("context_length sweeps need workload.kind = 'fixed'")
        if value != int(value) or value < 1:
            raise ConfigError(f"context length must be a positive integer, got {value}")
        return replace(cfg, workload=replace(w, prompt_tokens=int(value)))
    if axis == "arrival_rate":
        if w.kind == "trace":
            raise ConfigError("arrival_rate sweeps need a generated workload, not a trace")
        if not value > 0:
            raise ConfigError(f"arrival rate must be > 0, got {value}")
        return replace(cfg, workload=replace(w, rate=float(value)))
    if axis == "dop":
        if value != int(value) or value < 1:
            raise ConfigError(f"dop must be a positive integer, got {value}")
        over = dict(cfg.hardware_overrides, n_gpus=int(value))
        return replace(cfg, hardware_overrides=over)
    raise ConfigError(f"unknown axis {axis!r}; choose from {AXES}")


def _sweep_point(args: Tuple[ScenarioConfig, Path]) -> Tuple[str, Optional[Dict], str]:
    cfg, out = args
    try:
        report = simulate(cfg)
    except ConfigError as e:
        return "config_error", None, str(e)
    except SimulationError as e:
        return "simulation_error", None, str(e)
    write_run_outputs(out, cfg, report)
    return "ok", report.summary(), ""


# commands

def cmd_run(cfg: ScenarioConfig, out: Path, transfer_log: bool, decision_log: bool) -> int:
    report = simulate(cfg, out, transfer_log, decision_log)
    write_run_outputs(out, cfg, report)
    s = report.summary()
    print(f"{cfg.policy.label}: mean TTFT {s['mean_ttft_s']:.4f} s, P99 TTFT {s['p99_ttft_s']:.4f} s, "
          f"mean TPOT {s['mean_tpot_s']:.4f} s, throughput {s['throughput_tok_s']:.1f} tok/s, "
          f"violations {s['violation_rate']:.3f}")
    return EXIT_SIM if report.truncated else EXIT_OK


def cmd_sweep(cfg: ScenarioConfig, out: Path, axis: str, values: Sequence[float],
              jobs: int = 1) -> int:
    if not values:
        raise ConfigError("sweep needs at least one value")
    points = [apply_axis(cfg, axis, v) for v in values]
    tasks = [(p, out / f"{axis}={_fmt_value(v)}") for p, v in zip(points, values)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = []
    for v, (status, s, msg) in zip(values, results):
        if s is None:
            print(f"{axis}={_fmt_value(v)}: {status}: {msg}", file=sys.stderr)
            rows.append([_fmt_value(v), status] + [math.nan] * len(SUMMARY_KEYS))
        else:
            rows.append([_fmt_value(v), status] + [s[k] for k in SUMMARY_KEYS])
    atomic_write(out / "summary.csv", csv_text((axis, "status") + SUMMARY_KEYS, rows))
    atomic_write(out / "effective_config.toml", cfg.to_toml())
    print(f"wrote {out / 'summary.csv'} ({len(rows)} points)")
    statuses = {r[1] for r in rows}
    if statuses == {"ok"}:
        return EXIT_OK
    return EXIT_SIM if "simulation_error" in statuses else EXIT_CONFIG


def _fmt_value(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def compare_rows(summaries: Dict[str, Dict]) -> Tuple[List[str], List[List]]:
    """One row per policy; ratios are taken against the baseline row."""
    base = summaries[BASELINE]

    def ratio(a, b):
        return a / b if b and not math.isnan(b) else math.nan

    header = ["policy", "mean_ttft_s", "p99_ttft_s", "mean_tpot_s", "throughput_tok_s",
              "violation_rate", "ttft_speedup", "p99_ttft_speedup", "throughput_ratio",
              "violation_rate_delta"]
    rows = []
    for label, s in summaries.items():
        rows.append([label, s["mean_ttft_s"], s["p99_ttft_s"], s["mean_tpot_s"],
                     s["throughput_tok_s"], s["violation_rate"],
                     ratio(base["mean_ttft_s"], s["mean_ttft_s"]),
                     ratio(base["p99_ttft_s"], s["p99_ttft_s"]),
                     ratio(s["throughput_tok_s"], base["throughput_tok_s"]),
                     s["violation_rate"] - base["violation_rate"]])
    return header, rows


def cmd_compare(cfg: ScenarioConfig, out: Path) -> int:
    summaries: Dict[str, Dict] = {}
    truncated = False
    for pol in COMPARE_POLICIES:
        c = replace(cfg, policy=pol)
        report = simulate(c)
        truncated |= report.truncated
        atomic_write(out / f"requests_{pol.label}.csv", report.requests_csv())
        summaries[pol.label] = report.summary()
    header, rows = compare_rows(summaries)
    text = csv_text(header, rows)
    atomic_write(out / "summary.csv", text)
    atomic_write(out / "effective_config.toml", cfg.to_toml())
    print(text, end="")
    return EXIT_SIM if truncated else EXIT_OK


# argument handling

def _values(tokens: Sequence[str]) -> List[float]:
    out = []
    for tok in tokens:
        for part in tok.split(","):
            part = part.strip()
            if part:
                try:
                    out.append(float(part))
                except ValueError:
                    raise ConfigError(f"bad sweep value {part!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario TOML file (defaults if omitted)")
    common.add_argument("--policy", choices=(BASELINE, LAYERKV))
    common.add_argument("--no-slo-scheduler", action="store_true",
                        help="layerkv without SLO-aware admission")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--emit-effective-config", action="store_true",
                        help="print the fully resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kvsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="simulate one scenario")
    run.add_argument("--transfer-log", action="store_true", help="write transfer_log.csv")
    run.add_argument("--decision-log", action="store_true", help="write decision_log.csv")
    sw = sub.add_parser("sweep", parents=[common], help="one run per axis value")
    sw.add_argument("--axis", choices=AXES, required=True)
    sw.add_argument("--values", nargs="*", default=[], help="values, space or comma separated")
    sw.add_argument("--jobs", type=int, default=1, help="sweep points run in parallel")
    sub.add_parser("compare", parents=[common], help="baseline vs layerkv vs no-SLO ablation")
    return p


def resolve_config(args: argparse.Namespace) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig.from_dict({})
    if args.policy or args.no_slo_scheduler:
        variant = args.policy or cfg.policy.variant
        slo = not args.no_slo_scheduler and (cfg.policy.slo_scheduler if not args.policy else True)
        cfg = replace(cfg, policy=Policy(variant, slo))
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be in [0, 2**64)")
        cfg = replace(cfg, seed=args.seed)
    out = replace(cfg.output)
    if args.out is not None:
        out = replace(out, dir=str(args.out))
    if getattr(args, "transfer_log", False):
        out = replace(out, transfer_log=True)
    if getattr(args, "decision_log", False):
        out = replace(out, decision_log=True)
    return replace(cfg, output=out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.emit_effective_config:
            sys.stdout.write(cfg.to_toml())
            return EXIT_OK
        out = Path(cfg.output.dir)
        if args.command == "run":
            return cmd_run(cfg, out, cfg.output.transfer_log, cfg.output.decision_log)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.axis, _values(args.values), max(1, args.jobs))
        return cmd_compare(cfg, out)
    except ConfigError as e:
        print(f"kvsim: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as e:
        print(f"kvsim: simulation error: {e}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
