"""Command-line front end.

Exit codes: 0 success, 2 configuration/usage error, 3 a simulated run
diverged (artifacts are still written).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .scenario import (ALL_VARIANTS, ConfigError, Scenario, TrajectorySpec, UncertaintySpec,
                       Variant, default_trajectory_battery, scenario_from_config)
from .sim import SimResult, run_batch

log = logging.getLogger("gprobust")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
OUTPUT_ENV = "GPROBUST_OUTPUT_DIR"
DEFAULT_OUTPUT = "gprobust-out"


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_result(result: SimResult, out_dir, series: bool = True) -> None:
    out_dir = Path(out_dir)
    if series:
        buf = io.StringIO()
        result.write_csv(buf)
        atomic_write_text(out_dir / "timeseries.csv", buf.getvalue())
    buf = io.StringIO()
    result.write_summary(buf)
    atomic_write_text(out_dir / "summary.json", buf.getvalue())


def load_yaml(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("<root>", "top level must be a mapping")
    return data


def load_scenario(path, seed=None) -> Scenario:
    scenario = scenario_from_config(load_yaml(path))
    if seed is not None:
        scenario = scenario.replace(seed=seed)
    return scenario


@dataclass
class BenchmarkMatrix:
    """Uncertainty levels x trajectories x variants, all sharing one seed."""

    levels: list = field(default_factory=lambda: [0.1, 0.2, 0.3])
    trajectories: list = field(default_factory=default_trajectory_battery)
    variants: list = field(default_factory=lambda: list(ALL_VARIANTS))
    base: Scenario = field(default_factory=Scenario)
    seed: int = 0

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("levels", "must not be empty")
        if not self.trajectories:
            raise ConfigError("trajectories", "must not be empty")
        if not self.variants:
            raise ConfigError("variants", "must not be empty")
        self.variants = [Variant(v) for v in self.variants]

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkMatrix":
        allowed = {"levels", "trajectories", "variants", "base", "seed"}
        for key in data:
            if key not in allowed:
                raise ConfigError(str(key), "unknown field")
        kwargs = {}
        if "levels" in data:
            kwargs["levels"] = [float(x) for x in _as_list(data["levels"], "levels")]
        if "trajectories" in data:
            trajs = data["trajectories"]
            if trajs == "default":
                kwargs["trajectories"] = default_trajectory_battery()
            else:
                kwargs["trajectories"] = [
                    _sub("trajectories", TrajectorySpec, t) for t in _as_list(trajs, "trajectories")]
        if "variants" in data:
            try:
                kwargs["variants"] = [Variant(v) for v in _as_list(data["variants"], "variants")]
            except ValueError as exc:
                raise ConfigError("variants", str(exc)) from exc
        if "base" in data:
            kwargs["base"] = scenario_from_config(data["base"] or {}, strict=False)
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        base = self.base.to_dict()
        # the matrix supplies these per cell; base keeps the additive terms
        for key in ("trajectory", "variant", "seed"):
            base.pop(key)
        return {
            "levels": list(self.levels),
            "trajectories": [{"amplitude": t.amplitude, "frequency": t.frequency,
                              "form": t.form, "duration": t.duration} for t in self.trajectories],
            "variants": [v.value for v in self.variants],
            "base": base,
            "seed": self.seed,
        }

    def cells(self):
        """``(level, trajectory index, variant, scenario)`` for every cell."""
        u = self.base.uncertainty
        for level in self.levels:
            unc = UncertaintySpec(level, u.additive_c1, u.additive_c2)
            for j, traj in enumerate(self.trajectories):
                for v in self.variants:
                    yield level, j, v, self.base.replace(
                        uncertainty=unc, trajectory=traj, variant=v, seed=self.seed)


def _as_list(x, name):
    if not isinstance(x, list):
        raise ConfigError(name, "expected a list")
    return x


def _sub(name, typ, data):
    if not isinstance(data, dict):
        raise ConfigError(name, "expected a mapping")
    try:
        return typ(**data)
    except TypeError as exc:
        raise ConfigError(name, str(exc)) from exc


def _timing_key(s: Scenario):
    return (s.dt, s.sample_interval, s.n_steps)


def simulate_many(scenarios: list[Scenario], jobs: int = 1) -> list[SimResult]:
    """Run scenarios in shared-timing batches, optionally over ``jobs`` processes.

    Batch rows never interact, so the split does not change any result.
    """
    groups: dict = {}
    for i, s in enumerate(scenarios):
        groups.setdefault(_timing_key(s), []).append(i)
    chunks = []
    for idx in groups.values():
        n = max(1, min(jobs, len(idx)))
        chunks += [list(c) for c in np.array_split(idx, n) if len(c)]
    results: list = [None] * len(scenarios)
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = pool.map(run_batch, [[scenarios[i] for i in c] for c in chunks])
            for c, out in zip(chunks, outs):
                for i, r in zip(c, out):
                    results[i] = r
    else:
        for c in chunks:
            for i, r in zip(c, run_batch([scenarios[i] for i in c])):
                results[i] = r
    return results


def improvement(nominal: float, robust: float) -> float:
    """Relative RMS reduction ``1 - robust / nominal`` in percent."""
    return 100.0 * (1.0 - robust / nominal)


def benchmark_table(matrix: BenchmarkMatrix, summaries: dict) -> list[dict]:
    """One row per level: mean aggregate RMS per variant over the trajectories.

    ``summaries`` maps ``(level, trajectory index, variant)`` to a summary dict.
    A variant with any diverged cell at that level is reported as ``"diverged"``.
    """
    rows = []
    for level in matrix.levels:
        row = {"level": level}
        for v in matrix.variants:
            cells = [summaries[(level, j, v)] for j in range(len(matrix.trajectories))]
            if any(c["diverged"] for c in cells):
                row[v.value] = "diverged"
            else:
                row[v.value] = float(np.mean([c["rms_aggregate"] for c in cells]))
        nom = row.get(Variant.NOMINAL.value)
        rob = row.get(Variant.ROBUST_LEARNING.value)
        if isinstance(nom, float) and isinstance(rob, float) and nom > 0:
            row["improvement_pct"] = improvement(nom, rob)
        rows.append(row)
    return rows


def format_table(rows: list[dict], variants) -> str:
    cols = [v.value for v in variants]
    has_imp = any("improvement_pct" in r for r in rows)
    header = ["level"] + cols + (["improvement"] if has_imp else [])
    lines = [header]
    for r in rows:
        cells = [f"{r['level']:.0%}"]
        for c in cols:
            cells.append(r[c] if isinstance(r[c], str) else f"{r[c]:.5f}")
        if has_imp:
            cells.append(f"{r['improvement_pct']:.1f}%" if "improvement_pct" in r else "-")
        lines.append(cells)
    widths = [max(len(str(line[i])) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(str(x).rjust(w) for x, w in zip(line, widths)) for line in lines)


def _table_csv(rows, variants) -> str:
    buf = io.StringIO()
    fields = ["level"] + [v.value for v in variants] + ["improvement_pct"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", restval="")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cell_name(level: float, j: int, variant: Variant) -> str:
    return f"level{level:g}_traj{j:02d}_{variant.value}"


def monotone_nonincreasing(eps_values, rms_values) -> bool:
    """True when RMS never grows as epsilon shrinks (ties allowed)."""
    order = np.argsort(-np.asarray(eps_values, dtype=float), kind="stable")
    r = np.asarray(rms_values, dtype=float)[order]
    return bool(np.all(np.isfinite(r)) and np.all(np.diff(r) <= 0.0))


def cmd_run(args) -> int:
    scenario = load_scenario(args.config, args.seed)
    result = run_batch([scenario])[0]
    write_result(result, args.output)
    m = result.metrics
    print(f"variant={scenario.variant.value} rms_aggregate={m['rms_aggregate']:.6g} "
          f"rms_steady_state={m['rms_steady_state']:.6g} diverged={result.diverged}")
    if result.diverged:
        print(f"error: run diverged at t={result.t[-1]:.3f} s; partial artifacts written",
              file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_benchmark(args) -> int:
    matrix = BenchmarkMatrix.from_dict(load_yaml(args.matrix))
    if args.seed is not None:
        matrix.seed = args.seed
    cells = list(matrix.cells())
    results = simulate_many([c[3] for c in cells], jobs=args.jobs)
    out = Path(args.output)
    summaries = {}
    for (level, j, v, _), res in zip(cells, results):
        write_result(res, out / "cells" / cell_name(level, j, v), series=args.save_series)
        summaries[(level, j, v)] = res.summary()
        if res.diverged:
            log.warning("cell %s diverged", cell_name(level, j, v))
    rows = benchmark_table(matrix, summaries)
    atomic_write_text(out / "table.csv", _table_csv(rows, matrix.variants))
    atomic_write_text(out / "matrix.yaml", yaml.safe_dump(matrix.to_dict(), sort_keys=False))
    print(format_table(rows, matrix.variants))
    return EXIT_OK


def parse_eps_list(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError("--eps", f"not a list of numbers: {text!r}") from exc
    if len(values) < 2:
        raise ConfigError("--eps", "at least two epsilon values are required")
    if any(not v > 0 for v in values):
        raise ConfigError("--eps", "epsilon values must be positive")
    return values


def cmd_sweep_epsilon(args) -> int:
    eps_values = parse_eps_list(args.eps)
    scenario = load_scenario(args.config, args.seed)
    results = run_batch([scenario.replace(epsilon=e) for e in eps_values])
    out = Path(args.output)
    ss = [r.metrics["rms_steady_state"] for r in results]
    verdict = monotone_nonincreasing(eps_values, ss)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epsilon", "rms_steady_state", "rms_aggregate", "diverged"])
    for e, r in zip(eps_values, results):
        writer.writerow([repr(e), repr(r.metrics["rms_steady_state"]),
                         repr(r.metrics["rms_aggregate"]), r.diverged])
        write_result(r, out / f"eps{e:g}", series=False)
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    report = {"epsilon": eps_values, "rms_steady_state": ss,
              "monotone_nonincreasing": verdict, "verdict": "pass" if verdict else "fail"}
    atomic_write_text(out / "sweep.json", json.dumps(report, indent=2) + "\n")
    for e, v in zip(eps_values, ss):
        print(f"epsilon={e:g} rms_steady_state={v:.6g}")
    print(f"monotonicity: {report['verdict']}")
    if any(r.diverged for r in results):
        return EXIT_DIVERGED
    return EXIT_OK


def default_config(kind: str = "scenario") -> str:
    if kind == "matrix":
        return yaml.safe_dump(BenchmarkMatrix().to_dict(), sort_keys=False)
    return yaml.safe_dump(Scenario().to_dict(), sort_keys=False)


def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)
    parser = argparse.ArgumentParser(
        prog="gprobust",
        description="Simulate GP-based robust learning control of a two-link arm.",
        epilog="exit codes: 0 ok, 2 configuration error, 3 divergence. "
               f"Output directory defaults to ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--print-default-config", nargs="?", const="scenario",
                        choices=["scenario", "matrix"], metavar="{scenario,matrix}",
                        help="print a default config as YAML and exit")
    parser.add_argument("-v", "--verbose", action="store_true")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--output", default=default_out, help="output directory")
    common.add_argument("--seed", type=_u64, default=None, help="override the RNG seed")

    sub = parser.add_subparsers(dest="command")
    p = sub.add_parser("run", parents=[common], help="simulate one scenario")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("benchmark", parents=[common], help="run the comparison matrix")
    p.add_argument("matrix")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--save-series", action="store_true",
                   help="also write each cell's time-series CSV")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sweep-epsilon", parents=[common], help="rerun a scenario over epsilon values")
    p.add_argument("config")
    p.add_argument("--eps", required=True, help="comma- or space-separated epsilon values")
    p.set_defaults(func=cmd_sweep_epsilon)
    return parser


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_default_config:
        sys.stdout.write(default_config(args.print_default_config))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
