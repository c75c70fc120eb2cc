"""Command-line front end: run experiments, summarize transitions, export plot data."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import diagnostics
from .config import ConfigError, RunConfig, add_flags, parse_config, prepare_run
from .datahub import DataError
from .numkit import derive_stream
from .server import RunLog, _pooled, run_sessions

log = logging.getLogger("fedwarm")

METRICS_HEADER = (
    "session", "round_in_session", "global_round", "phase", "variant", "train_loss", "test_accuracy",
    "grad_norm_sq", "eta", "comm_up", "comm_down", "epochs_this_round", "wall_ms",
)
_INT_COLS = {"session", "round_in_session", "global_round", "comm_up", "comm_down", "epochs_this_round", "wall_ms"}
_STR_COLS = {"phase", "variant"}


# ------------------------------------------------------------------ metrics io


def _cell(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def metrics_rows(run_log: RunLog) -> list[list[str]]:
    return [[_cell(getattr(r, k)) for k in METRICS_HEADER] for r in run_log.records]


def write_metrics(rows: list[list[str]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if tuple(reader.fieldnames) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        out = []
        for row in reader:
            out.append({
                k: (v if k in _STR_COLS else int(v) if k in _INT_COLS else float(v)) for k, v in row.items()
            })
        return out


# ------------------------------------------------------------ summaries


def transition_means(rows: list[dict], N: int) -> dict[str, dict[int, float]]:
    """``{variant: {session: mean accuracy over its first N train rounds}}`` for sessions >= 1."""
    if N < 1:
        raise ValueError("transition window N must be >= 1")
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in sorted((r for r in rows if r["phase"] == "train"), key=lambda r: (r["session"], r["round_in_session"])):
        if r["session"] >= 1 and r["round_in_session"] < N:
            acc[r["variant"]][r["session"]].append(r["test_accuracy"])
    return {v: {s: float(np.mean(a)) for s, a in sorted(per.items())} for v, per in acc.items()}


def _schedule_signature(rows: list[dict]) -> dict[int, int]:
    """Train rounds per session, required to be identical for every variant."""
    counts: dict[str, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for r in rows:
        if r["phase"] == "train":
            counts[r["variant"]][r["session"]] += 1
    sigs = {v: dict(sorted(c.items())) for v, c in counts.items()}
    distinct = {json.dumps(s) for s in sigs.values()}
    if len(distinct) > 1:
        raise ValueError(f"variants disagree on the session schedule: {sigs}")
    return next(iter(sigs.values()), {})


@dataclasses.dataclass
class TransitionTable:
    window: int
    sessions: list[int]
    variants: list[str]
    cells: dict[tuple[int, str], float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["session"] + self.variants)
        for s in self.sessions:
            w.writerow([s] + [repr(self.cells[(s, v)]) if (s, v) in self.cells else "" for v in self.variants])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["session"] + self.variants
        body = [[str(s)] + [f"{100 * self.cells[(s, v)]:.2f}" if (s, v) in self.cells else "-" for v in self.variants]
                for s in self.sessions]
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        lines = ["  ".join(cell.rjust(wd) for cell, wd in zip(row, widths)) for row in [head] + body]
        return f"transition accuracy (%), mean of the first {self.window} rounds\n" + "\n".join(lines) + "\n"


def transition_table(files, N: int = 10) -> TransitionTable:
    """Per transition and variant, mean test accuracy of the first ``N`` train rounds."""
    if N < 1:
        raise ValueError("transition window N must be >= 1")
    files = [files] if isinstance(files, (str, Path)) else list(files)
    if not files:
        raise ValueError("need at least one metrics file")
    parts, reference = [], None
    for f in files:
        part = read_metrics(f)
        sig = _schedule_signature(part)
        if reference is None:
            reference = (f, sig)
        elif sig != reference[1]:
            raise ValueError(f"{f} and {reference[0]} were produced with different session schedules")
        parts.append((Path(f), part))
    seen = [r["variant"] for _, part in parts for r in part if r["phase"] == "train"]
    clash = len(parts) > 1 and sum(len({r["variant"] for r in part}) for _, part in parts) > len(set(seen))
    rows = []
    for f, part in parts:
        for r in part:
            # the same variant in several files (an R sweep, say) gets the run directory as a suffix
            rows.append({**r, "variant": f"{r['variant']}[{f.parent.name}]"} if clash else r)
    means = transition_means(rows, N)
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    sessions = sorted({s for per in means.values() for s in per})
    cells = {(s, v): means[v][s] for v in means for s in means[v]}
    return TransitionTable(N, sessions, variants, cells)


def emit_plotdata(metrics_path, out=None) -> str:
    """Long-format ``variant,session,global_round,test_accuracy`` of train rounds, by global round."""
    rows = [r for r in read_metrics(metrics_path) if r["phase"] == "train"]
    rows.sort(key=lambda r: r["global_round"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "session", "global_round", "test_accuracy"])
    for r in rows:
        w.writerow([r["variant"], r["session"], r["global_round"], repr(r["test_accuracy"])])
    text = buf.getvalue()
    if out is not None:
        Path(out).write_text(text)
    return text


# ------------------------------------------------------------ experiments


def estimate_constants(cfg: RunConfig, spec, sessions, run_log: RunLog) -> diagnostics.BoundConstants:
    """Probe-based constants on the final session's clients around the final model."""
    rng = derive_stream(cfg.seed, ("bound",))
    clients = sessions[-1].clients
    w_final = run_log.session_models[-1]
    D = np.array([len(c) for c in clients], dtype=np.float64)
    beta = diagnostics.estimate_beta(spec, _pooled(clients), cfg.bound_probes, 1e-3, rng, center=w_final, scale=0.5)
    theta = diagnostics.estimate_theta_round(spec, w_final, clients, 50 * cfg.bound_probes, rng)
    zeta1, zeta2 = diagnostics.estimate_zeta(spec, clients, D / D.sum(), run_log.session_models)
    return diagnostics.BoundConstants(beta=max(beta, 1e-12), zeta1=zeta1, zeta2=zeta2, theta_g=theta,
                                      lambda_g=cfg.bound_lambda)


def _config_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else ({str(k): x for k, x in v.items()} if isinstance(v, dict) else v)
    return out


def run_experiment(cfg: RunConfig) -> dict[str, Path]:
    """Run every configured variant and write metrics.csv, summary.json, bound_report.json."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec, sessions, schedule, settings = prepare_run(cfg)
    rounds = [schedule.rounds_in(s) for s in range(schedule.num_sessions)]
    rows: list[list[str]] = []
    variants: dict[str, dict] = {}
    bounds: dict[str, dict] = {}
    for variant in cfg.variants:
        log.info("running variant %s", variant)
        try:
            run_log = run_sessions(spec, sessions, schedule.pilot_sessions, rounds, settings, variant)
        except Exception as exc:
            raise RuntimeError(f"variant {variant!r} failed: {exc}") from exc
        rows.extend(metrics_rows(run_log))
        warm = variant in diagnostics.WARM_VARIANTS
        closed = diagnostics.cost_account(schedule, settings, variant, spec.param_count)
        train = run_log.train_records()
        variants[variant] = {
            "final_accuracy": {str(s): _nullable(r.test_accuracy) for s, r in _last_per_session(train).items()},
            "similarity_scale": settings.R if warm else None,
            "num_round_grad_cal": settings.V if warm else None,
            "alphas": {str(s): a for s, a in run_log.alphas.items()} if warm else None,
            "costs": {"closed_form": closed.to_dict(), "simulated": diagnostics.simulated_costs(run_log)},
        }
        try:
            const = estimate_constants(cfg, spec, sessions, run_log)
            bounds[variant] = diagnostics.bound_report(run_log, const, schedule)
        except ValueError as exc:
            bounds[variant] = {"error": str(exc)}

    metrics_path = out_dir / "metrics.csv"
    write_metrics(rows, metrics_path)
    parsed = read_metrics(metrics_path)
    means = transition_means(parsed, cfg.transition_window)
    for v, per in means.items():
        variants[v]["transition_accuracy"] = {str(s): _nullable(x) for s, x in per.items()}
        finite = [x for x in per.values() if np.isfinite(x)]
        variants[v]["mean_transition_accuracy"] = float(np.mean(finite)) if finite else None
    for v in variants:
        variants[v].setdefault("transition_accuracy", {})
        variants[v].setdefault("mean_transition_accuracy", None)

    summary = {
        "schema": 1,
        "seed": cfg.seed,
        "transition_window": cfg.transition_window,
        "config": _config_dict(cfg),
        "schedule": schedule.to_dict(),
        "variants": variants,
    }
    summary_path = out_dir / "summary.json"
    _write_json(summary, summary_path)
    bound_path = out_dir / "bound_report.json"
    _write_json({"schema": 1, "variants": bounds}, bound_path)
    return {"metrics.csv": metrics_path, "summary.json": summary_path, "bound_report.json": bound_path}


def _nullable(x):
    return float(x) if x is not None and np.isfinite(x) else None


def _last_per_session(records) -> dict:
    out = {}
    for r in records:
        out[r.session] = r
    return out


def _write_json(obj, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedwarm", description="Session-based federated learning with warm starts.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment (all listed variants)")
    add_flags(run)
    sweep = sub.add_parser("sweep", help="run the proposed variant once per similarity scale R")
    sweep.add_argument("--scales", required=True, help="comma list of R values, e.g. 0,1,10,100")
    add_flags(sweep)
    table = sub.add_parser("table", help="transition-accuracy table from metrics files")
    table.add_argument("files", nargs="+")
    table.add_argument("--window", type=int, default=10, help="rounds averaged after each transition (default: 10)")
    table.add_argument("--csv", dest="csv_out", help="also write the table as CSV here")
    plot = sub.add_parser("plotdata", help="long-format accuracy curve data from a metrics file")
    plot.add_argument("file")
    plot.add_argument("--out", help="write here instead of stdout")
    return parser


def _run_args(ns: argparse.Namespace) -> dict:
    skip = {"command", "scales", "files", "window", "csv_out", "file", "out"}
    return {k: v for k, v in vars(ns).items() if k not in skip}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    ns = build_parser().parse_args(argv)
    try:
        if ns.command == "run":
            paths = run_experiment(parse_config(_run_args(ns)))
            for name, p in paths.items():
                print(f"{name}: {p}")
        elif ns.command == "sweep":
            base = parse_config(_run_args(ns))
            try:
                scales = [float(v) for v in ns.scales.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"--scales must be a comma list of numbers, got {ns.scales!r}") from None
            files = []
            for R in scales:
                cfg = dataclasses.replace(base, similarity_scale=R, variant=("proposed",),
                                          output_dir=str(Path(base.output_dir) / f"R={R:g}"))
                files.append(run_experiment(cfg)["metrics.csv"])
                print(f"R={R:g}: {files[-1]}")
        elif ns.command == "table":
            tab = transition_table(ns.files, ns.window)
            sys.stdout.write(tab.to_text())
            if ns.csv_out:
                Path(ns.csv_out).write_text(tab.to_csv())
        elif ns.command == "plotdata":
            text = emit_plotdata(ns.file, ns.out)
            if ns.out is None:
                sys.stdout.write(text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
