"""Command-line experiment runner.

Verbs:
  validate   parse and check a config, echo the resolved values
  run        execute one experiment into an artifact tree
  sweep      run a cartesian grid (alpha, lambda, strategy, n, k,
             weight_mode, seed) and merge a comparison CSV
  report     regenerate CSV summaries from the round artifacts

Exit codes: 0 ok, 1 runtime numeric failure, 2 configuration error.

A run's artifact tree::

    out/
      resolved-config.json    # flat dotted keys; re-runnable as-is
      metrics.csv             # round, client_id, acc, loss_s, loss_r,
                              # loss_total, upload_params, download_params
      summary.json
      rounds/round_0000/      # per-round newline-delimited JSON:
        reports.ndjson        #   metrics rows
        uploads.ndjson        #   what clients sent (prototypes or manifests)
        targets.ndjson        #   what the server sent back
"""

from __future__ import annotations

import argparse
import itertools
import json
import shutil
import sys
from pathlib import Path

from .analysis import (
    RoundReport,
    build_summary,
    read_metrics_csv,
    write_metrics_csv,
    write_summary,
)
from .config import KEYS, SWEEPABLE, parse_config, write_resolved_config
from .errors import (
    ConfigurationError,
    Error,
    IngestionError,
    NumericError,
    PartitionError,
)
from .federation import run_experiment


class RunRecorder:
    """Writes per-round NDJSON artifacts under <out>/rounds/round_NNNN/."""

    def __init__(self, out_dir):
        self.rounds_dir = Path(out_dir) / "rounds"

    def record_round(self, round_index, wire, report):
        round_dir = self.rounds_dir / f"round_{round_index:04d}"
        round_dir.mkdir(parents=True, exist_ok=True)
        self._write_ndjson(round_dir / "reports.ndjson", list(report.rows()))
        if wire.uploads:
            self._write_ndjson(round_dir / "uploads.ndjson", wire.uploads)
        if wire.targets:
            self._write_ndjson(round_dir / "targets.ndjson", wire.targets)

    @staticmethod
    def _write_ndjson(path, records):
        with Path(path).open("w") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _add_config_args(parser):
    parser.add_argument("--config", help="config file (key = value lines, or flat JSON)")
    parser.add_argument(
        "--set",
        dest="assignments",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    parser.add_argument("--strategy")
    parser.add_argument("--alpha")
    parser.add_argument("--lambda", dest="lam")
    parser.add_argument("--weight-mode", dest="weight_mode")
    parser.add_argument("--rounds")
    parser.add_argument("--local-epochs", dest="local_epochs")
    parser.add_argument("--seed")


_FLAG_KEYS = {
    "strategy": "strategy",
    "alpha": "alpha",
    "lam": "lambda",
    "weight_mode": "weight_mode",
    "rounds": "rounds",
    "local_epochs": "local_epochs",
    "seed": "seed",
}


def _overrides_from_args(args) -> dict:
    overrides = {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    for assignment in args.assignments:
        if "=" not in assignment:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {assignment!r}")
        key, value = assignment.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _prepare_out_dir(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigurationError(
                f"output directory {out} is not empty; pass --force to overwrite"
            )
        for name in ("resolved-config.json", "metrics.csv", "summary.json", "sweep.json", "sweep.csv"):
            target = out / name
            if target.exists():
                target.unlink()
        for name in ("rounds", "runs"):
            target = out / name
            if target.exists():
                shutil.rmtree(target)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _execute_run(config, out: Path) -> None:
    write_resolved_config(out / "resolved-config.json", config)
    recorder = RunRecorder(out)
    result = run_experiment(config, sink=recorder)
    write_metrics_csv(out / "metrics.csv", result.round_reports)
    write_summary(
        out / "summary.json",
        build_summary(result.round_reports, result.diag, result.payload_totals),
    )


def cmd_validate(args) -> int:
    config = parse_config(args.config, _overrides_from_args(args))
    from .config import config_to_flat

    print(json.dumps(config_to_flat(config), indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    config = parse_config(args.config, _overrides_from_args(args))
    out = _prepare_out_dir(args.out, args.force)
    _execute_run(config, out)
    rows = read_metrics_csv(out / "metrics.csv")
    final_round = max(r["round"] for r in rows)
    final = [r["acc"] for r in rows if r["round"] == final_round]
    print(f"run complete: {len(rows)} metric rows, final macro accuracy {sum(final) / len(final):.4f}")
    return 0


def _parse_grid(entries) -> dict:
    grid = {}
    for entry in entries:
        if "=" not in entry:
            raise ConfigurationError(f"--grid expects KEY=V1,V2,..., got {entry!r}")
        key, raw_values = entry.split("=", 1)
        key = key.strip()
        if key not in SWEEPABLE:
            raise ConfigurationError(
                f"cannot sweep over {key!r}; sweepable keys: {', '.join(sorted(SWEEPABLE))}"
            )
        values = [v.strip() for v in raw_values.split(",") if v.strip()]
        if not values:
            raise ConfigurationError(f"--grid {key}: no values given")
        grid[key] = values
    if not grid:
        raise ConfigurationError("sweep needs at least one --grid KEY=V1,V2 entry")
    return grid


def _canonical_values(key: str, values) -> list:
    """Validated, de-duplicated values in a listing-order-independent order."""
    dotted = SWEEPABLE[key]
    _, parser, formatter = KEYS[dotted]
    canonical = []
    for value in values:
        try:
            parsed = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"--grid {key}={value!r}: {exc}") from exc
        canonical.append(str(formatter(parsed)))
    unique = sorted(set(canonical), key=lambda v: (0, float(v)) if _is_number(v) else (1, v))
    return unique


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def cmd_sweep(args) -> int:
    base_overrides = _overrides_from_args(args)
    parse_config(args.config, base_overrides)  # validate the base before touching disk
    grid = _parse_grid(args.grid)
    keys = sorted(grid)
    values = {key: _canonical_values(key, grid[key]) for key in keys}

    out = _prepare_out_dir(args.out, args.force)
    (out / "sweep.json").write_text(
        json.dumps({"grid": values, "base_overrides": base_overrides}, indent=2, sort_keys=True) + "\n"
    )
    runs_dir = out / "runs"
    for point in itertools.product(*(values[key] for key in keys)):
        label = ",".join(f"{key}={value}" for key, value in zip(keys, point))
        overrides = dict(base_overrides)
        overrides.update({SWEEPABLE[key]: value for key, value in zip(keys, point)})
        config = parse_config(args.config, overrides)
        run_dir = runs_dir / label
        run_dir.mkdir(parents=True, exist_ok=True)
        _execute_run(config, run_dir)
        print(f"sweep point done: {label}")
    _write_sweep_csv(out, keys)
    print(f"sweep complete: {out / 'sweep.csv'}")
    return 0


def _merged_rows(metrics_rows) -> list:
    by_round = {}
    for row in metrics_rows:
        by_round.setdefault(row["round"], []).append(row)
    merged = []
    for round_index in sorted(by_round):
        rows = by_round[round_index]
        n = len(rows)
        merged.append(
            {
                "round": round_index,
                "macro_acc": sum(r["acc"] for r in rows) / n,
                "mean_loss_s": sum(r["loss_s"] for r in rows) / n,
                "mean_loss_r": sum(r["loss_r"] for r in rows) / n,
                "mean_loss_total": sum(r["loss_total"] for r in rows) / n,
                "upload_params": sum(r["upload_params"] for r in rows),
                "download_params": sum(r["download_params"] for r in rows),
            }
        )
    return merged


SWEEP_METRIC_COLUMNS = (
    "round",
    "macro_acc",
    "mean_loss_s",
    "mean_loss_r",
    "mean_loss_total",
    "upload_params",
    "download_params",
)


def _write_sweep_csv(out: Path, keys) -> None:
    import csv as _csv

    manifest = json.loads((out / "sweep.json").read_text())
    values = manifest["grid"]
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(list(keys) + list(SWEEP_METRIC_COLUMNS))
        for point in itertools.product(*(values[key] for key in keys)):
            label = ",".join(f"{key}={value}" for key, value in zip(keys, point))
            metrics = read_metrics_csv(out / "runs" / label / "metrics.csv")
            for row in _merged_rows(metrics):
                cells = list(point) + [
                    repr(row[c]) if isinstance(row[c], float) else row[c]
                    for c in SWEEP_METRIC_COLUMNS
                ]
                writer.writerow(cells)


def _rebuild_metrics_from_rounds(run_dir: Path) -> None:
    rounds_dir = run_dir / "rounds"
    if not rounds_dir.is_dir():
        raise ConfigurationError(f"{run_dir} has no rounds/ artifacts to report from")
    reports = []
    for round_dir in sorted(rounds_dir.iterdir()):
        rows = [
            json.loads(line)
            for line in (round_dir / "reports.ndjson").read_text().splitlines()
            if line.strip()
        ]
        if not rows:
            continue
        reports.append(
            RoundReport(
                round=rows[0]["round"],
                acc={r["client_id"]: r["acc"] for r in rows},
                loss_s={r["client_id"]: r["loss_s"] for r in rows},
                loss_r={r["client_id"]: r["loss_r"] for r in rows},
                loss_total={r["client_id"]: r["loss_total"] for r in rows},
                upload_params={r["client_id"]: r["upload_params"] for r in rows},
                download_params={r["client_id"]: r["download_params"] for r in rows},
            )
        )
    write_metrics_csv(run_dir / "metrics.csv", reports)


def cmd_report(args) -> int:
    out = Path(args.out)
    if (out / "sweep.json").exists():
        manifest = json.loads((out / "sweep.json").read_text())
        keys = sorted(manifest["grid"])
        for point in itertools.product(*(manifest["grid"][key] for key in keys)):
            label = ",".join(f"{key}={value}" for key, value in zip(keys, point))
            _rebuild_metrics_from_rounds(out / "runs" / label)
        _write_sweep_csv(out, keys)
        print(f"regenerated {out / 'sweep.csv'}")
    else:
        _rebuild_metrics_from_rounds(out)
        print(f"regenerated {out / 'metrics.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfpl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a config and echo the resolved values")
    _add_config_args(p_validate)
    p_validate.set_defaults(func=cmd_validate)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_config_args(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid of experiments")
    _add_config_args(p_sweep)
    p_sweep.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="KEY=V1,V2",
        help="sweep dimension (repeatable); keys: " + ", ".join(sorted(SWEEPABLE)),
    )
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--force", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="regenerate CSV summaries from artifacts")
    p_report.add_argument("--out", required=True, help="run or sweep directory")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError, PartitionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
