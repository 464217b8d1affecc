"""Metrics, communication-cost accounting, and convergence diagnostics.

The convergence diagnostics estimate the smoothness/gradient constants from
observed trajectories (max gradient norm, std of gradient norms, max
parameter-to-output change ratios) and evaluate the step-size/regularizer
thresholds with them. They are order-of-magnitude checks, reported rather
than asserted, except for the monotone-decrease fraction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EvaluationError
from .numeric_core import Model, forward_features, forward_logits

PROTOTYPE_STRATEGIES = ("pfpl", "global_proto", "unbiased_proto")

METRICS_COLUMNS = (
    "round",
    "client_id",
    "acc",
    "loss_s",
    "loss_r",
    "loss_total",
    "upload_params",
    "download_params",
)


def evaluate(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-logit predictions matching labels.

    Ties break toward the lowest class index (argmax picks the first max).
    """
    inputs = np.asarray(inputs, dtype=float)
    labels = np.asarray(labels)
    if inputs.shape[0] == 0:
        raise EvaluationError("cannot evaluate on an empty test set")
    logits = forward_logits(model, forward_features(model, inputs))
    predictions = np.argmax(logits, axis=1)
    return float(np.mean(predictions == labels))


@dataclass
class CommCost:
    """Per-round, per-client payload sizes in scalars (8 bytes each)."""

    upload_params: dict  # client_id -> scalar count
    download_params: dict

    @property
    def upload_bytes(self) -> dict:
        return {cid: 8 * n for cid, n in self.upload_params.items()}

    @property
    def download_bytes(self) -> dict:
        return {cid: 8 * n for cid, n in self.download_params.items()}

    @property
    def total_upload(self) -> int:
        return sum(self.upload_params.values())

    @property
    def total_download(self) -> int:
        return sum(self.download_params.values())


def comm_cost(strategy_variant: str, model: Model, prototype_sets: dict) -> CommCost:
    """What each client moves per round under the given strategy.

    Prototype strategies move one d-vector per held class in each direction;
    FedAvg moves the full parameter vector both ways; local-only moves
    nothing.
    """
    upload = {}
    download = {}
    for cid, ps in prototype_sets.items():
        if strategy_variant in PROTOTYPE_STRATEGIES:
            scalars = sum(entry.centroid.size for entry in ps.entries.values())
            upload[cid] = scalars
            download[cid] = scalars
        elif strategy_variant == "fedavg":
            upload[cid] = model.param_count
            download[cid] = model.param_count
        else:  # local_only
            upload[cid] = 0
            download[cid] = 0
    return CommCost(upload, download)


@dataclass
class RoundReport:
    round: int
    acc: dict  # client_id -> test accuracy
    loss_s: dict
    loss_r: dict
    loss_total: dict
    upload_params: dict
    download_params: dict

    @property
    def macro_acc(self) -> float:
        return float(np.mean([self.acc[cid] for cid in sorted(self.acc)]))

    def rows(self):
        for cid in sorted(self.acc):
            yield {
                "round": self.round,
                "client_id": cid,
                "acc": self.acc[cid],
                "loss_s": self.loss_s[cid],
                "loss_r": self.loss_r[cid],
                "loss_total": self.loss_total[cid],
                "upload_params": self.upload_params[cid],
                "download_params": self.download_params[cid],
            }


def write_metrics_csv(path, round_reports: list) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for report in round_reports:
            for row in report.rows():
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRICS_COLUMNS])


def read_metrics_csv(path) -> list:
    """Rows back as dicts with numeric fields restored."""
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "round": int(row["round"]),
                    "client_id": int(row["client_id"]),
                    "acc": float(row["acc"]),
                    "loss_s": float(row["loss_s"]),
                    "loss_r": float(row["loss_r"]),
                    "loss_total": float(row["loss_total"]),
                    "upload_params": int(row["upload_params"]),
                    "download_params": int(row["download_params"]),
                }
            )
    return rows


@dataclass
class DiagSamples:
    """Per-round measurements collected while an experiment runs.

    grad_norms[t][cid] is the list of batch gradient norms client cid saw in
    training round t+1. embedding_ratios / gradient_ratios hold, per round
    transition, the observed ||f(w1,x)-f(w2,x)|| / ||w1-w2|| and
    ||g1-g2|| / ||w1-w2|| ratios on a fixed probe batch.
    """

    grad_norms: list = field(default_factory=list)
    embedding_ratios: list = field(default_factory=list)
    gradient_ratios: list = field(default_factory=list)


@dataclass
class ConvergenceDiag:
    grad_norm_estimates: list  # per round: client_id -> mean batch grad norm
    sigma_hat: float  # std of sampled gradient norms
    g_hat: float  # max sampled gradient norm
    l1_hat: float  # estimated gradient-Lipschitz constant
    l2_hat: float  # estimated embedding-Lipschitz constant
    lambda_bound: float  # tightest estimated regularizer-weight threshold
    lambda_bound_per_round: list
    lambda_flagged_rounds: list  # rounds where the configured weight exceeds the bound
    monotone_fraction: float
    monotone_fraction_per_client: dict
    one_round_decrease_bound: list  # informational, per round


def convergence_diag(
    loss_history: list,
    samples: DiagSamples,
    *,
    lam: float,
    local_epochs: int,
    lr: float,
):
    """Diagnostics over >= 2 training rounds; returns None when unavailable.

    loss_history[t][cid] is client cid's mean total loss in round t+1.
    """
    if len(loss_history) < 2:
        return None

    all_norms = [n for per_client in samples.grad_norms for norms in per_client.values() for n in norms]
    g_hat = float(max(all_norms)) if all_norms else 0.0
    sigma_hat = float(np.std(all_norms, ddof=1)) if len(all_norms) > 1 else 0.0

    emb_ratios = [r for per_client in samples.embedding_ratios for r in per_client.values()]
    grad_ratios = [r for per_client in samples.gradient_ratios for r in per_client.values()]
    l2_hat = float(max(emb_ratios)) if emb_ratios else float("nan")
    l1_hat = float(max(grad_ratios)) if grad_ratios else float("nan")

    grad_norm_estimates = [
        {cid: float(np.mean(norms)) for cid, norms in sorted(per_client.items())}
        for per_client in samples.grad_norms
    ]

    clients = sorted(loss_history[0])
    decreases = {cid: 0 for cid in clients}
    transitions = max(len(loss_history) - 1, 0)
    for prev, cur in zip(loss_history, loss_history[1:]):
        for cid in clients:
            if cur[cid] < prev[cid]:
                decreases[cid] += 1
    per_client_fraction = {
        cid: (decreases[cid] / transitions if transitions else 0.0) for cid in clients
    }
    monotone_fraction = float(np.mean(list(per_client_fraction.values()))) if clients else 0.0

    # threshold on the regularizer weight: ||grad at round start||^2 / (L2 E G)
    lambda_bounds = []
    flagged = []
    denom = l2_hat * local_epochs * g_hat
    for t, per_client in enumerate(samples.grad_norms):
        if not np.isfinite(denom) or denom <= 0:
            lambda_bounds.append(float("nan"))
            continue
        first_norms = [norms[0] for norms in per_client.values() if norms]
        if not first_norms:
            lambda_bounds.append(float("nan"))
            continue
        bound = min(n * n for n in first_norms) / denom
        lambda_bounds.append(float(bound))
        if lam > bound:
            flagged.append(t + 1)
    finite_bounds = [b for b in lambda_bounds if np.isfinite(b)]
    lambda_bound = float(min(finite_bounds)) if finite_bounds else float("nan")

    # informational expected one-round decrease with estimated constants
    one_round = []
    for per_client in samples.grad_norms:
        sq_sums = [sum(n * n for n in norms) for norms in per_client.values()]
        mean_sq = float(np.mean(sq_sums)) if sq_sums else 0.0
        if np.isfinite(l1_hat) and np.isfinite(l2_hat):
            value = (
                (lr - l1_hat * lr * lr / 2.0) * mean_sq
                - l1_hat * local_epochs * lr * lr * sigma_hat * sigma_hat / 2.0
                - lam * l2_hat * lr * local_epochs * g_hat
            )
            one_round.append(float(value))
        else:
            one_round.append(float("nan"))

    return ConvergenceDiag(
        grad_norm_estimates=grad_norm_estimates,
        sigma_hat=sigma_hat,
        g_hat=g_hat,
        l1_hat=l1_hat,
        l2_hat=l2_hat,
        lambda_bound=lambda_bound,
        lambda_bound_per_round=lambda_bounds,
        lambda_flagged_rounds=flagged,
        monotone_fraction=monotone_fraction,
        monotone_fraction_per_client=per_client_fraction,
        one_round_decrease_bound=one_round,
    )


def diag_to_dict(diag) -> dict:
    if diag is None:
        return {"available": False}
    return {
        "available": True,
        "sigma_hat": diag.sigma_hat,
        "g_hat": diag.g_hat,
        "l1_hat": diag.l1_hat,
        "l2_hat": diag.l2_hat,
        "lambda_bound": diag.lambda_bound,
        "lambda_bound_per_round": diag.lambda_bound_per_round,
        "lambda_flagged_rounds": diag.lambda_flagged_rounds,
        "monotone_fraction": diag.monotone_fraction,
        "monotone_fraction_per_client": {
            str(cid): frac for cid, frac in sorted(diag.monotone_fraction_per_client.items())
        },
        "one_round_decrease_bound": diag.one_round_decrease_bound,
    }


def build_summary(round_reports: list, diag, payload_totals: dict) -> dict:
    final = round_reports[-1]
    return {
        "rounds": len(round_reports) - 1,
        "macro_acc_per_round": [r.macro_acc for r in round_reports],
        "final_macro_acc": final.macro_acc,
        "final_accuracy_per_client": {str(cid): final.acc[cid] for cid in sorted(final.acc)},
        "payload_totals": payload_totals,
        "diagnostics": diag_to_dict(diag),
    }


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
