"""Round orchestration: local updates with the prototype-regularized loss,
prototype upload, server-side aggregation, and the baseline strategies.

Strategies:
  pfpl            prototype exchange with per-client personalized targets
  global_proto    prototype exchange with count-weighted global targets
  unbiased_proto  prototype exchange with unweighted-mean targets
  fedavg          full parameter averaging, weighted by client data size
  local_only      no communication at all

Under the prototype strategies only PrototypeSets cross the client/server
boundary; model parameters stay inside the client records. All server
aggregation reduces clients in ascending id order, so client iteration
order cannot change the post-aggregation state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    CommCost,
    DiagSamples,
    RoundReport,
    comm_cost,
    convergence_diag,
    evaluate,
)
from .config import ExperimentConfig, build_pools, make_partition_plan
from .data_domains import ClientDataset, partition
from .errors import ConfigurationError, NumericError, ProtocolError
from .numeric_core import (
    Batch,
    Model,
    OptimizerState,
    backward,
    cross_entropy,
    forward_features,
    forward_logits,
    init_model,
    sgd_step,
)
from .prototypes import (
    PersonalizedTargets,
    PrototypeSet,
    cluster_by_class,
    compute_local_prototypes,
    global_prototype,
    personalized_prototype,
    prototype_set_to_doc,
    targets_to_doc,
    unbiased_prototype,
)
from .prototypes import WEIGHT_MODES
from .rng import derive_seed, substream

VARIANTS = ("pfpl", "global_proto", "unbiased_proto", "fedavg", "local_only")
PROTOTYPE_VARIANTS = ("pfpl", "global_proto", "unbiased_proto")


@dataclass(frozen=True)
class Strategy:
    variant: str
    alpha: float = 0.5
    lam: float = 1.0
    weight_mode: str = "similarity"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown strategy {self.variant!r}, expected one of {VARIANTS}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigurationError(
                f"unknown weight_mode {self.weight_mode!r}, expected one of {WEIGHT_MODES}"
            )
        if self.uses_prototypes():
            if self.lam < 0:
                raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
            if self.variant == "pfpl" and not 0.0 <= self.alpha <= 1.0:
                raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")

    def uses_prototypes(self) -> bool:
        return self.variant in PROTOTYPE_VARIANTS


@dataclass
class ClientState:
    client_id: int
    model: Model
    opt: OptimizerState
    data: ClientDataset
    prototypes: PrototypeSet | None = None


@dataclass
class FederationState:
    round: int
    clients: list  # ClientState
    server_targets: dict  # client_id -> PersonalizedTargets
    root_seed: int


@dataclass
class LocalUpdateReport:
    client_id: int
    loss_s: float  # mean cross-entropy over the round
    loss_r: float  # mean prototype-distance regularizer over the round
    loss_total: float  # loss_s + lambda * loss_r
    samples_seen: int
    prototypes: PrototypeSet
    grad_norms: list = field(default_factory=list)  # per-batch, diagnostic


@dataclass
class RoundWire:
    """JSON-ready records of what crossed the wire this round."""

    uploads: list
    targets: list


def local_update(
    client: ClientState,
    targets: PersonalizedTargets | None,
    strategy: Strategy,
    local_epochs: int,
    batch_size: int,
    rng: np.random.Generator,
):
    """Mini-batch SGD on cross-entropy plus the prototype-distance term.

    Each batch's regularizer is the mean, over all batch samples, of the
    squared distance between the sample's embedding and the target prototype
    of its label; samples whose label has no target contribute nothing. The
    prototype set is recomputed with the updated model afterwards. Returns
    (updated ClientState, LocalUpdateReport).
    """
    lam = strategy.lam if strategy.uses_prototypes() else 0.0
    target_entries = dict(targets.entries) if targets is not None else {}
    model, opt = client.model, client.opt
    xs, ys = client.data.train_x, client.data.train_y
    n = xs.shape[0]

    sum_ls = 0.0
    sum_lr = 0.0
    seen = 0
    grad_norms = []
    batch_index = 0
    for _ in range(max(int(local_epochs), 0)):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = xs[idx], ys[idx]
            h = forward_features(model, xb)
            logits = forward_logits(model, h)
            ls, _ = cross_entropy(logits, yb)

            lr_val = 0.0
            extra = None
            if target_entries:
                mask = np.array([int(label) in target_entries for label in yb])
                if mask.any():
                    tmat = np.stack([target_entries[int(label)] for label in yb[mask]])
                    diffs = np.zeros_like(h)
                    diffs[mask] = h[mask] - tmat
                    lr_val = float(np.sum(diffs * diffs) / len(yb))
                    if lam > 0.0:
                        extra = lam * 2.0 * diffs / len(yb)

            total = ls + lam * lr_val
            if not np.isfinite(total):
                raise NumericError(
                    f"client {client.client_id}, batch {batch_index}: non-finite loss {total}"
                )

            try:
                grads = backward(model, Batch(xb, yb), extra)
                grad_norms.append(grads.norm())
                model, opt = sgd_step(model, grads, opt)
            except NumericError as exc:
                raise NumericError(
                    f"client {client.client_id}, batch {batch_index}: {exc}"
                ) from exc

            sum_ls += ls * len(yb)
            sum_lr += lr_val * len(yb)
            seen += len(yb)
            batch_index += 1

    mean_ls = sum_ls / seen if seen else 0.0
    mean_lr = sum_lr / seen if seen else 0.0
    new_protos = compute_local_prototypes(model, client.data)
    report = LocalUpdateReport(
        client_id=client.client_id,
        loss_s=mean_ls,
        loss_r=mean_lr,
        loss_total=mean_ls + lam * mean_lr,
        samples_seen=seen,
        prototypes=new_protos,
        grad_norms=grad_norms,
    )
    new_client = ClientState(client.client_id, model, opt, client.data, new_protos)
    return new_client, report


def _model_from_arrays(template: Model, arrays: list) -> Model:
    rebuilt = template.copy()
    it = iter(arrays)
    for layer in rebuilt.layers():
        layer.weights = next(it)
        layer.bias = next(it)
    return rebuilt


def _param_manifest(model: Model) -> list:
    manifest = []
    for layer in model.layers():
        manifest.append({"shape": list(layer.weights.shape), "count": int(layer.weights.size)})
        manifest.append({"shape": list(layer.bias.shape), "count": int(layer.bias.size)})
    return manifest


def run_round(state: FederationState, strategy: Strategy, *, local_epochs: int = 1, batch_size: int = 4):
    """One communication round.

    Every client trains against the previous round's targets, then uploads
    its prototype set (or, under fedavg, its parameters); the server
    aggregates and prepares the next round's targets or broadcast model.
    Returns (new state, {client_id: LocalUpdateReport}, CommCost, RoundWire).
    """
    round_index = state.round + 1
    new_clients = []
    reports = {}
    for client in state.clients:
        targets = state.server_targets.get(client.client_id)
        if targets is not None and targets.owner != client.client_id:
            raise ProtocolError(
                f"targets owned by client {targets.owner} delivered to client {client.client_id}"
            )
        rng = substream(state.root_seed, "shuffle", client.client_id, round_index)
        new_client, report = local_update(client, targets, strategy, local_epochs, batch_size, rng)
        new_clients.append(new_client)
        reports[client.client_id] = report

    by_id = {c.client_id: c for c in new_clients}
    proto_sets = {cid: by_id[cid].prototypes for cid in sorted(by_id)}
    server_targets: dict = {}
    uploads: list = []
    target_docs: list = []

    if strategy.uses_prototypes():
        clusters = cluster_by_class([proto_sets[cid] for cid in sorted(proto_sets)])
        for cid in sorted(proto_sets):
            entries = {}
            for label in proto_sets[cid].classes():
                cluster = clusters[label]
                if strategy.variant == "pfpl":
                    vec = personalized_prototype(cid, cluster, strategy.alpha, strategy.weight_mode)
                elif strategy.variant == "global_proto":
                    vec = global_prototype(cluster)
                else:
                    vec = unbiased_prototype(cluster)
                entries[label] = vec
            server_targets[cid] = PersonalizedTargets(cid, entries)
        uploads = [
            {"kind": "prototypes", **prototype_set_to_doc(proto_sets[cid], round_index)}
            for cid in sorted(proto_sets)
        ]
        target_docs = [
            {"kind": "targets", **targets_to_doc(server_targets[cid], round_index)}
            for cid in sorted(server_targets)
        ]
    elif strategy.variant == "fedavg":
        sizes = {cid: by_id[cid].data.train_size for cid in sorted(by_id)}
        total = sum(sizes.values())
        averaged = None
        for cid in sorted(sizes):
            weight = sizes[cid] / total
            contribution = [weight * a for a in by_id[cid].model.parameter_arrays()]
            if averaged is None:
                averaged = contribution
            else:
                averaged = [acc + arr for acc, arr in zip(averaged, contribution)]
        template = new_clients[0].model
        global_model = _model_from_arrays(template, averaged)
        uploads = [
            {
                "kind": "params",
                "client": cid,
                "round": round_index,
                "layers": _param_manifest(by_id[cid].model),
                "total_params": by_id[cid].model.param_count,
            }
            for cid in sorted(by_id)
        ]
        target_docs = [
            {"kind": "broadcast", "round": round_index, "total_params": global_model.param_count}
        ]
        refreshed = []
        for client in new_clients:
            model = global_model.copy()
            opt = OptimizerState.init(
                model, client.opt.lr, client.opt.momentum, client.opt.weight_decay
            )
            refreshed.append(
                ClientState(client.client_id, model, opt, client.data, client.prototypes)
            )
        new_clients = refreshed
    # local_only: nothing crosses the wire

    template = new_clients[0].model
    cost = comm_cost(strategy.variant, template, proto_sets)
    new_state = FederationState(round_index, new_clients, server_targets, state.root_seed)
    return new_state, reports, cost, RoundWire(uploads, target_docs)


def server_snapshot(state: FederationState) -> dict:
    """The serialized server-side view: the round counter and the per-client
    targets. Under prototype strategies this is everything the server holds."""
    return {
        "round": state.round,
        "targets": [
            targets_to_doc(state.server_targets[cid], state.round)
            for cid in sorted(state.server_targets)
        ],
    }


def experiment_objective(reports: dict, sizes: dict, lam: float) -> float:
    """Data-size-weighted sum of client losses plus the weighted regularizers."""
    total = sum(sizes.values())
    value = 0.0
    for cid in sorted(reports):
        weight = sizes[cid] / total
        value += weight * (reports[cid].loss_s + lam * reports[cid].loss_r)
    return value


@dataclass
class ExperimentResult:
    round_reports: list  # RoundReport, index == round (0 is the initial evaluation)
    local_reports: list  # per training round: {client_id: LocalUpdateReport}
    final_accuracies: dict
    payload_totals: dict
    diag: object  # ConvergenceDiag or None
    param_count: int

    @property
    def final_macro_acc(self) -> float:
        return self.round_reports[-1].macro_acc


def init_state(
    datasets: list,
    layer_dims: list,
    embedding_dim: int,
    num_classes: int,
    root_seed: int,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> FederationState:
    """Shared-initialization federation state over the given client datasets."""
    template = init_model(layer_dims, embedding_dim, num_classes, derive_seed(root_seed, "model-init"))
    clients = [
        ClientState(
            ds.client_id,
            template.copy(),
            OptimizerState.init(template, lr, momentum, weight_decay),
            ds,
            None,
        )
        for ds in datasets
    ]
    return FederationState(0, clients, {}, root_seed)


def _initial_report(state: FederationState) -> RoundReport:
    acc, loss_s, loss_r, loss_total, zeros = {}, {}, {}, {}, {}
    for client in state.clients:
        cid = client.client_id
        acc[cid] = evaluate(client.model, client.data.test_x, client.data.test_y)
        logits = forward_logits(client.model, forward_features(client.model, client.data.train_x))
        ls, _ = cross_entropy(logits, client.data.train_y)
        loss_s[cid] = ls
        loss_r[cid] = 0.0
        loss_total[cid] = ls
        zeros[cid] = 0
    return RoundReport(0, acc, loss_s, loss_r, loss_total, dict(zeros), dict(zeros))


def _probe(client: ClientState, limit: int = 32):
    m = min(limit, client.data.train_size)
    return client.data.train_x[:m], client.data.train_y[:m]


def _probe_snapshot(client: ClientState):
    x, y = _probe(client)
    feat_flat = np.concatenate(
        [a.ravel() for layer in client.model.features for a in (layer.weights, layer.bias)]
    )
    all_flat = np.concatenate([a.ravel() for a in client.model.parameter_arrays()])
    emb = forward_features(client.model, x)
    grads = backward(client.model, Batch(x, y))
    grad_flat = np.concatenate([a.ravel() for a in grads.arrays()])
    return feat_flat, emb, all_flat, grad_flat


def _transition_ratios(prev, cur):
    feat0, emb0, all0, grad0 = prev
    feat1, emb1, all1, grad1 = cur
    d_feat = float(np.linalg.norm(feat1 - feat0))
    d_all = float(np.linalg.norm(all1 - all0))
    emb_ratio = 0.0
    if d_feat > 0:
        per_sample = np.linalg.norm(emb1 - emb0, axis=1)
        emb_ratio = float(per_sample.max() / d_feat) if per_sample.size else 0.0
    grad_ratio = float(np.linalg.norm(grad1 - grad0) / d_all) if d_all > 0 else 0.0
    return emb_ratio, grad_ratio


def run_experiment(config: ExperimentConfig, sink=None) -> ExperimentResult:
    """Run the configured number of communication rounds; fully deterministic
    per (config, seed). ``sink.record_round(round, wire, report)`` is called
    once per round when a sink is given."""
    strategy = Strategy(config.strategy, config.alpha, config.lam, config.weight_mode)
    pools = build_pools(config)
    plan = make_partition_plan(config, pools)
    datasets = partition(pools, plan)

    num_classes = int(max(int(pool.y.max()) for pool in pools.values())) + 1
    input_dim = next(iter(pools.values())).dim
    layer_dims = [input_dim, *config.hidden_dims, config.embedding_dim]
    state = init_state(
        datasets,
        layer_dims,
        config.embedding_dim,
        num_classes,
        config.seed,
        config.lr,
        config.momentum,
        config.weight_decay,
    )
    param_count = state.clients[0].model.param_count

    round_reports = [_initial_report(state)]
    if sink is not None:
        sink.record_round(0, RoundWire([], []), round_reports[0])

    local_history = []
    samples = DiagSamples()
    prev_snaps = {c.client_id: _probe_snapshot(c) for c in state.clients}
    totals = {"upload_scalars": 0, "download_scalars": 0}

    for round_index in range(1, config.rounds + 1):
        state, reports, cost, wire = run_round(
            state, strategy, local_epochs=config.local_epochs, batch_size=config.batch_size
        )
        acc = {
            c.client_id: evaluate(c.model, c.data.test_x, c.data.test_y) for c in state.clients
        }
        report = RoundReport(
            round_index,
            acc,
            {cid: reports[cid].loss_s for cid in reports},
            {cid: reports[cid].loss_r for cid in reports},
            {cid: reports[cid].loss_total for cid in reports},
            dict(cost.upload_params),
            dict(cost.download_params),
        )
        round_reports.append(report)
        local_history.append(reports)
        totals["upload_scalars"] += cost.total_upload
        totals["download_scalars"] += cost.total_download

        samples.grad_norms.append({cid: list(reports[cid].grad_norms) for cid in sorted(reports)})
        emb_ratios, grad_ratios = {}, {}
        for client in state.clients:
            snap = _probe_snapshot(client)
            emb_ratios[client.client_id], grad_ratios[client.client_id] = _transition_ratios(
                prev_snaps[client.client_id], snap
            )
            prev_snaps[client.client_id] = snap
        samples.embedding_ratios.append(emb_ratios)
        samples.gradient_ratios.append(grad_ratios)

        if sink is not None:
            sink.record_round(round_index, wire, report)

    totals["upload_bytes"] = 8 * totals["upload_scalars"]
    totals["download_bytes"] = 8 * totals["download_scalars"]
    diag = convergence_diag(
        [{cid: reps[cid].loss_total for cid in reps} for reps in local_history],
        samples,
        lam=config.lam if strategy.uses_prototypes() else 0.0,
        local_epochs=config.local_epochs,
        lr=config.lr,
    )
    return ExperimentResult(
        round_reports=round_reports,
        local_reports=local_history,
        final_accuracies=dict(round_reports[-1].acc),
        payload_totals=totals,
        diag=diag,
        param_count=param_count,
    )
