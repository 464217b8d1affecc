import numpy as np
import pytest

from pfpl.config import ExperimentConfig
from pfpl.data_domains import ClientDataset
from pfpl.errors import ConfigurationError, NumericError
from pfpl.federation import (
    ClientState,
    FederationState,
    Strategy,
    experiment_objective,
    init_state,
    local_update,
    run_experiment,
    run_round,
    server_snapshot,
)
from pfpl.numeric_core import (
    Batch,
    OptimizerState,
    backward,
    cross_entropy,
    forward_features,
    forward_logits,
    init_model,
)
from pfpl.prototypes import (
    PersonalizedTargets,
    compute_local_prototypes,
    personalized_prototype,
    prototype_set_from_doc,
)
from pfpl.rng import substream

from conftest import fd_gradient, max_rel_err


def _dataset(client_id, xs, ys, rng=None, test_n=4):
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=int)
    counts = {int(c): int(np.sum(ys == c)) for c in np.unique(ys)}
    return ClientDataset(
        client_id=client_id,
        train_x=xs,
        train_y=ys,
        train_domain=np.zeros(len(ys), dtype=int),
        test_x=xs[:test_n],
        test_y=ys[:test_n],
        test_domain=np.zeros(min(test_n, len(ys)), dtype=int),
        classes_present=set(counts),
        per_class_counts=counts,
    )


def _blob_dataset(client_id, classes, n_per_class=12, dim=5, seed=0):
    rng = np.random.default_rng(seed + 100 * client_id)
    xs, ys = [], []
    for c in classes:
        center = np.zeros(dim)
        center[0] = 2.0 * c
        xs.append(center + 0.3 * rng.standard_normal((n_per_class, dim)))
        ys.extend([c] * n_per_class)
    return _dataset(client_id, np.vstack(xs), ys)


def _small_state(num_clients=3, classes_per_client=None, num_classes=4, seed=11):
    classes_per_client = classes_per_client or [
        sorted({(i + j) % num_classes for j in range(2)}) for i in range(num_clients)
    ]
    datasets = [_blob_dataset(i, classes_per_client[i], seed=seed) for i in range(num_clients)]
    return init_state(datasets, [5, 12, 6], 6, num_classes, root_seed=seed, lr=0.05, momentum=0.9)


class TestLocalUpdate:
    def test_lambda_zero_bitwise_equal_plain_ce(self):
        state_a = _small_state(num_clients=1)
        state_b = _small_state(num_clients=1)
        client_a, client_b = state_a.clients[0], state_b.clients[0]
        protos = compute_local_prototypes(client_a.model, client_a.data)
        targets = PersonalizedTargets(0, {k: e.centroid for k, e in protos.entries.items()})

        rng_a = substream(7, "shuffle", 0, 1)
        rng_b = substream(7, "shuffle", 0, 1)
        updated_a, _ = local_update(
            client_a, targets, Strategy("pfpl", lam=0.0), 1, 4, rng_a
        )
        updated_b, _ = local_update(client_b, None, Strategy("local_only"), 1, 4, rng_b)
        for x, y in zip(updated_a.model.parameter_arrays(), updated_b.model.parameter_arrays()):
            assert x.tobytes() == y.tobytes()

    def test_regularizer_equals_within_class_variance_on_full_batch(self):
        state = _small_state(num_clients=1)
        client = state.clients[0]
        protos = compute_local_prototypes(client.model, client.data)
        targets = PersonalizedTargets(0, {k: e.centroid for k, e in protos.entries.items()})

        n = client.data.train_size
        rng = substream(3, "shuffle", 0, 1)
        _, report = local_update(client, targets, Strategy("pfpl", lam=1.0), 1, n, rng)

        # independent computation: mean squared distance to the class means
        h = forward_features(client.model, client.data.train_x)
        total = 0.0
        for emb, label in zip(h, client.data.train_y):
            centroid = protos.entries[int(label)].centroid
            total += float(np.sum((emb - centroid) ** 2))
        assert report.loss_r == pytest.approx(total / n, abs=1e-9)

    def test_composite_gradient_matches_finite_differences(self):
        model = init_model([4, 6, 3], 3, 3, seed=5)
        rng = np.random.default_rng(21)
        xb = rng.normal(size=(5, 4))
        yb = rng.integers(0, 3, size=5)
        lam = 0.8
        targets = {int(c): rng.normal(size=3) for c in range(3)}

        def composite(m):
            h = forward_features(m, xb)
            logits = forward_logits(m, h)
            ls, _ = cross_entropy(logits, yb)
            reg = float(
                np.mean([np.sum((h[i] - targets[int(yb[i])]) ** 2) for i in range(len(yb))])
            )
            return ls + lam * reg

        h = forward_features(model, xb)
        diffs = np.stack([h[i] - targets[int(yb[i])] for i in range(len(yb))])
        extra = lam * 2.0 * diffs / len(yb)
        grads = backward(model, Batch(xb, yb), extra)
        analytic = np.concatenate([a.ravel() for a in grads.arrays()])
        fd = fd_gradient(composite, model)
        assert max_rel_err(analytic, fd) < 1e-4

    def test_total_is_ls_plus_lam_lr(self):
        state = _small_state(num_clients=2)
        client = state.clients[0]
        protos = compute_local_prototypes(client.model, client.data)
        targets = PersonalizedTargets(0, {k: e.centroid for k, e in protos.entries.items()})
        _, report = local_update(
            client, targets, Strategy("pfpl", lam=1.5), 2, 4, substream(5, "shuffle", 0, 1)
        )
        assert report.loss_total == pytest.approx(report.loss_s + 1.5 * report.loss_r, abs=1e-9)
        assert report.samples_seen == 2 * client.data.train_size

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_nonfinite_data_aborts_with_client_and_batch(self):
        data = _dataset(3, [[np.inf, 0.0, 0.0, 0.0, 0.0]] * 4, [0, 0, 1, 1])
        model = init_model([5, 4, 3], 3, 2, seed=0)
        client = ClientState(3, model, OptimizerState.init(model, 0.1), data, None)
        with pytest.raises(NumericError, match="client 3"):
            local_update(client, None, Strategy("local_only"), 1, 2, substream(0, "x"))

    def test_prototypes_recomputed_with_updated_model(self):
        state = _small_state(num_clients=1)
        client = state.clients[0]
        updated, report = local_update(
            client, None, Strategy("local_only"), 1, 4, substream(9, "shuffle", 0, 1)
        )
        expected = compute_local_prototypes(updated.model, updated.data)
        for label, entry in expected.entries.items():
            assert np.array_equal(report.prototypes.entries[label].centroid, entry.centroid)


class TestRunRound:
    def test_local_only_no_targets_and_independent_training(self):
        state = _small_state(num_clients=2)
        new_state, reports, cost, wire = run_round(state, Strategy("local_only"), batch_size=4)
        assert new_state.round == 1
        assert new_state.server_targets == {}
        assert wire.uploads == [] and wire.targets == []
        assert cost.total_upload == 0 and cost.total_download == 0

        # identical to training the client alone
        solo_state = FederationState(0, [state.clients[0]], {}, state.root_seed)
        solo_new, _, _, _ = run_round(solo_state, Strategy("local_only"), batch_size=4)
        for a, b in zip(
            solo_new.clients[0].model.parameter_arrays(),
            new_state.clients[0].model.parameter_arrays(),
        ):
            assert a.tobytes() == b.tobytes()

    def test_fedavg_equal_sizes_arithmetic_mean(self):
        state = _small_state(num_clients=2, classes_per_client=[[0, 1], [2, 3]])
        new_state, _, cost, wire = run_round(state, Strategy("fedavg"), batch_size=4)

        # recompute the expected mean from the trained-but-not-averaged models
        trained = []
        for client in state.clients:
            rng = substream(state.root_seed, "shuffle", client.client_id, 1)
            updated, _ = local_update(client, None, Strategy("fedavg"), 1, 4, rng)
            trained.append(updated)
        for i, arrays in enumerate(zip(*[c.model.parameter_arrays() for c in trained])):
            mean = 0.5 * arrays[0] + 0.5 * arrays[1]
            got = list(new_state.clients[0].model.parameter_arrays())[i]
            assert np.max(np.abs(got - mean)) < 1e-12

        # all clients hold the same broadcast model
        for client in new_state.clients[1:]:
            for a, b in zip(
                new_state.clients[0].model.parameter_arrays(), client.model.parameter_arrays()
            ):
                assert a.tobytes() == b.tobytes()
        assert cost.upload_params[0] == new_state.clients[0].model.param_count
        assert wire.targets[0]["kind"] == "broadcast"

    def test_fedavg_convex_combination(self):
        state = _small_state(num_clients=3)
        trained = []
        for client in state.clients:
            rng = substream(state.root_seed, "shuffle", client.client_id, 1)
            updated, _ = local_update(client, None, Strategy("fedavg"), 1, 4, rng)
            trained.append(updated)
        new_state, _, _, _ = run_round(state, Strategy("fedavg"), batch_size=4)
        for i, arrays in enumerate(zip(*[c.model.parameter_arrays() for c in trained])):
            stack = np.stack(arrays)
            got = list(new_state.clients[0].model.parameter_arrays())[i]
            assert np.all(got >= stack.min(axis=0) - 1e-12)
            assert np.all(got <= stack.max(axis=0) + 1e-12)

    def test_pfpl_targets_match_bruteforce_eq4_from_uploads(self):
        state = _small_state(num_clients=3, classes_per_client=[[0, 1], [1, 2], [1, 3]])
        alpha = 0.5
        strategy = Strategy("pfpl", alpha=alpha, lam=1.0, weight_mode="similarity")
        new_state, _, _, wire = run_round(state, strategy, batch_size=4)

        uploaded = {doc["client"]: prototype_set_from_doc(doc) for doc in wire.uploads}
        # brute-force personalized blend from the uploaded snapshots
        for cid, targets in new_state.server_targets.items():
            for label, vec in targets.entries.items():
                holders = sorted(c for c, ps in uploaded.items() if label in ps.entries)
                own = uploaded[cid].entries[label].centroid
                peers = [c for c in holders if c != cid]
                if not peers:
                    expected = own
                else:
                    dists = {
                        p: float(np.sum((own - uploaded[p].entries[label].centroid) ** 2))
                        for p in peers
                    }
                    tau = float(np.median(list(dists.values())))
                    exps = {p: np.exp(-(d - min(dists.values())) / tau) for p, d in dists.items()}
                    z = sum(exps.values())
                    expected = alpha * own + (1 - alpha) * sum(
                        (exps[p] / z) * uploaded[p].entries[label].centroid for p in peers
                    )
                assert np.max(np.abs(vec - expected)) < 1e-12

    def test_prototype_strategy_server_state_has_no_parameters(self):
        state = _small_state(num_clients=3)
        for variant in ("pfpl", "global_proto", "unbiased_proto"):
            new_state, _, _, wire = run_round(state, Strategy(variant), batch_size=4)
            snapshot = server_snapshot(new_state)
            d = state.clients[0].model.embedding_dim

            def walk(node):
                if isinstance(node, dict):
                    for key, value in node.items():
                        assert key not in ("weights", "bias", "params", "layers")
                        walk(value)
                elif isinstance(node, list):
                    if node and all(isinstance(v, float) for v in node):
                        assert len(node) == d  # only embedding-sized vectors
                    else:
                        for value in node:
                            walk(value)

            walk(snapshot)
            for doc in wire.uploads:
                assert doc["kind"] == "prototypes"

    def test_client_order_invariance(self):
        state = _small_state(num_clients=3)
        reordered = FederationState(
            state.round, list(reversed(state.clients)), dict(state.server_targets), state.root_seed
        )
        for variant in ("pfpl", "fedavg"):
            a, _, _, _ = run_round(state, Strategy(variant), batch_size=4)
            b, _, _, _ = run_round(reordered, Strategy(variant), batch_size=4)
            if variant == "pfpl":
                assert sorted(a.server_targets) == sorted(b.server_targets)
                for cid in a.server_targets:
                    for label in a.server_targets[cid].entries:
                        assert (
                            a.server_targets[cid].entries[label].tobytes()
                            == b.server_targets[cid].entries[label].tobytes()
                        )
            else:
                for x, y in zip(
                    a.clients[0].model.parameter_arrays(),
                    sorted(b.clients, key=lambda c: c.client_id)[0].model.parameter_arrays(),
                ):
                    assert x.tobytes() == y.tobytes()

    def test_round_counter_increments(self):
        state = _small_state(num_clients=2)
        for expected in (1, 2, 3):
            state, _, _, _ = run_round(state, Strategy("local_only"), batch_size=4)
            assert state.round == expected


class TestRunExperiment:
    def _config(self, **kw):
        base = dict(
            strategy="pfpl",
            num_clients=4,
            num_classes=4,
            num_domains=2,
            samples_per_class=60,
            n_choices=(2,),
            k_choices=(12,),
            rounds=3,
            input_dim=6,
            hidden_dims=(16,),
            embedding_dim=8,
            seed=1,
        )
        base.update(kw)
        return ExperimentConfig(**base)

    def test_zero_rounds_only_initial_evaluation(self):
        result = run_experiment(self._config(rounds=0))
        assert len(result.round_reports) == 1
        assert result.round_reports[0].round == 0
        assert result.diag is None
        assert result.payload_totals["upload_scalars"] == 0

    def test_same_seed_identical_results(self):
        a = run_experiment(self._config())
        b = run_experiment(self._config())
        for ra, rb in zip(a.round_reports, b.round_reports):
            assert ra.acc == rb.acc
            assert ra.loss_total == rb.loss_total

    def test_objective_consistency(self):
        result = run_experiment(self._config(lam=1.0))
        reports = result.local_reports[-1]
        sizes = {cid: reports[cid].samples_seen for cid in reports}
        lhs = experiment_objective(reports, sizes, lam=1.0)
        total = sum(sizes.values())
        rhs = sum(sizes[cid] / total * reports[cid].loss_total for cid in reports)
        assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_payload_accounting_prototype_vs_fedavg(self):
        proto = run_experiment(self._config())
        fedavg = run_experiment(self._config(strategy="fedavg"))
        # prototype upload: 2 classes x 8 dims per client per round
        per_round = 4 * 2 * 8
        assert proto.payload_totals["upload_scalars"] == 3 * per_round
        assert fedavg.payload_totals["upload_scalars"] == 3 * 4 * fedavg.param_count
        assert proto.payload_totals["upload_bytes"] == 8 * proto.payload_totals["upload_scalars"]

    def test_diag_present_after_two_rounds(self):
        result = run_experiment(self._config(rounds=3))
        assert result.diag is not None
        assert result.diag.g_hat > 0
        assert 0.0 <= result.diag.monotone_fraction <= 1.0
        assert len(result.diag.lambda_bound_per_round) == 3

    def test_default_config_runs_under_60s(self):
        import time

        start = time.perf_counter()
        result = run_experiment(ExperimentConfig())
        elapsed = time.perf_counter() - start
        assert elapsed < 60.0
        assert len(result.round_reports) == 31


class TestStrategyValidation:
    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            Strategy("fancy")

    def test_negative_lambda(self):
        with pytest.raises(ConfigurationError):
            Strategy("pfpl", lam=-1.0)

    def test_alpha_range(self):
        with pytest.raises(ConfigurationError):
            Strategy("pfpl", alpha=2.0)

    def test_fedavg_ignores_alpha_lambda(self):
        Strategy("fedavg", alpha=9.0, lam=-3.0)  # no error
        Strategy("local_only", alpha=-1.0, lam=-1.0)
