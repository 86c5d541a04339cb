import numpy as np
import pytest

from conftest import build_stack
from serverless_fl import nn
from serverless_fl.client import (
    ClientHyperparameters,
    PrivacyConfig,
    dp_gradient,
    local_train,
    shuffle_seed,
)
from serverless_fl.data import Dataset
from serverless_fl.nn import ModelSpec, OptimizerState, init_params


MODEL = ModelSpec("logistic_regression", (16, 4))


def seed_model(stack, session="sess", seed=0, model=MODEL):
    admin = stack.store.admin_credential
    stack.store.put_session_spec(
        admin, session, {"kind": model.kind, "layer_sizes": list(model.layer_sizes)}
    )
    params = init_params(model, seed)
    stack.store.put_global_model(admin, session, params)
    return params


def train_request(stack, client_index=0, session="sess", round_no=1, hp=None, **extra):
    client_id = f"client-{client_index:04d}"
    cred = stack.store.issue_credential(
        stack.store.admin_credential, session, "client", 3600.0, client_id=client_id
    )
    token = stack.issuer.fetch_token(*stack.controller_credentials).encoded
    request = {
        "token": token,
        "store_credential": cred,
        "session": session,
        "round": round_no,
        "client_id": client_id,
        "shard_id": stack.partitions[client_index].shard_id,
        "hyperparams": hp or ClientHyperparameters(),
    }
    request.update(extra)
    return client_id, request


class TestHandleTrain:
    def test_happy_path_cardinality_and_steps(self):
        # 300-example shard, 5 epochs, batch 10 -> 150 optimizer steps.
        stack = build_stack(n_train=3000, features=16, classes=4, shard_count=10,
                            test_fraction=0.1)
        seed_model(stack)
        client_id, request = train_request(stack)
        response, record = stack.fabric.invoke(client_id, request)
        assert record.outcome == "ok"
        assert response["cardinality"] == 270  # 300-shard minus 10% test split
        assert response["steps"] == 5 * 27
        agg = stack.store.issue_credential(stack.store.admin_credential, "sess", "aggregator", 60.0)
        assert stack.store.list_round_clients(agg, "sess", 1) == [client_id]

    def test_timing_decomposition_bounded_by_duration(self):
        stack = build_stack(shard_count=10)
        seed_model(stack, model=ModelSpec("logistic_regression", (32, 10)))
        client_id, request = train_request(stack)
        response, record = stack.fabric.invoke(client_id, request)
        phases = response["timings"]
        assert set(phases) == {"auth_s", "download_s", "train_s", "upload_s"}
        assert sum(phases.values()) <= record.duration_s + 1e-6

    def test_tampered_token_writes_nothing(self):
        stack = build_stack(shard_count=10)
        seed_model(stack)
        client_id, request = train_request(stack)
        request["token"] = request["token"][:-4] + "AAAA"
        before = stack.store.state_hash()
        response, record = stack.fabric.invoke(client_id, request)
        assert record.outcome == "auth_reject"
        assert response == {"ok": False, "reason": "bad_signature"}
        assert stack.store.state_hash() == before

    def test_unknown_field_rejected_and_writes_nothing(self):
        stack = build_stack(shard_count=10)
        seed_model(stack)
        client_id, request = train_request(stack, surprise="boom")
        before = stack.store.state_hash()
        _, record = stack.fabric.invoke(client_id, request)
        assert record.outcome == "handler_error"
        assert stack.store.state_hash() == before

    def test_missing_shard_is_handler_error(self):
        stack = build_stack(shard_count=10)
        seed_model(stack)
        client_id, request = train_request(stack)
        request["shard_id"] = "does-not-exist"
        _, record = stack.fabric.invoke(client_id, request)
        assert record.outcome == "handler_error"

    def test_warm_instance_loads_dataset_once(self):
        stack = build_stack(shard_count=10, dataset_load_cost_s=0.25)
        seed_model(stack, model=ModelSpec("logistic_regression", (32, 10)))
        client_id, request1 = train_request(stack, round_no=1)
        stack.store.begin_round(stack.store.admin_credential, "sess", 1)
        response1, record1 = stack.fabric.invoke(client_id, request1)
        stack.store.begin_round(stack.store.admin_credential, "sess", 2)
        _, request2 = train_request(stack, round_no=2)
        response2, record2 = stack.fabric.invoke(client_id, request2)
        assert record1.cold and not record2.cold
        # Cache hit: the second download phase skips the injected load cost.
        assert response2["timings"]["download_s"] < response1["timings"]["download_s"] - 0.2
        with stack.fabric._lock:
            instance = stack.fabric._instances[client_id][0]
        assert instance.cache.get("dataset-load-count") == 1

    def test_determinism_across_runs(self):
        results = []
        for _ in range(2):
            stack = build_stack(shard_count=10)
            seed_model(stack, model=ModelSpec("logistic_regression", (32, 10)))
            client_id, request = train_request(stack)
            stack.fabric.invoke(client_id, request)
            agg = stack.store.issue_credential(
                stack.store.admin_credential, "sess", "aggregator", 60.0
            )
            result = stack.store.get_client_result(agg, "sess", 1, client_id)
            results.append(nn.serialize_parameters(result.params))
        assert results[0] == results[1]


class TestLocalTrain:
    def test_zero_epochs_unchanged(self):
        ds = Dataset(np.random.default_rng(0).normal(size=(20, 16)),
                     np.random.default_rng(1).integers(0, 4, 20))
        params = init_params(MODEL, 3)
        out = local_train(MODEL, params, ds, ClientHyperparameters(local_epochs=0), seed=0)
        assert nn.serialize_parameters(out) == nn.serialize_parameters(params)

    def test_matches_centralized_oracle_bitwise(self):
        # Independent training loop with the same shuffle stream.
        ds = Dataset(np.random.default_rng(0).normal(size=(50, 16)),
                     np.random.default_rng(1).integers(0, 4, 50))
        hp = ClientHyperparameters(local_epochs=3, batch_size=10)
        seed = shuffle_seed("sess", 1, "client-0")
        out = local_train(MODEL, init_params(MODEL, 3), ds, hp, seed)

        rng = np.random.default_rng(seed)
        params = init_params(MODEL, 3)
        opt = OptimizerState("adam", learning_rate=1e-3)
        for _ in range(3):
            order = rng.permutation(50)
            for start in range(0, 50, 10):
                idx = order[start : start + 10]
                _, grad = nn.loss_and_gradient(
                    MODEL, params, ds.features[idx], nn.one_hot(ds.labels[idx], 4)
                )
                params, opt = nn.optimizer_step(opt, params, grad)
        assert nn.serialize_parameters(out) == nn.serialize_parameters(params)

    def test_duplicated_shard_matches_weighted_oracle(self):
        # Every example twice, full-batch: trajectory equals the unduplicated
        # full-batch trajectory (per-example weights are uniform either way).
        rng = np.random.default_rng(5)
        X = rng.normal(size=(5, 16))
        y = rng.integers(0, 4, 5)
        base = Dataset(X, y)
        doubled = Dataset(np.vstack([X, X]), np.concatenate([y, y]))
        hp_base = ClientHyperparameters(local_epochs=3, batch_size=5, optimizer="sgd",
                                        learning_rate=0.1)
        hp_doubled = ClientHyperparameters(local_epochs=3, batch_size=10, optimizer="sgd",
                                           learning_rate=0.1)
        a = local_train(MODEL, init_params(MODEL, 1), base, hp_base, seed=9)
        b = local_train(MODEL, init_params(MODEL, 1), doubled, hp_doubled, seed=9)
        assert np.allclose(a.flat(), b.flat(), atol=1e-12)

    def test_batch_size_clamped_with_warning(self, caplog):
        ds = Dataset(np.random.default_rng(0).normal(size=(4, 16)),
                     np.random.default_rng(1).integers(0, 4, 4))
        hp = ClientHyperparameters(local_epochs=1, batch_size=100)
        import logging
        with caplog.at_level(logging.WARNING):
            local_train(MODEL, init_params(MODEL, 0), ds, hp, seed=0)
        assert any("clamping" in r.getMessage() for r in caplog.records)


class TestDpGradient:
    def batch(self, n=20, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 16))
        Y = nn.one_hot(rng.integers(0, 4, n), 4)
        return X, Y

    def test_no_noise_no_clip_equals_plain_mean(self):
        X, Y = self.batch()
        params = init_params(MODEL, 0)
        cfg = PrivacyConfig(noise_multiplier=0.0, l2_clip_norm=1e9, microbatches=4)
        got = dp_gradient(MODEL, params, X, Y, cfg, np.random.default_rng(0))
        _, plain = nn.loss_and_gradient(MODEL, params, X, Y)
        assert np.allclose(got.flat(), plain.flat(), atol=1e-12)

    def test_clip_rescales_to_exact_norm(self):
        X, Y = self.batch()
        params = init_params(MODEL, 0).map(lambda t: t * 50)  # big grads
        cfg = PrivacyConfig(noise_multiplier=0.0, l2_clip_norm=0.01, microbatches=1)
        got = dp_gradient(MODEL, params, X, Y, cfg, np.random.default_rng(0))
        assert got.l2_norm() == pytest.approx(0.01, rel=1e-9)

    def test_indivisible_microbatches_rejected(self):
        X, Y = self.batch(n=10)
        cfg = PrivacyConfig(noise_multiplier=1.0, l2_clip_norm=1.0, microbatches=3)
        with pytest.raises(ValueError, match="divide"):
            dp_gradient(MODEL, init_params(MODEL, 0), X, Y, cfg, np.random.default_rng(0))

    def test_noise_variance_matches_formula(self):
        # Var per coordinate of the final gradient = (z*C/m)^2.
        X, Y = self.batch(n=10)
        params = init_params(MODEL, 0)
        cfg = PrivacyConfig(noise_multiplier=1.0, l2_clip_norm=1.0, microbatches=10)
        rng = np.random.default_rng(42)
        base_cfg = PrivacyConfig(noise_multiplier=0.0, l2_clip_norm=1.0, microbatches=10)
        base = dp_gradient(MODEL, params, X, Y, base_cfg, rng).flat()
        draws = np.stack([
            dp_gradient(MODEL, params, X, Y, cfg, rng).flat() - base
            for _ in range(3000)
        ])
        target = (1.0 * 1.0 / 10) ** 2
        assert np.mean(draws.var(axis=0)) == pytest.approx(target, rel=0.05)
        assert abs(np.mean(draws)) < 3e-3


class TestHandleEvaluate:
    def eval_request(self, stack, client_index=0, session="sess"):
        client_id = f"client-{client_index:04d}"
        cred = stack.store.issue_credential(
            stack.store.admin_credential, session, "client", 3600.0, client_id=client_id
        )
        token = stack.issuer.fetch_token(*stack.controller_credentials).encoded
        return client_id, {
            "token": token,
            "store_credential": cred,
            "session": session,
            "client_id": client_id,
            "shard_id": stack.partitions[client_index].shard_id,
        }

    def test_zero_weights_give_uniform_metrics(self):
        stack = build_stack(n_train=4000, features=16, classes=10, shard_count=10)
        model = ModelSpec("logistic_regression", (16, 10))
        admin = stack.store.admin_credential
        stack.store.put_session_spec(admin, "sess", {"kind": model.kind,
                                                     "layer_sizes": list(model.layer_sizes)})
        stack.store.put_global_model(admin, "sess", init_params(model).map(np.zeros_like))
        client_id, request = self.eval_request(stack)
        response, record = stack.fabric.invoke(client_id + "-eval", request)
        assert record.outcome == "ok"
        # Uniform class probabilities: cross-entropy is exactly ln(classes).
        assert response["loss"] == pytest.approx(np.log(10), abs=1e-9)
        assert 0.0 <= response["accuracy"] <= 1.0

    def test_matches_direct_evaluation(self):
        stack = build_stack(shard_count=10)
        model = ModelSpec("logistic_regression", (32, 10))
        params = seed_model(stack, model=model)
        client_id, request = self.eval_request(stack, client_index=3)
        response, _ = stack.fabric.invoke(client_id + "-eval", request)
        part = stack.partitions[3]
        loss, acc = nn.evaluate(model, params, part.test.features, part.test.labels)
        assert response["loss"] == pytest.approx(loss, abs=1e-12)
        assert response["accuracy"] == pytest.approx(acc, abs=1e-12)
        assert response["test_cardinality"] == part.test_cardinality

    def test_writes_nothing(self):
        stack = build_stack(shard_count=10)
        seed_model(stack, model=ModelSpec("logistic_regression", (32, 10)))
        before = stack.store.state_hash()
        client_id, request = self.eval_request(stack)
        stack.fabric.invoke(client_id + "-eval", request)
        assert stack.store.state_hash() == before


class TestPrivacyBudget:
    def dp_hp(self, max_invocations):
        return ClientHyperparameters(
            local_epochs=1, batch_size=10,
            dp=PrivacyConfig(1.0, 1.0, 10, max_invocations=max_invocations),
        )

    def test_budget_allows_then_denies(self):
        stack = build_stack(n_train=3000, features=16, classes=4, shard_count=10)
        seed_model(stack)
        hp = self.dp_hp(3)
        for round_no in range(1, 4):
            stack.store.begin_round(stack.store.admin_credential, "sess", round_no)
            client_id, request = train_request(stack, round_no=round_no, hp=hp)
            response, _ = stack.fabric.invoke(client_id, request)
            assert response["ok"]
        stack.store.begin_round(stack.store.admin_credential, "sess", 4)
        client_id, request = train_request(stack, round_no=4, hp=hp)
        response, _ = stack.fabric.invoke(client_id, request)
        assert response == {"ok": False, "reason": "budget_exhausted"}

    def test_budget_survives_instance_reclaim(self):
        from serverless_fl.fabric import ManualClock
        # Counter lives in the parameter store, not the instance: reclaiming
        # the function instance between calls must not reset it.
        stack = build_stack(n_train=3000, features=16, classes=4, shard_count=10)
        seed_model(stack)
        hp = self.dp_hp(2)
        for round_no in (1, 2):
            stack.store.begin_round(stack.store.admin_credential, "sess", round_no)
            client_id, request = train_request(stack, round_no=round_no, hp=hp)
            response, _ = stack.fabric.invoke(client_id, request)
            assert response["ok"]
            # Simulate full scale-down between rounds.
            with stack.fabric._lock:
                stack.fabric._instances[client_id] = []
        stack.store.begin_round(stack.store.admin_credential, "sess", 3)
        client_id, request = train_request(stack, round_no=3, hp=hp)
        response, _ = stack.fabric.invoke(client_id, request)
        assert response == {"ok": False, "reason": "budget_exhausted"}
