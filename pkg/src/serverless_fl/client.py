"""FL client handlers deployed on the fabric: training and evaluation.

A train invocation validates its token, checks the privacy budget, pulls the
latest global model and its cached local shard, runs local epochs (optionally
with clipped+noised DP gradients), and uploads full updated parameters plus
the train-set cardinality. Everything is fail-closed: a rejected request
writes nothing.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .auth import CachedVerifier, ClientAuthPolicy, KeyRegistry, validate_token
from .data import Dataset, ShardRegistry
from .fabric import AuthRejected, InvocationContext
from .nn import ModelSpec, OptimizerState, ParameterSet
from .store import ClientResult, ParameterStore, StoreCredential

__all__ = [
    "ClientHyperparameters",
    "PrivacyConfig",
    "SchemaError",
    "local_train",
    "dp_gradient",
    "make_train_handler",
    "make_evaluate_handler",
    "shuffle_seed",
]

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    """Request failed strict schema validation."""


@dataclass(frozen=True)
class PrivacyConfig:
    noise_multiplier: float  # z; 0 means clip-only
    l2_clip_norm: float  # C
    microbatches: int  # m, must divide batch_size
    max_invocations: int | None = None  # privacy budget proxy

    def __post_init__(self):
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if self.l2_clip_norm <= 0:
            raise ValueError("l2_clip_norm must be positive")
        if self.microbatches < 1:
            raise ValueError("microbatches must be >= 1")


@dataclass(frozen=True)
class ClientHyperparameters:
    local_epochs: int = 5
    batch_size: int = 10
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    dp: PrivacyConfig | None = None
    injected_delay_s: float = 0.0  # test hook: simulated extra work

    def __post_init__(self):
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("bad hyperparameters")
        if self.dp is not None and self.batch_size % self.dp.microbatches != 0:
            raise ValueError("microbatches must divide batch_size")

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(self.optimizer, learning_rate=self.learning_rate)


def shuffle_seed(session: str, round_no: int, client_id: str) -> int:
    """Deterministic yet round-varying shuffle/noise seed."""
    digest = hashlib.sha256(f"{session}/{round_no}/{client_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _clip(grad: ParameterSet, clip_norm: float) -> ParameterSet:
    norm = grad.l2_norm()
    if norm <= clip_norm or norm == 0.0:
        return grad
    return grad.map(lambda t: t * (clip_norm / norm))


def dp_gradient(
    model: ModelSpec,
    params: ParameterSet,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    cfg: PrivacyConfig,
    rng: np.random.Generator,
) -> ParameterSet:
    """Clipped, noised mean gradient: microbatch mean gradients are rescaled to
    L2 norm <= C, summed, perturbed with N(0, (zC)^2) per coordinate, and
    divided by the microbatch count."""
    n = batch_x.shape[0]
    if n % cfg.microbatches != 0:
        raise ValueError(f"microbatches {cfg.microbatches} does not divide batch of {n}")
    size = n // cfg.microbatches
    total = None
    for i in range(cfg.microbatches):
        sl = slice(i * size, (i + 1) * size)
        _, grad = nn.loss_and_gradient(model, params, batch_x[sl], batch_y[sl])
        clipped = _clip(grad, cfg.l2_clip_norm)
        total = clipped if total is None else total.combine(clipped, np.add)
    if cfg.noise_multiplier > 0:
        sigma = cfg.noise_multiplier * cfg.l2_clip_norm
        total = total.map(lambda t: t + rng.normal(0.0, sigma, size=t.shape))
    return total.map(lambda t: t / cfg.microbatches)


def local_train(
    model: ModelSpec,
    params: ParameterSet,
    train: Dataset,
    hp: ClientHyperparameters,
    seed: int,
) -> ParameterSet:
    """Runs local_epochs seeded-shuffle passes and returns full updated
    parameters (weights, not deltas)."""
    rng = np.random.default_rng(seed)
    batch_size = hp.batch_size
    if batch_size > len(train):
        logger.warning(
            "batch_size %d exceeds shard cardinality %d; clamping", batch_size, len(train)
        )
        batch_size = len(train)
    classes = model.classes
    opt = hp.make_optimizer()
    for _ in range(hp.local_epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            idx = order[start : start + batch_size]
            batch_x = train.features[idx]
            batch_y = nn.one_hot(train.labels[idx], classes)
            if hp.dp is not None and len(idx) % hp.dp.microbatches == 0:
                grad = dp_gradient(model, params, batch_x, batch_y, hp.dp, rng)
                loss = 0.0
            else:
                loss, grad = nn.loss_and_gradient(model, params, batch_x, batch_y)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite training loss")
            params, opt = nn.optimizer_step(opt, params, grad)
    return params


def validate_request(request: dict, required: dict[str, type], optional: dict[str, type] = {}):
    """Strict schema check: unknown fields rejected, types checked up front."""
    if not isinstance(request, dict):
        raise SchemaError("request must be an object")
    unknown = set(request) - set(required) - set(optional)
    if unknown:
        raise SchemaError(f"unknown fields {sorted(unknown)}")
    for name, typ in required.items():
        if name not in request:
            raise SchemaError(f"missing field {name!r}")
        if not isinstance(request[name], typ):
            raise SchemaError(f"field {name!r} must be {typ}")
    for name, typ in optional.items():
        if name in request and not isinstance(request[name], typ):
            raise SchemaError(f"field {name!r} must be {typ}")


TRAIN_SCHEMA = {
    "token": str,
    "store_credential": StoreCredential,
    "session": str,
    "round": int,
    "client_id": str,
    "shard_id": str,
    "hyperparams": ClientHyperparameters,
}
TRAIN_OPTIONAL = {"api_token": str}
EVAL_SCHEMA = {
    "token": str,
    "store_credential": StoreCredential,
    "session": str,
    "client_id": str,
    "shard_id": str,
}


class _PhaseTimer:
    """Tracks real + virtual time per handler phase."""

    def __init__(self, ctx: InvocationContext):
        self.ctx = ctx
        self.phases: dict[str, float] = {}

    def measure(self, name: str):
        timer = self

        class _Span:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()
                self_inner.v0 = timer.ctx.virtual_s
                return self_inner

            def __exit__(self_inner, *exc):
                real = time.perf_counter() - self_inner.t0
                virtual = timer.ctx.virtual_s - self_inner.v0
                timer.phases[name] = timer.phases.get(name, 0.0) + real + virtual
                return False

        return _Span()


def _authenticate(request, ctx, policy: ClientAuthPolicy, key_registry: KeyRegistry, clock):
    verifier = ctx.cache.cached("token-verifier", lambda: CachedVerifier(key_registry))
    result = validate_token(
        request["token"], policy, verifier.key_for, clock(),
        api_token=request.get("api_token"),
    )
    if not result:
        raise AuthRejected(result.reason)


def _load_partition(request, ctx, shards: ShardRegistry, load_cost_s: float):
    def load():
        if load_cost_s > 0:
            ctx.sleep(load_cost_s)
        loads = ctx.cache.get("dataset-load-count", 0)
        ctx.cache.put("dataset-load-count", loads + 1)
        return shards.serve_shard(request["shard_id"])

    return ctx.cache.cached(("shard", request["shard_id"]), load)


def make_train_handler(
    store: ParameterStore,
    shards: ShardRegistry,
    policy: ClientAuthPolicy,
    key_registry: KeyRegistry,
    clock=time.time,
    dataset_load_cost_s: float = 0.0,
    sim_seconds_per_step: float = 0.0,
):
    """Builds the fabric handler for client training.

    dataset_load_cost_s: virtual cost charged on a cache-miss dataset load.
    sim_seconds_per_step: virtual cost per optimizer step, for timing studies.
    """

    def handle_train(request, ctx: InvocationContext):
        validate_request(request, TRAIN_SCHEMA, TRAIN_OPTIONAL)
        timer = _PhaseTimer(ctx)
        with timer.measure("auth_s"):
            _authenticate(request, ctx, policy, key_registry, clock)

        hp: ClientHyperparameters = request["hyperparams"]
        client_id = request["client_id"]
        if hp.dp is not None and hp.dp.max_invocations is not None:
            if not store.check_and_increment_counter(client_id, hp.dp.max_invocations):
                return {"ok": False, "reason": "budget_exhausted"}

        cred: StoreCredential = request["store_credential"]
        session = request["session"]
        with timer.measure("download_s"):
            params, _version = store.get_global_model(cred, session)
            spec = store.get_session_spec(cred, session)
            model = ModelSpec(spec["kind"], tuple(spec["layer_sizes"]))
            partition = _load_partition(request, ctx, shards, dataset_load_cost_s)

        with timer.measure("train_s"):
            seed = shuffle_seed(session, request["round"], client_id)
            updated = local_train(model, params, partition.train, hp, seed)
            steps = hp.local_epochs * -(-partition.cardinality // min(hp.batch_size, partition.cardinality))
            if sim_seconds_per_step > 0:
                ctx.sleep(sim_seconds_per_step * steps)
            if hp.injected_delay_s > 0:
                ctx.sleep(hp.injected_delay_s)

        test_metrics = None
        if partition.test_cardinality:
            loss, acc = nn.evaluate(model, updated, partition.test.features, partition.test.labels)
            test_metrics = (loss, acc, partition.test_cardinality)

        with timer.measure("upload_s"):
            result = ClientResult(
                session, request["round"], client_id, updated,
                partition.cardinality, test_metrics,
            )
            store.put_client_result(cred, result)
            ctx.record_egress(updated.nbytes())

        return {
            "ok": True,
            "client_id": client_id,
            "cardinality": partition.cardinality,
            "steps": steps,
            "timings": dict(timer.phases),
        }

    return handle_train


def make_evaluate_handler(
    store: ParameterStore,
    shards: ShardRegistry,
    policy: ClientAuthPolicy,
    key_registry: KeyRegistry,
    clock=time.time,
    dataset_load_cost_s: float = 0.0,
):
    """Builds the fabric handler for client-side evaluation of the latest
    global model on the client's local test split. Writes nothing."""

    def handle_evaluate(request, ctx: InvocationContext):
        validate_request(request, EVAL_SCHEMA)
        _authenticate(request, ctx, policy, key_registry, clock)
        cred: StoreCredential = request["store_credential"]
        session = request["session"]
        params, _version = store.get_global_model(cred, session)
        spec = store.get_session_spec(cred, session)
        model = ModelSpec(spec["kind"], tuple(spec["layer_sizes"]))
        partition = _load_partition(request, ctx, shards, dataset_load_cost_s)
        if partition.test_cardinality == 0:
            raise ValueError(f"shard {partition.shard_id!r} has no test split")
        loss, acc = nn.evaluate(model, params, partition.test.features, partition.test.labels)
        return {
            "ok": True,
            "loss": loss,
            "accuracy": acc,
            "test_cardinality": partition.test_cardinality,
        }

    return handle_evaluate
