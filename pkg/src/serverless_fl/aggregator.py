"""FedAvg aggregation: the naive weighted mean and the memory-bounded running
average, plus the fabric handler that streams results, commits the new global
model, and optionally evaluates it on a central test shard."""

from __future__ import annotations

import time

import numpy as np

from . import nn
from .auth import ClientAuthPolicy, KeyRegistry
from .client import _authenticate, validate_request
from .data import ShardRegistry
from .fabric import InvocationContext
from .nn import ModelSpec, ParameterSet
from .store import ClientResult, ParameterStore, StoreCredential

__all__ = ["fedavg_naive", "fedavg_running", "make_aggregate_handler"]


def _check_results(results: list[ClientResult]):
    if not results:
        raise ValueError("cannot aggregate zero results")
    reference = results[0].params
    for r in results[1:]:
        if not reference.shape_compatible(r.params):
            raise ValueError(f"client {r.client_id!r} result is not shape-compatible")


def fedavg_naive(results: list[ClientResult]) -> ParameterSet:
    """Cardinality-weighted mean over fully materialized results; also the
    oracle for the running variant."""
    _check_results(results)
    total = sum(r.cardinality for r in results)
    acc = results[0].params.map(lambda t: t * (results[0].cardinality / total))
    for r in results[1:]:
        weight = r.cardinality / total
        acc = acc.combine(r.params, lambda a, w, weight=weight: a + w * weight)
    return acc


def fedavg_running(batches, batch_size: int) -> ParameterSet:
    """Incremental weighted mean over streamed result batches.

    Per result: acc <- acc * (W / (W + n)) + w * (n / (W + n)), W <- W + n.
    `batches` yields lists of either ClientResult or store._MeteredResult;
    metered results are released as soon as they are folded in, so at most
    batch_size + 1 parameter sets are live (the accumulator counts as one).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    acc: ParameterSet | None = None
    total_weight = 0
    seen = 0
    for batch in batches:
        for item in batch:
            result = item.result if hasattr(item, "result") else item
            n = result.cardinality
            if acc is None:
                acc = result.params.map(np.copy)
                total_weight = n
            else:
                if not acc.shape_compatible(result.params):
                    raise ValueError(f"client {result.client_id!r} result is not shape-compatible")
                new_total = total_weight + n
                keep = total_weight / new_total
                take = n / new_total
                acc = acc.combine(result.params, lambda a, w, keep=keep, take=take: a * keep + w * take)
                total_weight = new_total
            seen += 1
            if hasattr(item, "release"):
                item.release()
    if acc is None:
        raise ValueError("cannot aggregate zero results")
    return acc


AGGREGATE_SCHEMA = {
    "token": str,
    "store_credential": StoreCredential,
    "session": str,
    "round": int,
    "batch_size": int,
}
AGGREGATE_OPTIONAL = {
    "mode": str,  # "running" (default) | "naive"
    "client_ids": list,  # restrict to these clients (controller's finished set)
    "central_test": str,  # shard id for post-commit central evaluation
    "api_token": str,
}


def make_aggregate_handler(
    store: ParameterStore,
    shards: ShardRegistry,
    policy: ClientAuthPolicy,
    key_registry: KeyRegistry,
    clock=time.time,
):
    """Builds the fabric handler for aggregation. Materialized result payloads
    are charged against the function's tracked memory, so the naive mode can
    genuinely run out of memory where the running mode fits."""

    def handle_aggregate(request, ctx: InvocationContext):
        validate_request(request, AGGREGATE_SCHEMA, AGGREGATE_OPTIONAL)
        _authenticate(request, ctx, policy, key_registry, clock)
        cred: StoreCredential = request["store_credential"]
        session = request["session"]
        round_no = request["round"]
        batch_size = request["batch_size"]
        mode = request.get("mode", "running")
        client_ids = request.get("client_ids")

        if mode == "naive":
            all_clients = client_ids or store.list_round_clients(cred, session, round_no)
            results = []
            for batch in store.stream_round_results(
                cred, session, round_no, max(1, len(all_clients)), client_ids
            ):
                for item in batch:
                    ctx.track_alloc(item.result.params.nbytes())
                    results.append(item.result)
            new_params = fedavg_naive(results)
            count = len(results)
        elif mode == "running":
            count = 0

            def releasing_batches():
                nonlocal count
                for batch in store.stream_round_results(cred, session, round_no, batch_size, client_ids):
                    sizes = [item.result.params.nbytes() for item in batch]
                    for nbytes in sizes:
                        ctx.track_alloc(nbytes)
                    count += len(batch)
                    yield batch
                    for nbytes in sizes:
                        ctx.track_free(nbytes)

            new_params = fedavg_running(releasing_batches(), batch_size)
        else:
            raise ValueError(f"unknown aggregation mode {mode!r}")

        version = store.put_global_model(cred, session, new_params)
        response = {"ok": True, "version": version, "results_aggregated": count}

        if "central_test" in request:
            spec = store.get_session_spec(cred, session)
            model = ModelSpec(spec["kind"], tuple(spec["layer_sizes"]))
            shard = shards.serve_shard(request["central_test"])
            loss, acc = nn.evaluate(model, new_params, shard.train.features, shard.train.labels)
            response["metrics"] = {"loss": loss, "accuracy": acc}
        return response

    return handle_aggregate
