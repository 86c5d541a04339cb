import dataclasses

import pytest

from serverless_fl import data, nn
from serverless_fl.aggregator import make_aggregate_handler
from serverless_fl.auth import ClientAuthPolicy, KeyRegistry, SigningKeyPair, TokenIssuer
from serverless_fl.client import (
    ClientHyperparameters,
    make_evaluate_handler,
    make_train_handler,
)
from serverless_fl.controller import ClientRecord, ClientRegistry, Controller, SessionConfig
from serverless_fl.fabric import FaasFabric, FunctionDeployment
from serverless_fl.store import ParameterStore


@dataclasses.dataclass
class Stack:
    """A fully wired system: data, store, auth, fabric, registry, controller."""

    shards: data.ShardRegistry
    partitions: list
    test_set: data.Dataset
    store: ParameterStore
    issuer: TokenIssuer
    keys: KeyRegistry
    policy: ClientAuthPolicy
    keypair: SigningKeyPair
    fabric: FaasFabric
    registry: ClientRegistry
    controller_credentials: tuple

    def make_controller(self, config: SessionConfig, metrics_path=None) -> Controller:
        return Controller(
            config, self.registry, self.fabric, self.store, self.issuer,
            self.controller_credentials, metrics_path=metrics_path,
        )


def build_stack(
    n_train=6000,
    n_test=1000,
    features=32,
    classes=10,
    shard_count=20,
    seed=0,
    hyperparams=None,
    per_client_hyperparams=None,
    cold_start_latency_s=0.0,
    dataset_load_cost_s=0.0,
    sim_seconds_per_step=0.0,
    client_timeout_s=None,
    aggregator_memory_mb=4096,
    client_memory_mb=2048,
    store=None,
    test_fraction=0.1,
) -> Stack:
    cluster_seed = 7  # shared across train/test so they follow one distribution
    train = data.synthetic_classification(
        n_train, d=features, classes=classes, seed=seed, cluster_seed=cluster_seed
    )
    test = data.synthetic_classification(
        n_test, d=features, classes=classes, seed=seed + 1, cluster_seed=cluster_seed
    )
    raw = data.partition_sorted_label(train, shard_count)
    partitions = [
        data.split_train_test(p, test_fraction, seed=seed + k) for k, p in enumerate(raw)
    ]
    shards = data.ShardRegistry()
    shards.register_all(partitions)
    shards.register(data.Partition("central-test", test, test))

    store = store if store is not None else ParameterStore()
    keypair = SigningKeyPair.generate("key-1")
    issuer = TokenIssuer("auth-server", keypair)
    issuer.register_credentials("controller", "controller-secret")
    keys = KeyRegistry()
    keys.register(keypair.key_id, keypair.public)
    policy = ClientAuthPolicy("auth-server", frozenset({"invoke:clients"}))

    fabric = FaasFabric()
    train_handler = make_train_handler(
        store, shards, policy, keys,
        dataset_load_cost_s=dataset_load_cost_s,
        sim_seconds_per_step=sim_seconds_per_step,
    )
    eval_handler = make_evaluate_handler(store, shards, policy, keys)
    agg_handler = make_aggregate_handler(store, shards, policy, keys)

    hyperparams = hyperparams or ClientHyperparameters()
    registry = ClientRegistry()
    for k, p in enumerate(partitions):
        client_id = f"client-{k:04d}"
        hp = hyperparams
        if per_client_hyperparams and client_id in per_client_hyperparams:
            hp = per_client_hyperparams[client_id]
        fabric.deploy(FunctionDeployment(
            client_id, train_handler,
            cold_start_latency_s=cold_start_latency_s,
            memory_limit_mb=client_memory_mb,
        ))
        fabric.deploy(FunctionDeployment(
            client_id + "-eval", eval_handler,
            cold_start_latency_s=cold_start_latency_s,
            memory_limit_mb=client_memory_mb,
        ))
        registry.register(ClientRecord(client_id, client_id, p.shard_id, hp))
    fabric.deploy(FunctionDeployment(
        "aggregator", agg_handler,
        memory_limit_mb=aggregator_memory_mb,
        cold_start_latency_s=cold_start_latency_s,
    ))

    return Stack(
        shards=shards,
        partitions=partitions,
        test_set=test,
        store=store,
        issuer=issuer,
        keys=keys,
        policy=policy,
        keypair=keypair,
        fabric=fabric,
        registry=registry,
        controller_credentials=("controller", "controller-secret"),
    )


@pytest.fixture
def small_stack():
    return build_stack(n_train=2000, n_test=500, features=16, classes=4, shard_count=10)


@pytest.fixture
def logreg_model():
    return nn.ModelSpec("logistic_regression", (16, 4))
