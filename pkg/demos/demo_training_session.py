"""A complete federated session on the simulated serverless fabric.

Wires every moving part by hand: synthetic shards, the chunked parameter
store, token-based auth, deployed client/aggregator functions, and the
controller. Then runs rounds until the global model reaches 85% accuracy
on a held-out central test set and prints one line per round.
"""

from serverless_fl import data, nn
from serverless_fl.aggregator import make_aggregate_handler
from serverless_fl.auth import ClientAuthPolicy, KeyRegistry, SigningKeyPair, TokenIssuer
from serverless_fl.client import (
    ClientHyperparameters,
    make_evaluate_handler,
    make_train_handler,
)
from serverless_fl.controller import (
    ClientRecord,
    ClientRegistry,
    Controller,
    SessionConfig,
)
from serverless_fl.fabric import FaasFabric, FunctionDeployment
from serverless_fl.store import ParameterStore


def main():
    # Data: 40 sorted-label shards plus one central test shard.
    train = data.synthetic_classification(12000, d=32, classes=10, seed=0,
                                          cluster_seed=7)
    test = data.synthetic_classification(2000, d=32, classes=10, seed=1,
                                         cluster_seed=7)
    partitions = [
        data.split_train_test(p, 0.1, seed=k)
        for k, p in enumerate(data.partition_sorted_label(train, 40))
    ]
    shards = data.ShardRegistry()
    shards.register_all(partitions)
    shards.register(data.Partition("central-test", test, test))

    # Store and auth.
    store = ParameterStore()
    keypair = SigningKeyPair.generate("key-1")
    issuer = TokenIssuer("auth-server", keypair)
    issuer.register_credentials("controller", "s3cret")
    keys = KeyRegistry()
    keys.register(keypair.key_id, keypair.public)
    policy = ClientAuthPolicy("auth-server", frozenset({"invoke:clients"}))

    # One train function and one evaluate function per client, plus the
    # aggregator, all on the same fabric.
    fabric = FaasFabric()
    train_handler = make_train_handler(store, shards, policy, keys)
    eval_handler = make_evaluate_handler(store, shards, policy, keys)
    registry = ClientRegistry()
    hp = ClientHyperparameters(local_epochs=5, batch_size=10)
    for k, p in enumerate(partitions):
        client_id = f"client-{k:04d}"
        fabric.deploy(FunctionDeployment(client_id, train_handler))
        fabric.deploy(FunctionDeployment(client_id + "-eval", eval_handler))
        registry.register(ClientRecord(client_id, client_id, p.shard_id, hp))
    fabric.deploy(FunctionDeployment(
        "aggregator", make_aggregate_handler(store, shards, policy, keys),
        memory_limit_mb=4096,
    ))

    config = SessionConfig(
        session_id="demo",
        model=nn.ModelSpec("logistic_regression", (32, 10)),
        clients_per_round=10,
        max_rounds=30,
        target_accuracy=0.85,
        central_test_shard="central-test",
    )
    controller = Controller(config, registry, fabric, store, issuer,
                            ("controller", "s3cret"))
    reports = controller.run_session()

    print("round  accuracy  loss    finished  straggler_s")
    for r in reports:
        m = r.global_metrics
        print(f"{r.round:5d}  {m['accuracy']:8.3f}  {m['loss']:6.3f}  "
              f"{len(r.finished):8d}  {r.straggler_s:11.3f}")
    print(f"\nreached {reports[-1].global_metrics['accuracy']:.1%} "
          f"after {len(reports)} rounds, "
          f"{len(fabric.records)} function invocations")


if __name__ == "__main__":
    main()
