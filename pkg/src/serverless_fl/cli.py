"""Command-line entry points: partition, run, evaluate, estimate-cost.

Every command exits 0 on success and nonzero with a single machine-parseable
error line on stderr. `--seed` is accepted wherever randomness exists.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import cost as cost_mod
from . import data, nn
from .aggregator import make_aggregate_handler
from .auth import ClientAuthPolicy, KeyRegistry, SigningKeyPair, TokenIssuer
from .client import (
    ClientHyperparameters,
    PrivacyConfig,
    make_evaluate_handler,
    make_train_handler,
)
from .controller import ClientRecord, ClientRegistry, Controller, SessionConfig
from .fabric import FaasFabric, FunctionDeployment
from .store import ParameterStore


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _load_toml(path: str) -> dict:
    return tomllib.loads(Path(path).read_text())


# -- partition ------------------------------------------------------------

def _make_dataset(spec: dict, seed: int) -> data.Dataset:
    if spec.get("synthetic", True):
        return data.synthetic_classification(
            spec.get("train_examples", 60000),
            d=spec.get("features", 32),
            classes=spec.get("classes", 10),
            seed=seed,
            cluster_seed=spec.get("cluster_seed", 1000 + spec.get("classes", 10)),
        )
    raise ValueError("only synthetic datasets are supported; pass a synthetic spec")


def cmd_partition(args) -> int:
    if args.dataset == "synthetic":
        ds = data.synthetic_classification(
            args.examples, d=args.features, classes=args.classes,
            seed=args.seed, cluster_seed=args.cluster_seed,
        )
    else:
        return _fail(f"unknown dataset {args.dataset!r} (use 'synthetic')")
    if args.strategy == "sorted":
        parts = data.partition_sorted_label(ds, args.shards)
    elif args.strategy == "iid":
        parts = data.partition_iid(ds, args.shards, args.seed)
    elif args.strategy == "user":
        import numpy as np
        sizes = np.maximum(
            2,
            np.random.default_rng(args.seed).lognormal(
                mean=np.log(args.examples / args.shards), sigma=0.5, size=args.shards
            ).astype(int),
        )
        while sizes.sum() > len(ds):
            sizes[sizes.argmax()] -= 1
        parts = data.partition_per_user(ds, sizes.tolist(), args.seed)
    else:
        return _fail(f"unknown strategy {args.strategy!r}")
    parts = [
        data.split_train_test(p, args.test_fraction, seed=args.seed + k)
        for k, p in enumerate(parts)
    ]
    registry = data.ShardRegistry()
    registry.register_all(parts)
    registry.save(args.out)
    print(f"wrote {len(parts)} shards to {args.out}")
    return 0


# -- run ------------------------------------------------------------------

def build_session(config: dict, fabric_config: dict, seed: int,
                  store_dir: str | None = None):
    """Wires store, auth, fabric, handlers, registry, and controller from the
    parsed config tables. Returns (controller, fabric, store)."""
    session = config["session"]
    model_cfg = config["model"]
    data_cfg = config.get("data", {})
    hp_cfg = dict(config.get("hyperparams", {}))

    model = nn.ModelSpec(model_cfg["kind"], tuple(model_cfg["layer_sizes"]))
    dp_cfg = hp_cfg.pop("dp", None)
    dp = PrivacyConfig(**dp_cfg) if dp_cfg else None
    hyperparams = ClientHyperparameters(dp=dp, **hp_cfg)

    train_ds = _make_dataset(data_cfg, seed)
    cluster_seed = data_cfg.get("cluster_seed", 1000 + data_cfg.get("classes", 10))
    test_ds = data.synthetic_classification(
        data_cfg.get("test_examples", 10000),
        d=data_cfg.get("features", 32),
        classes=data_cfg.get("classes", 10),
        seed=seed + 1,
        cluster_seed=cluster_seed,
    )
    shard_count = data_cfg.get("shards", 200)
    if data_cfg.get("strategy", "sorted_label_shards") == "sorted_label_shards":
        raw = data.partition_sorted_label(train_ds, shard_count)
    else:
        raw = data.partition_iid(train_ds, shard_count, seed)
    parts = [
        data.split_train_test(p, data_cfg.get("test_fraction", 0.1), seed=seed + k)
        for k, p in enumerate(raw)
    ]
    shards = data.ShardRegistry()
    shards.register_all(parts)
    shards.register(data.Partition("central-test", test_ds, test_ds))

    store = ParameterStore(directory=store_dir)
    keypair = SigningKeyPair.generate("key-1")
    issuer = TokenIssuer("auth-server", keypair)
    issuer.register_credentials("controller", "controller-secret")
    keys = KeyRegistry()
    keys.register(keypair.key_id, keypair.public)
    policy = ClientAuthPolicy("auth-server", frozenset({"invoke:clients"}))

    defaults = fabric_config.get("defaults", {})
    agg_overrides = fabric_config.get("aggregator", {"memory_limit_mb": 4096})
    fabric = FaasFabric()
    train_handler = make_train_handler(store, shards, policy, keys)
    eval_handler = make_evaluate_handler(store, shards, policy, keys)
    agg_handler = make_aggregate_handler(store, shards, policy, keys)

    registry = ClientRegistry()
    for k, p in enumerate(parts):
        client_id = f"client-{k:04d}"
        fabric.deploy(FunctionDeployment(client_id, train_handler, **defaults))
        fabric.deploy(FunctionDeployment(client_id + "-eval", eval_handler, **defaults))
        registry.register(ClientRecord(client_id, client_id, p.shard_id, hyperparams))
    fabric.deploy(FunctionDeployment("aggregator", agg_handler, **{**defaults, **agg_overrides}))

    session_config = SessionConfig(
        session_id=session.get("id", "session"),
        model=model,
        clients_per_round=session.get("clients_per_round", 25),
        max_rounds=session.get("max_rounds", 50),
        target_accuracy=session.get("target_accuracy", 0.9),
        client_timeout_s=session.get("client_timeout_s", 60.0),
        aggregation_batch_size=session.get("aggregation_batch_size", 20),
        evaluation=session.get("evaluation", "central"),
        central_test_shard="central-test",
        eval_clients_per_round=session.get("eval_clients_per_round", 5),
        seed=seed,
    )
    controller = Controller(
        session_config, registry, fabric, store, issuer,
        ("controller", "controller-secret"),
    )
    return controller, fabric, store


def cmd_run(args) -> int:
    config = _load_toml(args.config)
    fabric_config = _load_toml(args.fabric) if args.fabric else {}
    seed = args.seed if args.seed is not None else config["session"].get("seed", 0)
    controller, fabric, store = build_session(
        config, fabric_config, seed, store_dir=args.store_dir
    )
    controller.metrics_path = Path(args.metrics) if args.metrics else None
    if controller.metrics_path:
        with controller.metrics_path.open("w", newline="") as fh:
            from .controller import METRICS_COLUMNS
            csv.writer(fh).writerow(METRICS_COLUMNS)
    reports = controller.run_session()
    if args.trace:
        fabric.export_records_csv(args.trace)
    final = reports[-1].global_metrics
    print(json.dumps({
        "rounds": len(reports),
        "accuracy": final.get("accuracy"),
        "loss": final.get("loss"),
    }))
    return 0


# -- evaluate -------------------------------------------------------------

def cmd_evaluate(args) -> int:
    config = _load_toml(args.config)
    seed = args.seed if args.seed is not None else config["session"].get("seed", 0)
    session_id = args.session or config["session"].get("id", "session")
    model_cfg = config["model"]
    model = nn.ModelSpec(model_cfg["kind"], tuple(model_cfg["layer_sizes"]))
    try:
        params, version = ParameterStore.load_global_model_from_dir(args.store_dir, session_id)
    except FileNotFoundError:
        return _fail(f"no stored model for session {session_id!r} under {args.store_dir}")
    data_cfg = config.get("data", {})
    cluster_seed = data_cfg.get("cluster_seed", 1000 + data_cfg.get("classes", 10))
    test_ds = data.synthetic_classification(
        data_cfg.get("test_examples", 10000),
        d=data_cfg.get("features", 32),
        classes=data_cfg.get("classes", 10),
        seed=seed + 1,
        cluster_seed=cluster_seed,
    )
    if args.mode == "central":
        loss, acc = nn.evaluate(model, params, test_ds.features, test_ds.labels)
        print(json.dumps({"session": session_id, "version": version,
                          "loss": loss, "accuracy": acc}))
        return 0
    # Federated: weighted average over per-shard test splits.
    from .controller import federated_eval_aggregate
    train_ds = _make_dataset(data_cfg, seed)
    raw = data.partition_sorted_label(train_ds, data_cfg.get("shards", 200))
    metrics = []
    for k, p in enumerate(raw):
        part = data.split_train_test(p, data_cfg.get("test_fraction", 0.1), seed=seed + k)
        loss, acc = nn.evaluate(model, params, part.test.features, part.test.labels)
        metrics.append({"loss": loss, "accuracy": acc, "test_cardinality": part.test_cardinality})
    agg = federated_eval_aggregate(metrics)
    print(json.dumps({"session": session_id, "version": version, **agg}))
    return 0


# -- estimate-cost --------------------------------------------------------

def _wall_time_from_metrics(path: str) -> float:
    total = 0.0
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            total += float(row["total_s"])
    return total


def cmd_estimate_cost(args) -> int:
    records = cost_mod.read_trace_csv(args.trace)
    model = cost_mod.load_cost_model(args.prices)
    wall = _wall_time_from_metrics(args.wall_time_from)
    estimate = cost_mod.compare(records, wall, model)
    with Path(args.out).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["multiplier", "faas_cost", "iaas_cost"])
        for multiplier, faas_cost in estimate.sensitivity_band:
            writer.writerow([multiplier, f"{faas_cost:.9f}", f"{estimate.iaas_cost:.9f}"])
    print(json.dumps({"faas_cost": estimate.faas_cost, "iaas_cost": estimate.iaas_cost}))
    return 0


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serverless-fl",
        description="Federated learning on a simulated serverless fabric",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="partition a dataset into client shards")
    p.add_argument("--dataset", default="synthetic", help="'synthetic' (generated in-process)")
    p.add_argument("--strategy", choices=["sorted", "user", "iid"], default="sorted")
    p.add_argument("--shards", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory for shard files")
    p.add_argument("--examples", type=int, default=60000)
    p.add_argument("--features", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--cluster-seed", type=int, default=1010)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="run a full training session")
    p.add_argument("--config", required=True, help="session TOML file")
    p.add_argument("--fabric", help="fabric TOML file (deployment defaults)")
    p.add_argument("--metrics", help="output metrics CSV")
    p.add_argument("--trace", help="output invocation-records CSV")
    p.add_argument("--store-dir", help="persist the parameter store here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="evaluate a stored global model")
    p.add_argument("--config", required=True)
    p.add_argument("--session", help="session id (defaults to the config's)")
    p.add_argument("--store-dir", required=True)
    p.add_argument("--mode", choices=["central", "federated"], default="central")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("estimate-cost", help="FaaS vs IaaS cost over a trace")
    p.add_argument("--trace", required=True, help="invocation-records CSV")
    p.add_argument("--prices", required=True, help="prices TOML")
    p.add_argument("--wall-time-from", required=True, help="metrics CSV (total_s summed)")
    p.add_argument("--out", required=True, help="output cost CSV")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_estimate_cost)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parseable failure
        return _fail(f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
