"""Round orchestration: client selection, concurrent invocation with per-client
timeouts, aggregation, evaluation, stopping criterion, and metrics logging.

One controller drives one training session. Within a round all selected
clients are invoked concurrently through the fabric; the controller waits for
each to finish or pass the configured client timeout, aggregates only the
finished ones, evaluates the committed model, and appends a metrics CSV row.
"""

from __future__ import annotations

import csv
import hashlib
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import nn
from .auth import TokenIssuer
from .client import ClientHyperparameters
from .fabric import FaasFabric, InvocationRecord
from .nn import ModelSpec
from .store import ParameterStore

__all__ = [
    "ClientRecord",
    "ClientRegistry",
    "SessionConfig",
    "RoundReport",
    "Controller",
    "select_clients",
    "federated_eval_aggregate",
]

METRICS_COLUMNS = [
    "round", "timestamp", "accuracy", "loss", "straggler_s", "agg_s", "eval_s",
    "total_s", "finished", "timed_out", "failed",
]


@dataclass(frozen=True)
class ClientRecord:
    client_id: str
    function_id: str
    shard_id: str
    hyperparams: ClientHyperparameters
    platform_label: str = "sim"
    registered_at: float = 0.0


class ClientRegistry:
    def __init__(self):
        self._records: dict[str, ClientRecord] = {}

    def register(self, record: ClientRecord):
        if record.client_id in self._records:
            raise ValueError(f"client {record.client_id!r} already registered")
        self._records[record.client_id] = record

    def get(self, client_id: str) -> ClientRecord:
        return self._records[client_id]

    def client_ids(self) -> list[str]:
        return sorted(self._records)

    def __len__(self):
        return len(self._records)


@dataclass(frozen=True)
class SessionConfig:
    session_id: str
    model: ModelSpec
    clients_per_round: int
    max_rounds: int
    target_accuracy: float = 1.0
    client_timeout_s: float = 60.0
    aggregation_batch_size: int = 20
    aggregation_mode: str = "running"
    evaluation: str = "central"  # "central" | "federated"
    central_test_shard: str | None = None
    eval_clients_per_round: int = 5
    seed: int = 0
    credential_ttl_s: float = 15 * 60.0

    def __post_init__(self):
        if self.clients_per_round < 1 or self.max_rounds < 1:
            raise ValueError("clients_per_round and max_rounds must be >= 1")
        if not 0.0 <= self.target_accuracy <= 1.0:
            raise ValueError("target_accuracy must be in [0, 1]")
        if self.evaluation not in ("central", "federated"):
            raise ValueError(f"unknown evaluation mode {self.evaluation!r}")
        if self.evaluation == "central" and self.central_test_shard is None:
            raise ValueError("central evaluation needs central_test_shard")


@dataclass
class RoundReport:
    round: int
    selected: list[str]
    finished: list[str]
    timed_out: list[str]
    failed: list[str]
    straggler_s: float
    aggregate_s: float
    eval_s: float
    total_s: float
    global_metrics: dict
    committed_version: int | None
    records: list[InvocationRecord] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return self.committed_version is not None


def select_clients(registry: ClientRegistry, k: int, round_seed: int) -> list[str]:
    """Uniform sample without replacement, deterministic per seed."""
    ids = registry.client_ids()
    if k > len(ids):
        raise ValueError(f"cannot select {k} of {len(ids)} clients")
    return random.Random(round_seed).sample(ids, k)


def federated_eval_aggregate(metrics: list[dict]) -> dict:
    """Test-cardinality-weighted average of client {loss, accuracy} metrics."""
    if not metrics:
        raise ValueError("no metrics to aggregate")
    total = sum(m["test_cardinality"] for m in metrics)
    if total <= 0:
        raise ValueError("cardinalities must be positive")
    return {
        "loss": sum(m["loss"] * m["test_cardinality"] for m in metrics) / total,
        "accuracy": sum(m["accuracy"] * m["test_cardinality"] for m in metrics) / total,
    }


class Controller:
    def __init__(
        self,
        config: SessionConfig,
        registry: ClientRegistry,
        fabric: FaasFabric,
        store: ParameterStore,
        issuer: TokenIssuer,
        controller_credentials: tuple[str, str],
        aggregator_function_id: str = "aggregator",
        evaluator_function_suffix: str = "-eval",
        metrics_path: str | Path | None = None,
    ):
        if config.clients_per_round > len(registry):
            raise ValueError("clients_per_round exceeds registry size")
        self.config = config
        self.registry = registry
        self.fabric = fabric
        self.store = store
        self.issuer = issuer
        self.controller_credentials = controller_credentials
        self.aggregator_function_id = aggregator_function_id
        self.evaluator_function_suffix = evaluator_function_suffix
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.reports: list[RoundReport] = []
        if self.metrics_path is not None:
            with self.metrics_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_COLUMNS)

    # -- session ----------------------------------------------------------

    def initialize_global_model(self) -> int:
        """Seeds and commits version 0, plus the session's model description."""
        admin = self.store.admin_credential
        cfg = self.config
        self.store.put_session_spec(
            admin, cfg.session_id,
            {"kind": cfg.model.kind, "layer_sizes": list(cfg.model.layer_sizes)},
        )
        params = nn.init_params(cfg.model, seed=cfg.seed)
        return self.store.put_global_model(admin, cfg.session_id, params)

    def run_session(self) -> list[RoundReport]:
        self.initialize_global_model()
        for round_no in range(1, self.config.max_rounds + 1):
            report = self.run_round(round_no)
            self.reports.append(report)
            self._append_metrics(report)
            accuracy = report.global_metrics.get("accuracy")
            if accuracy is not None and accuracy >= self.config.target_accuracy:
                break
        return self.reports

    # -- one round --------------------------------------------------------

    def _round_seed(self, round_no: int, purpose: str) -> int:
        # hashlib, not hash(): must be stable across interpreter runs.
        digest = hashlib.sha256(
            f"{self.config.seed}/{round_no}/{purpose}".encode()
        ).digest()
        return int.from_bytes(digest[:8], "little")

    def run_round(self, round_no: int) -> RoundReport:
        cfg = self.config
        admin = self.store.admin_credential
        record_base = len(self.fabric.records)

        token = self.issuer.fetch_token(*self.controller_credentials).encoded
        self.store.begin_round(admin, cfg.session_id, round_no)
        selected = select_clients(
            self.registry, cfg.clients_per_round, self._round_seed(round_no, "train")
        )

        def invoke_client(client_id: str):
            rec = self.registry.get(client_id)
            cred = self.store.issue_credential(
                admin, cfg.session_id, "client", cfg.credential_ttl_s, client_id=client_id
            )
            request = {
                "token": token,
                "store_credential": cred,
                "session": cfg.session_id,
                "round": round_no,
                "client_id": client_id,
                "shard_id": rec.shard_id,
                "hyperparams": rec.hyperparams,
            }
            return client_id, self.fabric.invoke(rec.function_id, request)

        finished, timed_out, failed = [], [], []
        straggler_s = 0.0
        with ThreadPoolExecutor(max_workers=cfg.clients_per_round) as pool:
            for client_id, (response, record) in pool.map(invoke_client, selected):
                ok = (
                    record.outcome == "ok"
                    and isinstance(response, dict)
                    and response.get("ok")
                )
                if record.outcome == "timeout" or record.duration_s > cfg.client_timeout_s:
                    timed_out.append(client_id)
                elif ok:
                    finished.append(client_id)
                    straggler_s = max(straggler_s, record.duration_s)
                else:
                    failed.append(client_id)

        aggregate_s = 0.0
        eval_s = 0.0
        metrics: dict = {}
        version = None
        if finished:
            agg_response, agg_record = self._invoke_aggregator(round_no, token, finished)
            aggregate_s = agg_record.duration_s
            if agg_record.outcome == "ok" and isinstance(agg_response, dict) and agg_response.get("ok"):
                version = agg_response["version"]
                if "metrics" in agg_response:
                    metrics = agg_response["metrics"]
                    eval_s = 0.0  # central evaluation rides inside the aggregator
                elif cfg.evaluation == "federated":
                    metrics, eval_s = self._federated_evaluation(round_no, token)

        report = RoundReport(
            round=round_no,
            selected=selected,
            finished=finished,
            timed_out=timed_out,
            failed=failed,
            straggler_s=straggler_s,
            aggregate_s=aggregate_s,
            eval_s=eval_s,
            total_s=straggler_s + aggregate_s + eval_s,
            global_metrics=metrics,
            committed_version=version,
            records=self.fabric.records[record_base:],
        )
        return report

    def _invoke_aggregator(self, round_no: int, token: str, finished: list[str]):
        cfg = self.config
        cred = self.store.issue_credential(
            self.store.admin_credential, cfg.session_id, "aggregator", cfg.credential_ttl_s
        )
        request = {
            "token": token,
            "store_credential": cred,
            "session": cfg.session_id,
            "round": round_no,
            "batch_size": cfg.aggregation_batch_size,
            "mode": cfg.aggregation_mode,
            "client_ids": list(finished),
        }
        if cfg.evaluation == "central":
            request["central_test"] = cfg.central_test_shard
        return self.fabric.invoke(self.aggregator_function_id, request)

    def _federated_evaluation(self, round_no: int, token: str):
        cfg = self.config
        admin = self.store.admin_credential
        # Evaluation clients are drawn independently of the training sample.
        chosen = select_clients(
            self.registry, cfg.eval_clients_per_round, self._round_seed(round_no, "eval")
        )

        def invoke_eval(client_id: str):
            rec = self.registry.get(client_id)
            cred = self.store.issue_credential(
                admin, cfg.session_id, "client", cfg.credential_ttl_s, client_id=client_id
            )
            request = {
                "token": token,
                "store_credential": cred,
                "session": cfg.session_id,
                "client_id": client_id,
                "shard_id": rec.shard_id,
            }
            return self.fabric.invoke(rec.function_id + self.evaluator_function_suffix, request)

        collected = []
        eval_s = 0.0
        with ThreadPoolExecutor(max_workers=max(1, cfg.eval_clients_per_round)) as pool:
            for response, record in pool.map(invoke_eval, chosen):
                if record.outcome == "ok" and isinstance(response, dict) and response.get("ok"):
                    collected.append(response)
                    eval_s = max(eval_s, record.duration_s)
        if not collected:
            return {}, eval_s
        return federated_eval_aggregate(collected), eval_s

    def _append_metrics(self, report: RoundReport):
        if self.metrics_path is None:
            return
        with self.metrics_path.open("a", newline="") as fh:
            csv.writer(fh).writerow([
                report.round,
                f"{time.time():.3f}",
                f"{report.global_metrics.get('accuracy', float('nan')):.6f}",
                f"{report.global_metrics.get('loss', float('nan')):.6f}",
                f"{report.straggler_s:.6f}",
                f"{report.aggregate_s:.6f}",
                f"{report.eval_s:.6f}",
                f"{report.total_s:.6f}",
                len(report.finished),
                len(report.timed_out),
                len(report.failed),
            ])
