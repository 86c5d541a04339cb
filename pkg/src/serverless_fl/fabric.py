"""Simulated FaaS fabric: instance lifecycle, warm caches, limits, billing.

Handlers are real in-process callables `handler(request, ctx)`. Latency that
would come from infrastructure (cold starts, dataset loads, injected sleeps)
is *virtual*: it is added to the invocation's accounted duration without
actually sleeping, so simulations stay fast while the timing and billing math
matches what a real platform would record.
"""

from __future__ import annotations

import csv
import itertools
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path

__all__ = [
    "FunctionDeployment",
    "InvocationRecord",
    "LruCache",
    "FaasFabric",
    "ManualClock",
    "AuthRejected",
    "TimeoutExceeded",
    "MemoryLimitExceeded",
    "billing_summary",
    "BillingSummary",
]

DEFAULT_BILLING_GRANULARITY_S = 0.1


class AuthRejected(Exception):
    """Raised by a handler when token validation fails; maps to auth_reject."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class TimeoutExceeded(Exception):
    pass


class MemoryLimitExceeded(Exception):
    pass


class ManualClock:
    """Settable clock for keep-warm / expiry tests."""

    def __init__(self, start: float = 0.0):
        self._now = start

    def __call__(self) -> float:
        return self._now

    def advance(self, seconds: float):
        self._now += seconds


@dataclass(frozen=True)
class FunctionDeployment:
    function_id: str
    handler: object  # callable(request, ctx) -> response
    platform_label: str = "sim"
    memory_limit_mb: int = 2048
    timeout_s: float = 15 * 60.0
    cold_start_latency_s: float = 2.0
    keep_warm_s: float = 300.0
    cache_capacity: int = 64
    cpu_ghz: float = 2.4

    def __post_init__(self):
        if self.memory_limit_mb <= 0 or self.timeout_s <= 0:
            raise ValueError("memory_limit_mb and timeout_s must be positive")
        if self.cold_start_latency_s < 0 or self.keep_warm_s < 0:
            raise ValueError("latencies must be non-negative")


@dataclass(frozen=True)
class InvocationRecord:
    function_id: str
    instance_id: str
    cold: bool
    start: float
    duration_s: float
    memory_limit_mb: int
    cpu_ghz: float
    peak_tracked_bytes: int
    egress_bytes: int
    outcome: str  # ok | timeout | oom | handler_error | auth_reject


class LruCache:
    """Bounded key/value cache with least-recently-used eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: dict = {}

    def get(self, key, default=None):
        if key in self._entries:
            value = self._entries.pop(key)
            self._entries[key] = value
            return value
        return default

    def put(self, key, value):
        if key in self._entries:
            self._entries.pop(key)
        elif len(self._entries) >= self.capacity:
            oldest = next(iter(self._entries))
            self._entries.pop(oldest)
        self._entries[key] = value

    def __contains__(self, key):
        return key in self._entries

    def __len__(self):
        return len(self._entries)

    def cached(self, key, compute):
        """Runs `compute` at most once per live entry for `key`."""
        sentinel = object()
        value = self.get(key, sentinel)
        if value is sentinel:
            value = compute()
            self.put(key, value)
        return value


class _Instance:
    def __init__(self, instance_id: str, deployment: FunctionDeployment):
        self.instance_id = instance_id
        self.deployment = deployment
        self.cache = LruCache(deployment.cache_capacity)
        self.last_used = 0.0
        self.busy = False


class InvocationContext:
    """Handed to handlers: warm cache, virtual time, tracked memory, egress."""

    def __init__(self, instance: _Instance, deadline_s: float, memory_limit_bytes: int):
        self.cache = instance.cache
        self.instance_id = instance.instance_id
        self._deadline_s = deadline_s
        self._memory_limit = memory_limit_bytes
        self._started = time.perf_counter()
        self.virtual_s = 0.0
        self.tracked_bytes = 0
        self.peak_tracked_bytes = 0
        self.egress_bytes = 0

    def elapsed(self) -> float:
        """Accounted time so far: real compute plus virtual latency."""
        return (time.perf_counter() - self._started) + self.virtual_s

    def sleep(self, seconds: float):
        """Consume virtual time; raises once the accounted time passes the
        function timeout."""
        self.virtual_s += seconds
        if self.elapsed() > self._deadline_s:
            raise TimeoutExceeded()

    def track_alloc(self, nbytes: int):
        self.tracked_bytes += int(nbytes)
        self.peak_tracked_bytes = max(self.peak_tracked_bytes, self.tracked_bytes)
        if self.tracked_bytes > self._memory_limit:
            raise MemoryLimitExceeded()

    def track_free(self, nbytes: int):
        self.tracked_bytes = max(0, self.tracked_bytes - int(nbytes))

    def record_egress(self, nbytes: int):
        self.egress_bytes += int(nbytes)


class FaasFabric:
    """Deploys functions and executes invocations with cold/warm lifecycle."""

    def __init__(self, clock=None):
        self.clock = clock if clock is not None else time.time
        self._deployments: dict[str, FunctionDeployment] = {}
        self._instances: dict[str, list[_Instance]] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count()
        self.records: list[InvocationRecord] = []
        self.busy_time_s = 0.0

    def deploy(self, deployment: FunctionDeployment):
        with self._lock:
            if deployment.function_id in self._deployments:
                raise ValueError(f"function {deployment.function_id!r} already deployed")
            self._deployments[deployment.function_id] = deployment
            self._instances[deployment.function_id] = []

    def deployed_functions(self) -> list[str]:
        with self._lock:
            return sorted(self._deployments)

    def instance_count(self, function_id: str) -> int:
        with self._lock:
            return len(self._instances[function_id])

    def _acquire_instance(self, function_id: str):
        with self._lock:
            deployment = self._deployments.get(function_id)
            if deployment is None:
                raise KeyError(f"function {function_id!r} is not deployed")
            for inst in self._instances[function_id]:
                if not inst.busy:
                    inst.busy = True
                    return deployment, inst, False
            inst = _Instance(f"{function_id}#{next(self._ids)}", deployment)
            inst.busy = True
            self._instances[function_id].append(inst)
            return deployment, inst, True

    def invoke(self, function_id: str, request) -> tuple[object, InvocationRecord]:
        deployment, instance, cold = self._acquire_instance(function_id)
        started_at = self.clock()
        ctx = InvocationContext(
            instance,
            deadline_s=deployment.timeout_s,
            memory_limit_bytes=deployment.memory_limit_mb * 1024 * 1024,
        )
        if cold:
            ctx.virtual_s += deployment.cold_start_latency_s
        outcome = "ok"
        response = None
        try:
            response = deployment.handler(request, ctx)
        except TimeoutExceeded:
            outcome = "timeout"
        except MemoryLimitExceeded:
            outcome = "oom"
        except AuthRejected as exc:
            outcome = "auth_reject"
            response = {"ok": False, "reason": exc.reason}
        except Exception:
            outcome = "handler_error"
        duration = ctx.elapsed()
        if outcome == "ok" and duration > deployment.timeout_s:
            outcome = "timeout"
            response = None
        record = InvocationRecord(
            function_id=function_id,
            instance_id=instance.instance_id,
            cold=cold,
            start=started_at,
            duration_s=duration,
            memory_limit_mb=deployment.memory_limit_mb,
            cpu_ghz=deployment.cpu_ghz,
            peak_tracked_bytes=ctx.peak_tracked_bytes,
            egress_bytes=ctx.egress_bytes,
            outcome=outcome,
        )
        with self._lock:
            instance.busy = False
            instance.last_used = self.clock()
            self.records.append(record)
            self.busy_time_s += duration
        return response, record

    def reclaim_idle(self, now: float | None = None) -> int:
        """Destroys instances (and their caches) idle for >= keep_warm_s."""
        now = self.clock() if now is None else now
        reclaimed = 0
        with self._lock:
            for function_id, pool in self._instances.items():
                keep_warm = self._deployments[function_id].keep_warm_s
                survivors = []
                for inst in pool:
                    if not inst.busy and now - inst.last_used >= keep_warm:
                        reclaimed += 1
                    else:
                        survivors.append(inst)
                self._instances[function_id] = survivors
        return reclaimed

    def export_records_csv(self, path: str | Path, granularity: float = DEFAULT_BILLING_GRANULARITY_S):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "function_id", "instance_id", "cold", "duration_s", "outcome",
                "billed_s", "memory_limit_mb", "cpu_ghz", "egress_bytes",
            ])
            for r in self.records:
                writer.writerow([
                    r.function_id, r.instance_id, int(r.cold), f"{r.duration_s:.6f}",
                    r.outcome, f"{billed_duration(r.duration_s, granularity):.6f}",
                    r.memory_limit_mb, r.cpu_ghz, r.egress_bytes,
                ])


def billed_duration(duration_s: float, granularity: float = DEFAULT_BILLING_GRANULARITY_S) -> float:
    """Duration rounded up to the billing interval; zero stays zero."""
    if duration_s <= 0:
        return 0.0
    return math.ceil(duration_s / granularity - 1e-12) * granularity


@dataclass(frozen=True)
class BillingSummary:
    invocations: int
    gb_seconds: float
    ghz_seconds: float
    egress_bytes: int


def billing_summary(
    records: list[InvocationRecord], granularity: float = DEFAULT_BILLING_GRANULARITY_S
) -> BillingSummary:
    gb_s = 0.0
    ghz_s = 0.0
    egress = 0
    for r in records:
        billed = billed_duration(r.duration_s, granularity)
        gb_s += (r.memory_limit_mb / 1024.0) * billed
        ghz_s += r.cpu_ghz * billed
        egress += r.egress_bytes
    return BillingSummary(len(records), gb_s, ghz_s, egress)
