"""FaaS vs. IaaS cost estimation over invocation traces.

FaaS clients pay per invocation, GB-second, GHz-second, and egress, and only
for billed runtime: waiting on another round's straggler costs nothing. IaaS
instances bill wall-clock for the whole session, idle or not. All prices come
from configuration, never from code.
"""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path

from .fabric import DEFAULT_BILLING_GRANULARITY_S, InvocationRecord, billing_summary

__all__ = [
    "FaasPrices",
    "IaasPrices",
    "CostModel",
    "CostEstimate",
    "estimate_faas_cost",
    "estimate_iaas_cost",
    "compare",
    "load_cost_model",
]

GIB = 1024**3


@dataclass(frozen=True)
class FaasPrices:
    price_per_invocation: float
    price_per_gb_second: float
    price_per_ghz_second: float
    price_per_egress_gb: float

    def __post_init__(self):
        _require_non_negative(self)


@dataclass(frozen=True)
class IaasPrices:
    price_per_instance_hour: float
    instances: int
    price_per_egress_gb: float

    def __post_init__(self):
        _require_non_negative(self)


def _require_non_negative(prices):
    for name, value in vars(prices).items():
        if not value >= 0:
            raise ValueError(f"{name} must be a finite non-negative number")


@dataclass(frozen=True)
class CostModel:
    faas: FaasPrices
    iaas: IaasPrices


@dataclass(frozen=True)
class CostEstimate:
    faas_cost: float
    iaas_cost: float
    faas_breakdown: dict[str, float]
    iaas_breakdown: dict[str, float]
    sensitivity_band: tuple[tuple[float, float], ...] = ()  # (multiplier, faas_cost)


def estimate_faas_cost(
    records: list[InvocationRecord],
    model: CostModel,
    granularity: float = DEFAULT_BILLING_GRANULARITY_S,
    duration_multiplier: float = 1.0,
) -> CostEstimate:
    """Cost of the trace under the FaaS price sheet. `duration_multiplier`
    scales the compute components linearly (what-if analysis); the invocation
    count term is unaffected."""
    summary = billing_summary(records, granularity)
    p = model.faas
    breakdown = {
        "invocations": summary.invocations * p.price_per_invocation,
        "gb_seconds": summary.gb_seconds * duration_multiplier * p.price_per_gb_second,
        "ghz_seconds": summary.ghz_seconds * duration_multiplier * p.price_per_ghz_second,
        "egress": (summary.egress_bytes / GIB) * p.price_per_egress_gb,
    }
    return CostEstimate(sum(breakdown.values()), 0.0, breakdown, {})


def estimate_iaas_cost(
    session_wall_time_s: float, model: CostModel, egress_gb: float = 0.0
) -> CostEstimate:
    """Every instance bills for the full session wall time, idle included."""
    if session_wall_time_s < 0:
        raise ValueError("wall time must be >= 0")
    p = model.iaas
    breakdown = {
        "instance_hours": p.instances * (session_wall_time_s / 3600.0) * p.price_per_instance_hour,
        "egress": egress_gb * p.price_per_egress_gb,
    }
    return CostEstimate(0.0, sum(breakdown.values()), {}, breakdown)


def compare(
    faas_records: list[InvocationRecord],
    session_wall_time_s: float,
    model: CostModel,
    multipliers: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0),
    granularity: float = DEFAULT_BILLING_GRANULARITY_S,
) -> CostEstimate:
    """Side-by-side totals plus the FaaS-duration sensitivity band. Egress is
    the same traffic on both sides and so uses the same volume."""
    egress_gb = sum(r.egress_bytes for r in faas_records) / GIB
    faas = estimate_faas_cost(faas_records, model, granularity)
    iaas = estimate_iaas_cost(session_wall_time_s, model, egress_gb)
    band = tuple(
        (m, estimate_faas_cost(faas_records, model, granularity, duration_multiplier=m).faas_cost)
        for m in sorted(multipliers)
    )
    return CostEstimate(faas.faas_cost, iaas.iaas_cost, faas.faas_breakdown,
                        iaas.iaas_breakdown, band)


def cost_by_round(
    round_records: list[list[InvocationRecord]],
    round_wall_times_s: list[float],
    round_accuracies: list[float],
    targets: list[float],
    model: CostModel,
    granularity: float = DEFAULT_BILLING_GRANULARITY_S,
) -> list[dict]:
    """Cumulative FaaS/IaaS cost at the round where each target accuracy is
    first reached; rows suit a {round, target_accuracy, faas, iaas} CSV."""
    rows = []
    for target in targets:
        reached = next(
            (i for i, acc in enumerate(round_accuracies) if acc >= target), None
        )
        if reached is None:
            continue
        records = [r for chunk in round_records[: reached + 1] for r in chunk]
        wall = sum(round_wall_times_s[: reached + 1])
        est = compare(records, wall, model, granularity=granularity)
        rows.append({
            "round": reached + 1,
            "target_accuracy": target,
            "faas_cost": est.faas_cost,
            "iaas_cost": est.iaas_cost,
        })
    return rows


def read_trace_csv(path: str | Path) -> list[InvocationRecord]:
    """Reads a fabric records export back into InvocationRecord rows."""
    import csv

    records = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(InvocationRecord(
                function_id=row["function_id"],
                instance_id=row["instance_id"],
                cold=bool(int(row["cold"])),
                start=0.0,
                duration_s=float(row["duration_s"]),
                memory_limit_mb=int(row["memory_limit_mb"]),
                cpu_ghz=float(row["cpu_ghz"]),
                peak_tracked_bytes=0,
                egress_bytes=int(row["egress_bytes"]),
                outcome=row["outcome"],
            ))
    return records


def load_cost_model(path: str | Path) -> CostModel:
    """Reads a prices.toml with [faas] and [iaas] tables mirroring the
    dataclass fields."""
    raw = tomllib.loads(Path(path).read_text())
    return CostModel(FaasPrices(**raw["faas"]), IaasPrices(**raw["iaas"]))
