"""Federated learning on a simulated serverless fabric.

Subpackages by responsibility:

- nn: float64 models, losses, SGD/Adam, parameter serialization
- data: datasets, non-IID partitioning, shard registry
- store: chunked versioned parameter store with scoped credentials
- auth: signed invocation tokens, key distribution, warm-instance caching
- fabric: simulated FaaS platform with cold starts, limits, and billing
- client: training / evaluation handlers, local DP
- aggregator: FedAvg (naive and memory-bounded running average)
- controller: round orchestration, stopping criterion, metrics logging
- cost: FaaS vs. IaaS pricing over invocation traces
"""

__version__ = "0.1.0"
