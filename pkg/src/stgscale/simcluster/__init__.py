from .presets import PRESETS, get_preset
from .simulator import (
    FEATURE_CHANNELS,
    REPLICA_CHANNEL,
    ClusterSimulator,
    ClusterState,
    SimConfig,
    TelemetrySnapshot,
    label_oracle,
    request_trace,
    snapshot_features,
)
from .topology import EdgeSpec, RequestType, ServiceGraphSpec, ServiceSpec, SpecError
from .workload import PATTERNS, PRIMITIVES, WorkloadTrace, constant_workload, generate_workload, surge_workload

__all__ = [
    "PRESETS",
    "get_preset",
    "FEATURE_CHANNELS",
    "REPLICA_CHANNEL",
    "ClusterSimulator",
    "ClusterState",
    "SimConfig",
    "TelemetrySnapshot",
    "label_oracle",
    "request_trace",
    "snapshot_features",
    "EdgeSpec",
    "RequestType",
    "ServiceGraphSpec",
    "ServiceSpec",
    "SpecError",
    "PATTERNS",
    "PRIMITIVES",
    "WorkloadTrace",
    "constant_workload",
    "generate_workload",
    "surge_workload",
]
