"""Service-graph specification: services, call edges, request types, SLA."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class SpecError(ValueError):
    """Invalid topology; ``path`` names the offending field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class ServiceSpec:
    name: str
    cpu_per_request: float  # core-seconds per request
    base_latency: float  # ms, latency of an idle service
    cores_per_replica: float = 1.0
    memory_per_replica_mb: float = 256.0


@dataclass
class EdgeSpec:
    src: str
    dst: str
    calls_per_request: float = 1.0


@dataclass
class RequestType:
    """A user request class.

    ``edges`` lists the active call edges explicitly; otherwise every edge
    reachable from the entry through ``first_hops`` (all entry calls when
    empty) is active.
    """

    name: str
    weight: float
    first_hops: list[str] = field(default_factory=list)
    edges: list[tuple[str, str]] | None = None


@dataclass
class ServiceGraphSpec:
    name: str
    services: list[ServiceSpec]
    edges: list[EdgeSpec]
    entry_service: str
    sla_ms: float
    request_types: list[RequestType] = field(default_factory=list)
    min_replicas: int = 1
    max_replicas: int = 20
    base_rps: float = 100.0

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------ structure
    @property
    def n(self) -> int:
        return len(self.services)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.services]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def validate(self) -> None:
        names = self.names
        if len(set(names)) != len(names):
            raise SpecError("services", "duplicate service names")
        for k, s in enumerate(self.services):
            if s.cores_per_replica <= 0:
                raise SpecError(f"services[{k}].cores_per_replica", "must be > 0")
            if s.cpu_per_request < 0 or s.base_latency < 0:
                raise SpecError(f"services[{k}]", "cpu_per_request and base_latency must be >= 0")
        if self.sla_ms <= 0:
            raise SpecError("sla_ms", "must be > 0")
        if self.entry_service not in names:
            raise SpecError("entry_service", f"unknown service {self.entry_service!r}")
        if not 1 <= self.min_replicas <= self.max_replicas:
            raise SpecError("min_replicas", "need 1 <= min_replicas <= max_replicas")
        for k, e in enumerate(self.edges):
            for end in (e.src, e.dst):
                if end not in names:
                    raise SpecError(f"edges[{k}]", f"unknown service {end!r}")
            if e.calls_per_request < 0:
                raise SpecError(f"edges[{k}].calls_per_request", "must be >= 0")
        self.topological_order()  # raises on cycles
        for k, rt in enumerate(self.request_types):
            if rt.weight < 0:
                raise SpecError(f"request_types[{k}].weight", "must be >= 0")
        if self.request_types and abs(sum(rt.weight for rt in self.request_types) - 1.0) > 1e-9:
            raise SpecError("request_types", "weights must sum to 1")

    def call_matrix(self) -> np.ndarray:
        """calls[i, j] = calls from i to j per request handled by i."""
        m = np.zeros((self.n, self.n))
        for e in self.edges:
            m[self.index(e.src), self.index(e.dst)] = e.calls_per_request
        return m

    def adjacency(self) -> np.ndarray:
        return (self.call_matrix() > 0).astype(np.float64)

    def topological_order(self) -> list[int]:
        calls = np.zeros((self.n, self.n), dtype=bool)
        for e in self.edges:
            calls[self.names.index(e.src), self.names.index(e.dst)] = True
        indeg = calls.sum(axis=0)
        ready = [i for i in range(self.n) if indeg[i] == 0]
        order = []
        while ready:
            i = ready.pop(0)
            order.append(i)
            for j in np.nonzero(calls[i])[0]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(int(j))
        if len(order) != self.n:
            raise SpecError("edges", "call graph contains a cycle")
        return order

    def type_masks(self, weights: list[float] | None = None) -> list[tuple[float, np.ndarray]]:
        """(weight, active-edge mask) for every request type."""
        types = self.request_types or [RequestType("all", 1.0)]
        if weights is not None:
            if len(weights) != len(types):
                raise SpecError("request_mix", f"expected {len(types)} weights")
            types = [RequestType(t.name, w, t.first_hops, t.edges) for t, w in zip(types, weights)]
        base = self.call_matrix() > 0
        out = []
        entry = self.index(self.entry_service)
        for t in types:
            if t.edges is not None:
                mask = np.zeros_like(base)
                for s, d in t.edges:
                    mask[self.index(s), self.index(d)] = True
            else:
                mask = np.zeros_like(base)
                hops = [self.index(h) for h in t.first_hops] if t.first_hops else list(np.nonzero(base[entry])[0])
                frontier = []
                for h in hops:
                    mask[entry, h] = base[entry, h]
                    frontier.append(h)
                seen = set()
                while frontier:
                    i = frontier.pop()
                    if i in seen:
                        continue
                    seen.add(i)
                    for j in np.nonzero(base[i])[0]:
                        mask[i, j] = True
                        frontier.append(int(j))
            out.append((float(t.weight), mask))
        return out

    def visits(self, weights: list[float] | None = None) -> np.ndarray:
        """Expected visits to every service per entry request (no saturation)."""
        calls = self.call_matrix()
        order = self.topological_order()
        entry = self.index(self.entry_service)
        total = np.zeros(self.n)
        for w, mask in self.type_masks(weights):
            v = np.zeros(self.n)
            v[entry] = 1.0
            for i in order:
                for j in np.nonzero(mask[i])[0]:
                    v[j] += v[i] * calls[i, j]
            total += w * v
        return total

    def idle_latency(self) -> float:
        """End-to-end latency of the idle system along the critical path."""
        calls = self.call_matrix()
        base = np.array([s.base_latency for s in self.services])
        active = np.zeros_like(calls, dtype=bool)
        for w, mask in self.type_masks():
            if w > 0:
                active |= mask
        return float(critical_path_latency(base, calls, active, self.topological_order(), self.index(self.entry_service)))

    # ------------------------------------------------------------ io
    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceGraphSpec":
        try:
            services = [ServiceSpec(**s) for s in d["services"]]
        except (KeyError, TypeError) as exc:
            raise SpecError("services", str(exc)) from None
        try:
            edges = [EdgeSpec(**e) for e in d.get("edges", [])]
        except TypeError as exc:
            raise SpecError("edges", str(exc)) from None
        rts = []
        for k, r in enumerate(d.get("request_types", [])):
            try:
                edges_ = [tuple(e) for e in r["edges"]] if r.get("edges") is not None else None
                rts.append(RequestType(r["name"], float(r["weight"]), list(r.get("first_hops", [])), edges_))
            except (KeyError, TypeError) as exc:
                raise SpecError(f"request_types[{k}]", str(exc)) from None
        for key in ("name", "entry_service", "sla_ms"):
            if key not in d:
                raise SpecError(key, "missing required field")
        return cls(
            name=d["name"],
            services=services,
            edges=edges,
            entry_service=d["entry_service"],
            sla_ms=float(d["sla_ms"]),
            request_types=rts,
            min_replicas=int(d.get("min_replicas", 1)),
            max_replicas=int(d.get("max_replicas", 20)),
            base_rps=float(d.get("base_rps", 100.0)),
        )

    @classmethod
    def load(cls, path) -> "ServiceGraphSpec":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(str(path), f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def critical_path_latency(latency, calls, active, order, entry) -> float:
    """Longest entry-rooted path, each hop weighted by max(1, calls per request)."""
    total = np.zeros(len(latency))
    for i in reversed(order):
        downstream = [max(1.0, calls[i, j]) * total[j] for j in np.nonzero(active[i])[0]]
        total[i] = latency[i] + (max(downstream) if downstream else 0.0)
    return float(total[entry])
