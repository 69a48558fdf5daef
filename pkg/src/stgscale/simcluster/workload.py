"""Entry-rate traces in five primitive shapes plus their concatenation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRIMITIVES = ("slight-increase", "slight-decrease", "sharp-increase", "sharp-decrease", "fluctuating")
PATTERNS = PRIMITIVES + ("composite",)

SLIGHT_GAIN = 1.4
SHARP_LOW = 0.5  # sharp segments jump between these multiples of the base level
SHARP_HIGH = 2.5
NOISE = 0.02


@dataclass
class WorkloadTrace:
    pattern: str
    rps: np.ndarray
    request_mix: list[float] | None = None
    segments: list[tuple[str, int, int]] = field(default_factory=list)  # (pattern, start, stop)

    def __post_init__(self):
        self.rps = np.asarray(self.rps, dtype=np.float64)
        if np.any(self.rps < 0):
            raise ValueError("rps must be non-negative")
        if self.request_mix is not None:
            if any(w < 0 for w in self.request_mix) or abs(sum(self.request_mix) - 1) > 1e-9:
                raise ValueError("request mix weights must be non-negative and sum to 1")
        if not self.segments:
            self.segments = [(self.pattern, 0, len(self.rps))]

    def __len__(self) -> int:
        return len(self.rps)

    def segment_of(self, t: int) -> str:
        for name, start, stop in self.segments:
            if start <= t < stop:
                return name
        raise IndexError(t)

    def segment_mask(self, pattern: str) -> np.ndarray:
        mask = np.zeros(len(self.rps), dtype=bool)
        for name, start, stop in self.segments:
            if name == pattern:
                mask[start:stop] = True
        return mask


def _primitive(pattern: str, n: int, level: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n)
    half = n // 2
    if pattern == "slight-increase":
        base = level * (1 + (SLIGHT_GAIN - 1) * t / max(n - 1, 1))
    elif pattern == "slight-decrease":
        base = level * (SLIGHT_GAIN - (SLIGHT_GAIN - 1) * t / max(n - 1, 1))
    elif pattern == "sharp-increase":
        base = np.where(t < half, SHARP_LOW * level, SHARP_HIGH * level)
    elif pattern == "sharp-decrease":
        base = np.where(t < half, SHARP_HIGH * level, SHARP_LOW * level)
    elif pattern == "fluctuating":
        period = max(n / 3.0, 4.0)
        base = level * (1.0 + 0.35 * np.sin(2 * np.pi * t / period)) + level * 0.06 * rng.standard_normal(n)
    else:
        raise ValueError(f"unknown workload pattern {pattern!r}; choose from {PATTERNS}")
    noise = 1 + NOISE * rng.standard_normal(n)
    return np.maximum(base * noise, 0.0)


def generate_workload(
    pattern: str,
    duration: int,
    seed: int,
    base_rps: float = 100.0,
    request_mix: list[float] | None = None,
) -> WorkloadTrace:
    """Seeded entry-rate trace.  ``composite`` runs the five primitives in order."""
    if pattern not in PATTERNS:
        raise ValueError(f"unknown workload pattern {pattern!r}; choose from {PATTERNS}")
    if duration < 0:
        raise ValueError("duration must be >= 0")
    rng = np.random.default_rng(seed)
    if pattern != "composite":
        return WorkloadTrace(pattern, _primitive(pattern, duration, base_rps, rng), request_mix)
    bounds = np.linspace(0, duration, len(PRIMITIVES) + 1).astype(int)
    parts, segments = [], []
    for name, start, stop in zip(PRIMITIVES, bounds[:-1], bounds[1:]):
        parts.append(_primitive(name, int(stop - start), base_rps, rng))
        segments.append((name, int(start), int(stop)))
    return WorkloadTrace("composite", np.concatenate(parts), request_mix, segments)


def constant_workload(rps: float, duration: int, request_mix=None) -> WorkloadTrace:
    return WorkloadTrace("constant", np.full(duration, float(rps)), request_mix)


def surge_workload(low: float, high: float, before: int, after: int, request_mix=None) -> WorkloadTrace:
    """Step from ``low`` to ``high`` after ``before`` steps, no noise."""
    rps = np.concatenate([np.full(before, float(low)), np.full(after, float(high))])
    return WorkloadTrace("sharp-increase", rps, request_mix, [("steady", 0, before), ("sharp-increase", before, before + after)])
