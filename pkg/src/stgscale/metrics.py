"""Evaluation quantities computed purely from an ExperimentRecord."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .autoscaler import ExperimentRecord


def violation_rate(record: ExperimentRecord, sla_ms: float | None = None) -> float:
    """Fraction of steps whose end-to-end latency exceeds the SLA."""
    if len(record) == 0:
        raise ValueError("empty experiment record")
    sla = record.sla_ms if sla_ms is None else sla_ms
    return float(np.mean(record.e2e_latency_ms > sla))


def cost_formula(replicas, cores_per_replica, period) -> float:
    """``(F / T^2) * sum_t sum_i c_i * y_t^i`` evaluated literally."""
    y = np.asarray(replicas, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    T = y.shape[0]
    if T == 0:
        return 0.0
    return float(period / T**2 * np.sum(y * np.asarray(cores_per_replica, dtype=np.float64)))


def cost_core_hours(replicas, cores_per_replica, period_s) -> float:
    """Allocated cores integrated over time, in core-hours."""
    y = np.asarray(replicas, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return float(np.sum(y * np.asarray(cores_per_replica, dtype=np.float64)) * period_s / 3600.0)


def cost(record: ExperimentRecord) -> float:
    return cost_core_hours(record.replicas, record.cores_per_replica, record.period_s)


def cae(record: ExperimentRecord, sla_ms: float | None = None) -> float:
    """Latency in excess of the SLA summed over violating steps, in seconds."""
    if len(record) == 0:
        raise ValueError("empty experiment record")
    sla = record.sla_ms if sla_ms is None else sla_ms
    excess = record.e2e_latency_ms - sla
    return float(np.sum(excess[excess > 0]) / 1000.0)


def forecast_errors(pred, truth) -> tuple[float, float, float | None]:
    """(MAE, RMSE, MAPE in percent).  MAPE skips zero truths and is None if all are zero."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"pred has {p.size} values, truth has {y.size}")
    if p.size == 0:
        raise ValueError("empty series")
    err = p - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    nz = y != 0
    with np.errstate(over="ignore"):
        mape = float(np.mean(np.abs(err[nz] / y[nz])) * 100.0) if nz.any() else None
    return mae, rmse, mape


def segment_violation_probability(record: ExperimentRecord) -> dict[str, float]:
    """Per workload segment, the fraction of its steps that violate the SLA."""
    viol = record.violations
    seg = np.asarray(record.segments)
    return {name: float(viol[seg == name].mean()) for name in dict.fromkeys(record.segments)}


def clearance_time(record: ExperimentRecord, start: int) -> int:
    """Steps from ``start`` until the last violation at or after it is over (0 if none)."""
    viol = np.nonzero(record.violations[start:])[0]
    return int(viol[-1] + 1) if len(viol) else 0


@dataclass
class EvaluationReport:
    policy: str
    steps: int
    violation_rate: float
    cost_core_hours: float
    cost_formula: float
    cae_s: float
    segment_violation: dict
    mae: float | None = None
    rmse: float | None = None
    mape: float | None = None
    jaccard_od: float | None = None
    jaccard_cc: float | None = None

    def __post_init__(self):
        if not 0 <= self.violation_rate <= 1:
            raise ValueError("violation_rate outside [0, 1]")
        if self.cost_core_hours < 0 or self.cost_formula < 0:
            raise ValueError("negative cost")

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["policy", "steps", "violation_rate", "cost_core_hours", "cost_formula", "cae_s", "segment_violation"],
    "properties": {
        "policy": {"type": "string"},
        "steps": {"type": "integer", "minimum": 1},
        "violation_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "cost_core_hours": {"type": "number", "minimum": 0},
        "cost_formula": {"type": "number", "minimum": 0},
        "cae_s": {"type": "number", "minimum": 0},
        "segment_violation": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "mae": {"type": ["number", "null"]},
        "rmse": {"type": ["number", "null"]},
        "mape": {"type": ["number", "null"]},
        "jaccard_od": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "jaccard_cc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
    "additionalProperties": False,
}


def evaluate_record(record: ExperimentRecord, **extra) -> EvaluationReport:
    return EvaluationReport(
        policy=record.policy,
        steps=len(record),
        violation_rate=violation_rate(record),
        cost_core_hours=cost(record),
        cost_formula=cost_formula(record.replicas, record.cores_per_replica, record.period_s),
        cae_s=cae(record),
        segment_violation=segment_violation_probability(record),
        **extra,
    )


def write_report(path, report: EvaluationReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)


def cumulative_series(record: ExperimentRecord) -> dict[str, np.ndarray]:
    """Running totals of violations, core-hours and excess latency (s)."""
    excess = np.maximum(record.e2e_latency_ms - record.sla_ms, 0.0) / 1000.0
    return {
        "cum_violations": np.cumsum(record.violations.astype(np.int64)),
        "cum_cost_core_hours": np.cumsum(record.cores * record.period_s / 3600.0),
        "cum_abs_error_s": np.cumsum(excess),
    }


def write_cumulative_csv(path, record: ExperimentRecord) -> None:
    series = cumulative_series(record)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + list(series))
        for t in range(len(record)):
            w.writerow([t] + [repr(float(v[t])) if v.dtype.kind == "f" else int(v[t]) for v in series.values()])


# ---------------------------------------------------------------- comparison table

def summarize(values) -> tuple[float, float]:
    """(median, half inter-quartile range)."""
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float((q3 - q1) / 2)


def comparison_rows(reports: dict[str, list[EvaluationReport]]) -> list[dict]:
    rows = []
    for policy, reps in reports.items():
        row = {"policy": policy, "runs": len(reps)}
        for key, attr, scale in (
            ("violation_rate_pct", "violation_rate", 100.0),
            ("cost_core_hours", "cost_core_hours", 1.0),
            ("cae_s", "cae_s", 1.0),
        ):
            row[key] = summarize([getattr(r, attr) * scale for r in reps])
        segs = {}
        for name in reps[0].segment_violation:
            segs[name] = summarize([r.segment_violation.get(name, 0.0) for r in reps])[0]
        row["segment_violation"] = segs
        rows.append(row)
    return rows


def comparison_markdown(rows: list[dict]) -> str:
    lines = [
        "| Policy | Violation Rate (%) | Cost (core-h) | CAE (s) |",
        "|---|---|---|---|",
    ]
    for r in rows:
        cells = [f"{r[k][0]:.3f}±{r[k][1]:.3f}" for k in ("violation_rate_pct", "cost_core_hours", "cae_s")]
        lines.append(f"| {r['policy']} | " + " | ".join(cells) + " |")
    segments = list(rows[0]["segment_violation"]) if rows else []
    if segments:
        lines += ["", "Per-step violation probability by workload segment (median over runs):", ""]
        lines.append("| Policy | " + " | ".join(segments) + " |")
        lines.append("|---|" + "---|" * len(segments))
        for r in rows:
            lines.append(f"| {r['policy']} | " + " | ".join(f"{r['segment_violation'][s]:.3f}" for s in segments) + " |")
    return "\n".join(lines) + "\n"
