"""Per-stage latency / memory / FLOPs ledger for pipeline traces."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

STAGES = ("retrieval", "reranking", "generation")


class LedgerError(ValueError):
    pass


@dataclass(frozen=True)
class StageRecord:
    stage: str
    component: str
    latency_us: int
    memory_gb: float | None = None
    flops: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise LedgerError(f"unknown stage {self.stage!r}")
        if self.latency_us < 0:
            raise LedgerError(f"negative latency for {self.component!r}")
        if self.flops is not None and self.flops < 0:
            raise LedgerError(f"negative flops for {self.component!r}")

    @classmethod
    def declared(cls, stage, component, latency_ms: int, memory_gb=None, flops=None) -> "StageRecord":
        return cls(stage, component, int(latency_ms) * 1000, memory_gb, flops)

    @property
    def latency_ms(self) -> float:
        return self.latency_us / 1000

    def to_json(self) -> dict:
        return {"stage": self.stage, "component": self.component, "latency_ms": self.latency_ms,
                "memory_gb": self.memory_gb, "flops": self.flops}


@dataclass(frozen=True)
class FlopsModel:
    per_pass_flops: float
    passes_per_query: int = 1

    def __post_init__(self):
        if self.per_pass_flops < 0 or self.passes_per_query < 0:
            raise LedgerError("flops model values must be non-negative")


def estimate_flops(model: FlopsModel) -> float:
    return model.per_pass_flops * model.passes_per_query


def encoder_flops(n_params: int, passes: int = 1) -> float:
    return 2.0 * n_params * passes


def record_stage(trace: dict, stage: str, component: str, memory_gb=None, flops=None) -> StageRecord:
    """Build a record from the ``(start_ns, end_ns)`` span stored in ``trace["timings"]``."""
    spans = trace.get("timings", {})
    key = f"{stage}/{component}"
    if key not in spans:
        raise LedgerError(f"trace has no timestamps for {key}")
    start, end = spans[key]
    if end < start:
        raise LedgerError(f"{key}: end precedes start")
    return StageRecord(stage, component, (end - start) // 1000, memory_gb, flops)


def _sum_flops(values):
    present = [v for v in values if v is not None]
    return sum(present) if present else None


def _max_mem(values):
    present = [v for v in values if v is not None]
    return max(present) if present else None


@dataclass(frozen=True)
class StageSubtotal:
    stage: str
    records: tuple[StageRecord, ...]

    @property
    def latency_us(self) -> int:
        return sum(r.latency_us for r in self.records)

    @property
    def latency_ms(self) -> float:
        return self.latency_us / 1000

    @property
    def memory_gb(self):
        # components of one stage are co-resident
        present = [r.memory_gb for r in self.records if r.memory_gb is not None]
        return round(sum(present), 6) if present else None

    @property
    def flops(self):
        return _sum_flops(r.flops for r in self.records)


@dataclass(frozen=True)
class Ledger:
    stages: tuple[StageSubtotal, ...]

    @property
    def total_latency_us(self) -> int:
        return sum(s.latency_us for s in self.stages)

    @property
    def total_latency_ms(self) -> float:
        return self.total_latency_us / 1000

    @property
    def peak_memory_gb(self):
        # stages run one after another, so the peak is the largest stage
        return _max_mem(s.memory_gb for s in self.stages)

    @property
    def total_flops(self):
        return _sum_flops(s.flops for s in self.stages)

    def to_text(self) -> str:
        rows = [("Stage", "Component", "Latency (ms)", "Memory (GB)", "FLOPs")]
        for s in self.stages:
            for i, r in enumerate(s.records):
                rows.append((s.stage if i == 0 else "", r.component, _ms(r.latency_us),
                             _gb(r.memory_gb), _flops(r.flops)))
            rows.append(("", "Subtotal", _ms(s.latency_us), _gb(s.memory_gb), _flops(s.flops)))
        rows.append(("Total", "", _ms(self.total_latency_us), _gb(self.peak_memory_gb), _flops(self.total_flops)))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"

    def to_jsonl(self) -> str:
        lines = []
        for s in self.stages:
            lines += [json.dumps(r.to_json()) for r in s.records]
            lines.append(json.dumps({"stage": s.stage, "component": "subtotal", "latency_ms": s.latency_us / 1000,
                                     "memory_gb": s.memory_gb, "flops": s.flops}))
        lines.append(json.dumps({"stage": "total", "component": "", "latency_ms": self.total_latency_ms,
                                 "memory_gb": self.peak_memory_gb, "flops": self.total_flops}))
        return "\n".join(lines) + "\n"


def _ms(us: int) -> str:
    return f"{us // 1000:,}" if us % 1000 == 0 else f"{us / 1000:,.3f}"


def _gb(x) -> str:
    return "-" if x is None else f"{x:g}"


def _flops(x) -> str:
    if x is None:
        return "-"
    if x >= 1e10:
        return f"{x / 1e12:.4g}T"
    if x >= 1e6:
        return f"{x / 1e6:.4g}M"
    return f"{x:.4g}"


def render_ledger(records: Sequence[StageRecord]) -> Ledger:
    if not records:
        raise LedgerError("no records")
    grouped: dict[str, list[StageRecord]] = {}
    for r in records:
        grouped.setdefault(r.stage, []).append(r)
    return Ledger(tuple(StageSubtotal(s, tuple(grouped[s])) for s in STAGES if s in grouped))


def mean_records(per_query: Iterable[Sequence[StageRecord]]) -> list[StageRecord]:
    """Average matching (stage, component) records across queries (integer microseconds)."""
    per_query = [list(r) for r in per_query]
    if not per_query:
        raise LedgerError("no records")
    out = []
    for i, first in enumerate(per_query[0]):
        group = [rs[i] for rs in per_query]
        out.append(StageRecord(first.stage, first.component,
                               sum(r.latency_us for r in group) // len(group), first.memory_gb, first.flops))
    return out
