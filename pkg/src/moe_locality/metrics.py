"""Routing-locality and concentration metrics over a trace.

The step-to-step overlap |E_t ∩ E_{t-1}| / K is the instantaneous reuse; its
mean over a decoding sequence is the expert overlap ratio (EOR), the headline
locality statistic. One *sequence* is the set stream of a fixed
(layer, batch, segment) triple. Also provided: normalized routing entropy,
load-balance coefficient of variation, and unique experts per sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trace import RoutingTrace

__all__ = [
    "MetricsReport",
    "EorReport",
    "SequenceEor",
    "instantaneous_reuse",
    "eor",
    "normalized_entropy",
    "load_balance_cv",
    "unique_experts_per_sequence",
    "compute_metrics",
    "sequence_sets",
]


@dataclass(frozen=True)
class SequenceEor:
    layer: int
    batch: int
    segment: int
    value: float
    n_pairs: int


@dataclass(frozen=True)
class EorReport:
    overall: float
    per_layer: tuple[float, ...]
    per_sequence: tuple[SequenceEor, ...]


@dataclass(frozen=True)
class MetricsReport:
    eor: float
    mean_ir_per_layer: tuple[float, ...]
    entropy_norm: float | None  # None when the trace carries no distributions
    load_cv: float
    unique_experts_per_sequence: float


def sequence_sets(trace: RoutingTrace) -> dict[tuple[int, int, int], list[frozenset[int]]]:
    """Expert-set streams keyed by (layer, batch, segment), in step order."""
    seqs: dict[tuple[int, int, int], list[frozenset[int]]] = {}
    for rec in trace.records:  # records are sorted by (s, t, l, b)
        seqs.setdefault((rec.layer_id, rec.batch_index, rec.segment_id), []).append(
            rec.expert_set
        )
    return seqs


def instantaneous_reuse(prev_set, cur_set, k: int) -> float:
    """Fraction of the current Top-K set shared with the previous step's set."""
    prev_set, cur_set = frozenset(prev_set), frozenset(cur_set)
    if len(prev_set) != k or len(cur_set) != k:
        raise ValueError(
            f"both sets must have size K={k}, got {len(prev_set)} and {len(cur_set)}"
        )
    return len(cur_set & prev_set) / k


def eor(trace: RoutingTrace, pooled: bool = False) -> EorReport:
    """Mean instantaneous reuse per sequence, per layer, and overall.

    The overall value is the unweighted mean over per-sequence EORs; with
    ``pooled`` it is instead the mean over all adjacent step pairs of the
    whole trace. Length-1 segments contribute nothing; a trace with no pair
    at all is an error.
    """
    k = trace.header.top_k
    per_sequence: list[SequenceEor] = []
    for (layer, batch, segment), sets in sorted(sequence_sets(trace).items()):
        if len(sets) < 2:
            continue
        irs = [instantaneous_reuse(sets[i - 1], sets[i], k) for i in range(1, len(sets))]
        per_sequence.append(
            SequenceEor(layer, batch, segment, float(np.mean(irs)), len(irs))
        )
    if not per_sequence:
        raise ValueError("EOR undefined: no sequence has length >= 2")
    layers = sorted({s.layer for s in per_sequence})
    if pooled:
        def agg(seqs):
            pairs = sum(s.n_pairs for s in seqs)
            return sum(s.value * s.n_pairs for s in seqs) / pairs
    else:
        def agg(seqs):
            return float(np.mean([s.value for s in seqs]))
    per_layer = tuple(agg([s for s in per_sequence if s.layer == layer]) for layer in layers)
    return EorReport(
        overall=agg(per_sequence),
        per_layer=per_layer,
        per_sequence=tuple(per_sequence),
    )


def normalized_entropy(p) -> float:
    """Shannon entropy of a distribution divided by ln(N_r), with 0·log 0 = 0."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("need a distribution over at least 2 experts")
    if np.any(p < 0):
        raise ValueError("negative probability entry")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    h = -float(np.sum(nz * np.log(nz)))
    return h / math.log(p.size)


def load_balance_cv(selection_counts) -> float:
    """Population std of per-expert selection counts divided by their mean."""
    counts = np.asarray(selection_counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise ValueError("selection counts are all zero")
    mean = counts.mean()
    return float(np.sqrt(np.mean((counts - mean) ** 2)) / mean)


def unique_experts_per_sequence(trace: RoutingTrace) -> float:
    """Mean |union of routed sets| across (layer, batch, segment) sequences."""
    sizes = [
        len(frozenset().union(*sets)) for sets in sequence_sets(trace).values()
    ]
    if not sizes:
        raise ValueError("trace has no records")
    return float(np.mean(sizes))


def compute_metrics(trace: RoutingTrace, pooled: bool = False) -> MetricsReport:
    """Full metric report for one trace.

    Entropy is the mean over all records of H(P)/ln N_r and is reported as
    None ("unavailable") for index-only traces rather than fabricated. The CV
    uses token-level per-expert routed-slot counts per layer over the whole
    trace, averaged across layers.
    """
    h = trace.header
    eor_report = eor(trace, pooled=pooled)

    entropy_norm = None
    if h.has_probs:
        vals = [normalized_entropy(r.probs) for r in trace.records if r.probs is not None]
        entropy_norm = float(np.mean(vals)) if vals else None

    counts = np.zeros((h.n_moe_layers, h.n_routed_experts), dtype=np.int64)
    for rec in trace.records:
        for e in rec.topk_indices:
            counts[rec.layer_id, e] += 1
    cvs = [load_balance_cv(counts[layer]) for layer in range(h.n_moe_layers)]

    return MetricsReport(
        eor=eor_report.overall,
        mean_ir_per_layer=eor_report.per_layer,
        entropy_norm=entropy_norm,
        load_cv=float(np.mean(cvs)),
        unique_experts_per_sequence=unique_experts_per_sequence(trace),
    )
