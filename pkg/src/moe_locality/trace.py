"""Routing-trace data model, JSONL on-disk format, validation, and a synthetic generator.

A routing trace records which experts a Mixture-of-Experts router selected at
every decode step. Records are keyed by (segment, step, layer, batch): a
*segment* is one request/decoding session, *step* is the 0-based decode step
within the segment, *layer* is the 0-based MoE-layer index, and *batch* is the
0-based batch slot. Each record carries the Top-K expert index list and,
optionally, the full routing distribution over all routed experts.

Expert ids are 0-based everywhere in this package (storage included), even
though much of the literature indexes experts from 1.

On-disk format (UTF-8, one JSON object per line):

    {"type":"header","n_moe_layers":L,"n_routed_experts":N,"top_k":K,"batch_size":B,"has_probs":bool}
    {"s":0,"t":0,"l":0,"b":0,"topk":[3,17,...],"probs":[...]}   # probs only when has_probs
    ...

Probabilities are serialized with 17 significant digits so that
``parse_trace(write_trace(x)) == x`` holds bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

PROB_SUM_TOL = 1e-9

__all__ = [
    "PROB_SUM_TOL",
    "TraceError",
    "Violation",
    "TraceHeader",
    "StepRecord",
    "RoutingTrace",
    "SynthConfig",
    "parse_trace",
    "write_trace",
    "load_trace",
    "save_trace",
    "synth_trace",
    "validate_trace",
    "topk_of_probs",
    "slice_batch",
]


class TraceError(ValueError):
    """Raised for malformed or internally inconsistent trace input.

    ``line_no`` is the 1-based input line when the failure is tied to a
    specific line, else None. ``violations`` carries the structured findings
    when the failure came from full-trace validation.
    """

    def __init__(self, message, line_no=None, violations=()):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no
        self.violations = tuple(violations)


@dataclass(frozen=True)
class Violation:
    """One invariant breach found by :func:`validate_trace`."""

    rule: str
    where: str
    message: str

    def __str__(self):
        return f"[{self.rule}] {self.where}: {self.message}"


@dataclass(frozen=True)
class TraceHeader:
    n_moe_layers: int
    n_routed_experts: int
    top_k: int
    batch_size: int
    has_probs: bool = False

    def __post_init__(self):
        for name in ("n_moe_layers", "n_routed_experts", "top_k", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.top_k > self.n_routed_experts:
            raise ValueError(
                f"top_k ({self.top_k}) exceeds n_routed_experts ({self.n_routed_experts})"
            )


@dataclass(frozen=True)
class StepRecord:
    """One routing decision. Cross-record invariants are checked by validate_trace,
    not here, so that invalid traces can be constructed and then diagnosed."""

    segment_id: int
    step_index: int
    layer_id: int
    batch_index: int
    topk_indices: tuple[int, ...]
    probs: tuple[float, ...] | None = None

    @property
    def key(self):
        return (self.segment_id, self.step_index, self.layer_id, self.batch_index)

    @property
    def expert_set(self) -> frozenset[int]:
        return frozenset(self.topk_indices)


@dataclass(frozen=True)
class RoutingTrace:
    header: TraceHeader
    records: tuple[StepRecord, ...]
    segment_lengths: tuple[int, ...]

    @classmethod
    def from_records(cls, header: TraceHeader, records: Iterable[StepRecord]) -> "RoutingTrace":
        """Build a trace with normalized ordering and derived segment lengths."""
        recs = tuple(sorted(records, key=lambda r: r.key))
        seg_len: dict[int, int] = {}
        for r in recs:
            seg_len[r.segment_id] = max(seg_len.get(r.segment_id, 0), r.step_index + 1)
        n_seg = max(seg_len) + 1 if seg_len else 0
        lengths = tuple(seg_len.get(s, 0) for s in range(n_seg))
        return cls(header=header, records=recs, segment_lengths=lengths)

    @property
    def n_segments(self) -> int:
        return len(self.segment_lengths)

    def record_at(self, segment, step, layer, batch) -> StepRecord:
        """O(1) lookup on a dense, sorted trace (validate first)."""
        offset = sum(self.segment_lengths[:segment])
        h = self.header
        idx = ((offset + step) * h.n_moe_layers + layer) * h.batch_size + batch
        rec = self.records[idx]
        if rec.key != (segment, step, layer, batch):
            raise KeyError(f"trace is not dense at {(segment, step, layer, batch)}")
        return rec

    def iter_steps(self) -> Iterator[tuple[int, int]]:
        """All (segment, step) pairs in order."""
        for s, length in enumerate(self.segment_lengths):
            for t in range(length):
                yield s, t


def topk_of_probs(probs: Sequence[float], k: int) -> tuple[int, ...]:
    """Indices of the k largest probabilities, descending, ties to the lowest index.

    This is the global tie rule used everywhere in the package.
    """
    order = np.argsort(-np.asarray(probs, dtype=float), kind="stable")
    return tuple(int(i) for i in order[:k])


# ---------------------------------------------------------------------------
# Parsing / serialization
# ---------------------------------------------------------------------------


def _iter_lines(stream) -> Iterator[bytes]:
    if isinstance(stream, (bytes, bytearray)):
        yield from stream.splitlines()
    else:
        yield from stream


def _parse_header(obj, line_no) -> TraceHeader:
    if obj.get("type") != "header":
        raise TraceError('first line must be a {"type":"header",...} record', line_no)
    try:
        return TraceHeader(
            n_moe_layers=obj["n_moe_layers"],
            n_routed_experts=obj["n_routed_experts"],
            top_k=obj["top_k"],
            batch_size=obj["batch_size"],
            has_probs=bool(obj.get("has_probs", False)),
        )
    except KeyError as e:
        raise TraceError(f"header missing field {e.args[0]!r}", line_no) from None
    except ValueError as e:
        raise TraceError(str(e), line_no) from None


def _parse_record(obj, line_no, has_probs) -> StepRecord:
    try:
        s, t, l, b = obj["s"], obj["t"], obj["l"], obj["b"]
        topk = obj["topk"]
    except KeyError as e:
        raise TraceError(f"record missing field {e.args[0]!r}", line_no) from None
    for name, v in (("s", s), ("t", t), ("l", l), ("b", b)):
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise TraceError(f"field {name!r} must be a non-negative integer, got {v!r}", line_no)
    if not isinstance(topk, list) or not all(
        isinstance(e, int) and not isinstance(e, bool) for e in topk
    ):
        raise TraceError("field 'topk' must be a list of integers", line_no)
    probs = obj.get("probs")
    if has_probs and probs is None:
        raise TraceError("header declares has_probs but record carries no 'probs'", line_no)
    if not has_probs and probs is not None:
        raise TraceError("record carries 'probs' but header declares has_probs=false", line_no)
    if probs is not None:
        if not isinstance(probs, list) or not all(isinstance(p, (int, float)) for p in probs):
            raise TraceError("field 'probs' must be a list of numbers", line_no)
        probs = tuple(float(p) for p in probs)
    return StepRecord(
        segment_id=s,
        step_index=t,
        layer_id=l,
        batch_index=b,
        topk_indices=tuple(topk),
        probs=probs,
    )


def parse_trace(stream: bytes | IO[bytes] | Iterable[bytes], validate: bool = True) -> RoutingTrace:
    """Parse a line-delimited trace, normalize record ordering, and validate.

    Raises TraceError with the 1-based line number for structural problems and
    with the collected violations for semantic ones. ``validate=False`` skips
    the semantic pass so a structurally parseable trace can be handed to
    :func:`validate_trace` for a full violation listing.
    """
    header = None
    records: list[StepRecord] = []
    line_no = 0
    for raw in _iter_lines(stream):
        line_no += 1
        line = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceError(f"malformed JSON ({e.msg})", line_no) from None
        if not isinstance(obj, dict):
            raise TraceError("each line must be a JSON object", line_no)
        if header is None:
            header = _parse_header(obj, line_no)
        else:
            records.append(_parse_record(obj, line_no, header.has_probs))
    if header is None:
        raise TraceError("empty input: missing header line", line_no=None)
    trace = RoutingTrace.from_records(header, records)
    if validate:
        violations = validate_trace(trace)
        if violations:
            raise TraceError(
                f"{len(violations)} invariant violation(s); first: {violations[0]}",
                violations=violations,
            )
    return trace


def _format_record_line(rec: StepRecord) -> str:
    topk = "[" + ",".join(str(e) for e in rec.topk_indices) + "]"
    parts = [
        f'"s":{rec.segment_id}',
        f'"t":{rec.step_index}',
        f'"l":{rec.layer_id}',
        f'"b":{rec.batch_index}',
        f'"topk":{topk}',
    ]
    if rec.probs is not None:
        # 17 significant digits: exact float64 round-trip.
        probs = "[" + ",".join(f"{p:.16e}" for p in rec.probs) + "]"
        parts.append(f'"probs":{probs}')
    return "{" + ",".join(parts) + "}"


def write_trace(trace: RoutingTrace) -> bytes:
    """Serialize a trace in canonical (sorted) record order."""
    h = trace.header
    header_line = json.dumps(
        {
            "type": "header",
            "n_moe_layers": h.n_moe_layers,
            "n_routed_experts": h.n_routed_experts,
            "top_k": h.top_k,
            "batch_size": h.batch_size,
            "has_probs": h.has_probs,
        },
        separators=(",", ":"),
    )
    lines = [header_line]
    lines.extend(_format_record_line(r) for r in sorted(trace.records, key=lambda r: r.key))
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_trace(path) -> RoutingTrace:
    with open(path, "rb") as f:
        return parse_trace(f)


def save_trace(trace: RoutingTrace, path) -> None:
    with open(path, "wb") as f:
        f.write(write_trace(trace))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _validate_record(rec: StepRecord, header: TraceHeader, out: list[Violation]) -> None:
    where = f"(s={rec.segment_id},t={rec.step_index},l={rec.layer_id},b={rec.batch_index})"
    k, n = header.top_k, header.n_routed_experts
    if rec.layer_id >= header.n_moe_layers:
        out.append(Violation("range", where, f"layer_id {rec.layer_id} >= n_moe_layers"))
    if rec.batch_index >= header.batch_size:
        out.append(Violation("range", where, f"batch_index {rec.batch_index} >= batch_size"))
    if len(rec.topk_indices) != k:
        out.append(
            Violation("arity", where, f"topk has {len(rec.topk_indices)} entries, expected K={k}")
        )
    if len(set(rec.topk_indices)) != len(rec.topk_indices):
        out.append(Violation("distinctness", where, "duplicate expert id within topk"))
    for e in rec.topk_indices:
        if not (0 <= e < n):
            out.append(Violation("range", where, f"expert id {e} out of range [0,{n})"))
    if rec.probs is None:
        if header.has_probs:
            out.append(Violation("probs_missing", where, "has_probs header but record lacks probs"))
        return
    p = rec.probs
    if len(p) != n:
        out.append(Violation("probs_shape", where, f"probs length {len(p)}, expected N_r={n}"))
        return
    if any(x < 0 for x in p):
        out.append(Violation("probs_negative", where, "negative probability entry"))
        return
    total = sum(p)
    if abs(total - 1.0) > PROB_SUM_TOL:
        out.append(Violation("probs_sum", where, f"probs sum {total!r} not within {PROB_SUM_TOL} of 1"))
        return
    if len(rec.topk_indices) == k and frozenset(topk_of_probs(p, k)) != rec.expert_set:
        out.append(
            Violation(
                "probs_topk",
                where,
                f"topk {sorted(rec.topk_indices)} is not the Top-{k} of probs "
                f"{sorted(topk_of_probs(p, k))}",
            )
        )


def validate_trace(trace: RoutingTrace) -> list[Violation]:
    """Check every invariant; returns an empty list iff the trace is well-formed.

    Violations are data, not exceptions: each one names the offending record
    coordinates and the rule it breaks.
    """
    out: list[Violation] = []
    h = trace.header
    for rec in trace.records:
        _validate_record(rec, h, out)

    keys = [r.key for r in trace.records]
    if keys != sorted(keys):
        out.append(Violation("ordering", "trace", "records not sorted by (s,t,l,b)"))
    seen: dict[tuple, int] = {}
    for key in keys:
        seen[key] = seen.get(key, 0) + 1
    for key, count in seen.items():
        if count > 1:
            out.append(Violation("duplicate", str(key), f"record appears {count} times"))

    # Coverage: every present (s,t) must carry the full (layer, batch) grid.
    steps: dict[tuple[int, int], set[tuple[int, int]]] = {}
    for s, t, l, b in seen:
        steps.setdefault((s, t), set()).add((l, b))
    full = {(l, b) for l in range(h.n_moe_layers) for b in range(h.batch_size)}
    for (s, t), present in sorted(steps.items()):
        missing = full - present
        for l, b in sorted(missing):
            out.append(
                Violation("coverage", f"(s={s},t={t})", f"missing record for layer={l}, batch={b}")
            )

    # Segment structure: contiguous segment ids, contiguous step indices from 0.
    seg_steps: dict[int, set[int]] = {}
    for s, t in steps:
        seg_steps.setdefault(s, set()).add(t)
    if seg_steps:
        n_seg = max(seg_steps) + 1
        for s in range(n_seg):
            if s not in seg_steps:
                out.append(Violation("segments", f"s={s}", "segment id gap"))
                continue
            t_max = max(seg_steps[s])
            for t in range(t_max + 1):
                if t not in seg_steps[s]:
                    out.append(
                        Violation("contiguity", f"(s={s},t={t})", "step index gap within segment")
                    )
        lengths = tuple(
            max(seg_steps[s]) + 1 if s in seg_steps else 0 for s in range(n_seg)
        )
    else:
        lengths = ()
    if trace.segment_lengths != lengths:
        out.append(
            Violation(
                "segment_lengths",
                "trace",
                f"declared {trace.segment_lengths}, derived {lengths}",
            )
        )
    return out


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Controls the synthetic trace generator.

    ``stickiness`` is the per-slot probability of keeping a previous-step
    expert, so it dials step-to-step overlap from fully random (0.0) to a
    frozen working set (1.0). With ``independent_batches`` off, all batch
    slots share one expert-set stream.
    """

    n_moe_layers: int = 1
    n_routed_experts: int = 16
    top_k: int = 4
    batch_size: int = 1
    n_segments: int = 1
    steps_per_segment: int = 32
    stickiness: float = 0.5
    seed: int = 0
    emit_probs: bool = False
    concentration: float = 4.0
    independent_batches: bool = False

    def __post_init__(self):
        TraceHeader(self.n_moe_layers, self.n_routed_experts, self.top_k, self.batch_size)
        if not 0.0 <= self.stickiness <= 1.0:
            raise ValueError(f"stickiness must be in [0,1], got {self.stickiness}")
        if self.n_segments < 1 or self.steps_per_segment < 1:
            raise ValueError("n_segments and steps_per_segment must be >= 1")
        if self.concentration < 0.0:
            raise ValueError("concentration must be >= 0")

    @property
    def header(self) -> TraceHeader:
        return TraceHeader(
            n_moe_layers=self.n_moe_layers,
            n_routed_experts=self.n_routed_experts,
            top_k=self.top_k,
            batch_size=self.batch_size,
            has_probs=self.emit_probs,
        )


def _sticky_set_stream(rng, n, k, p, steps) -> list[list[int]]:
    """One segment's expert-set sequence: keep each previous expert with
    probability p, refill the open slots uniformly from experts not yet chosen
    for the current step."""
    sets: list[list[int]] = []
    cur = [int(e) for e in rng.choice(n, size=k, replace=False)]
    sets.append(cur)
    for _ in range(1, steps):
        kept = [e for e in cur if rng.random() < p]
        pool = np.array([e for e in range(n) if e not in kept], dtype=int)
        fill = rng.choice(pool, size=k - len(kept), replace=False) if len(kept) < k else []
        cur = kept + [int(e) for e in fill]
        sets.append(cur)
    return sets


def _probs_for_set(rng, n, members, concentration) -> tuple[float, ...]:
    """A distribution whose Top-K is exactly ``members``: member scores are
    lifted above 1 while non-members stay below 1."""
    raw = rng.random(n)
    scores = raw.copy()
    scores[members] = (1.0 + concentration) * (1.0 + raw[members])
    scores /= scores.sum()
    return tuple(float(x) for x in scores)


def synth_trace(cfg: SynthConfig) -> RoutingTrace:
    """Deterministic synthetic routing trace with controllable locality."""
    rng = np.random.default_rng(cfg.seed)
    n, k = cfg.n_routed_experts, cfg.top_k
    n_streams = cfg.batch_size if cfg.independent_batches else 1
    records: list[StepRecord] = []
    for s in range(cfg.n_segments):
        for l in range(cfg.n_moe_layers):
            for stream in range(n_streams):
                sets = _sticky_set_stream(rng, n, k, cfg.stickiness, cfg.steps_per_segment)
                batches = [stream] if cfg.independent_batches else range(cfg.batch_size)
                for t, members in enumerate(sets):
                    probs = None
                    topk = tuple(members)
                    if cfg.emit_probs:
                        probs = _probs_for_set(rng, n, members, cfg.concentration)
                        topk = tuple(
                            sorted(members, key=lambda e: (-probs[e], e))
                        )
                    for b in batches:
                        records.append(
                            StepRecord(
                                segment_id=s,
                                step_index=t,
                                layer_id=l,
                                batch_index=b,
                                topk_indices=topk,
                                probs=probs,
                            )
                        )
    return RoutingTrace.from_records(cfg.header, records)


def slice_batch(trace: RoutingTrace, batch_index: int) -> RoutingTrace:
    """Extract one batch slot as a standalone B=1 trace."""
    if not 0 <= batch_index < trace.header.batch_size:
        raise ValueError(f"batch_index {batch_index} out of range")
    header = replace(trace.header, batch_size=1)
    records = [
        replace(r, batch_index=0)
        for r in trace.records
        if r.batch_index == batch_index
    ]
    return RoutingTrace.from_records(header, records)
