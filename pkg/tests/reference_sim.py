"""Naive set-based reference implementation of the expert-cache semantics.

Deliberately independent of the package's simulator: state is a plain list of
(expert, last_touch, admitted_at, freq) tuples and every eviction decision is
made by a full scan. BELADY recomputes the farthest next use by searching the
raw future request list. Used only as a test oracle on tiny traces.
"""

from __future__ import annotations


def ordered_unique(xs):
    out = []
    for x in xs:
        if x not in out:
            out.append(x)
    return out


class NaiveLayerSim:
    def __init__(self, capacity, policy):
        self.capacity = capacity
        self.policy = policy
        self.entries = []  # [expert, last_touch, admitted_at, freq]
        self.clock = 0

    def reset(self):
        self.entries = []

    def resident_set(self):
        return {e[0] for e in self.entries}

    def _find(self, expert):
        for entry in self.entries:
            if entry[0] == expert:
                return entry
        return None

    def serve(self, slots, future_uniques=None):
        """One step; returns (token_hits, unique_hits, unique_list, evicted)."""
        uniq = ordered_unique(slots)
        resident_before = self.resident_set()
        token_hits = sum(1 for e in slots if e in resident_before)
        unique_hits = sum(1 for e in uniq if e in resident_before)

        for e in uniq:
            self.clock += 1
            entry = self._find(e)
            if entry is None:
                self.entries.append([e, self.clock, self.clock, 1])
            else:
                entry[1] = self.clock
                entry[3] += 1

        evicted = []
        surplus = 0
        while len(self.entries) > self.capacity:
            candidates = [en for en in self.entries if en[0] not in uniq]
            if candidates:
                victim = self._pick(candidates, future_uniques)
            else:
                victim = self._find(uniq[surplus])
                surplus += 1
            self.entries.remove(victim)
            evicted.append(victim[0])
        return token_hits, unique_hits, uniq, evicted

    def _pick(self, candidates, future_uniques):
        if self.policy == "lru":
            return min(candidates, key=lambda en: en[1])
        if self.policy == "fifo":
            return min(candidates, key=lambda en: en[2])
        if self.policy == "lfu":
            return min(candidates, key=lambda en: (en[3], en[1], en[0]))
        if self.policy == "belady":
            def horizon(en):
                for i, uniq in enumerate(future_uniques):
                    if en[0] in uniq:
                        return i
                return float("inf")
            # Farthest next use first (inf counts as farthest), ties lowest id.
            return min(candidates, key=lambda en: (-horizon(en), en[0]))
        raise ValueError(self.policy)


def naive_simulate(trace, capacity, policy, reset_each_segment):
    """Full-trace reference run; returns per-step stats, events, final sets."""
    header = trace.header
    stats = []
    events = []
    final_resident = []
    for layer in range(header.n_moe_layers):
        sim = NaiveLayerSim(capacity, policy)
        steps = []
        for s, t in trace.iter_steps():
            slots = []
            for b in range(header.batch_size):
                slots.extend(trace.record_at(s, t, layer, b).topk_indices)
            steps.append((s, t, slots))
        prev_segment = None
        for i, (s, t, slots) in enumerate(steps):
            if reset_each_segment and s != prev_segment:
                sim.reset()
            prev_segment = s
            if policy == "belady":
                future = [
                    ordered_unique(sl)
                    for (s2, _t2, sl) in steps[i + 1 :]
                    if not reset_each_segment or s2 == s
                ]
            else:
                future = None
            resident_before = sorted(sim.resident_set())
            token_hits, unique_hits, uniq, evicted = sim.serve(slots, future)
            stats.append(
                {
                    "layer": layer,
                    "segment": s,
                    "step": t,
                    "token_hits": token_hits,
                    "token_total": len(slots),
                    "unique_hits": unique_hits,
                    "unique_total": len(uniq),
                }
            )
            events.append(
                {
                    "layer": layer,
                    "segment": s,
                    "step": t,
                    "resident_before": tuple(resident_before),
                    "evicted": tuple(evicted),
                }
            )
        final_resident.append(tuple(sorted(sim.resident_set())))
    return stats, events, final_resident
