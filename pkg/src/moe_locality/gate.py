"""Softmax gate forward pass, deterministic Top-K selection, and the
distribution-stability checks (probability margin, Pinsker bound).

All probability math runs in float64 with max-subtracted softmax. Ties in
Top-K selection break toward the lowest expert index; that rule is global to
the package so traces and tests are reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

KL_EPS = 1e-12

__all__ = [
    "KL_EPS",
    "GateParams",
    "StabilityVerdict",
    "PinskerResult",
    "softmax",
    "log_softmax",
    "gate_forward",
    "topk",
    "probability_margin",
    "stability_check",
    "pinsker_check",
    "sample_within_margin",
    "stability_campaign",
    "pinsker_campaign",
    "save_gate",
    "load_gate",
]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def gate_forward(h: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Routing distribution softmax(h @ theta) for one hidden state."""
    return softmax(np.asarray(h, dtype=float) @ np.asarray(theta, dtype=float))


def topk(p, k: int) -> tuple[int, ...]:
    """The k highest-probability expert indices, descending, ties to lowest index."""
    p = np.asarray(p, dtype=float)
    if k > p.size:
        raise ValueError(f"K={k} exceeds the number of experts {p.size}")
    order = np.argsort(-p, kind="stable")
    return tuple(int(i) for i in order[:k])


def probability_margin(q, k: int) -> float:
    """Gap between the K-th and (K+1)-th largest probabilities of q.

    Zero exactly at a Top-K boundary tie; requires K < N_r so the (K+1)-th
    entry exists.
    """
    q = np.asarray(q, dtype=float)
    if k >= q.size:
        raise ValueError(f"margin needs K < N_r, got K={k}, N_r={q.size}")
    desc = np.sort(q)[::-1]
    return float(desc[k - 1] - desc[k])


@dataclass(frozen=True)
class StabilityVerdict:
    margin: float
    sup_distance: float
    condition_met: bool  # sup_distance < margin / 2
    sets_equal: bool

    @property
    def holds(self) -> bool:
        """Vacuously true when the margin condition is not met."""
        return self.sets_equal or not self.condition_met


def stability_check(q, p, k: int) -> StabilityVerdict:
    """Does a sup-norm perturbation within half the probability margin leave
    the Top-K set unchanged? ``holds`` is the executable claim: whenever
    ||p - q||_inf < margin/2, the two Top-K sets must agree."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    margin = probability_margin(q, k)
    dist = float(np.max(np.abs(p - q)))
    condition = dist < margin / 2
    equal = frozenset(topk(p, k)) == frozenset(topk(q, k))
    return StabilityVerdict(
        margin=margin, sup_distance=dist, condition_met=condition, sets_equal=equal
    )


@dataclass(frozen=True)
class PinskerResult:
    l1_distance: float
    kl_bound: float  # sqrt(2 * KL(P || Q))
    holds: bool


def pinsker_check(p, q, tol: float = 1e-9) -> PinskerResult:
    """Verify ||P - Q||_1 <= sqrt(2 KL(P || Q)) on one pair."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    l1 = float(np.abs(p - q).sum())
    q_safe = np.maximum(q, KL_EPS)
    mask = p > 0
    kl = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q_safe[mask]))))
    bound = float(np.sqrt(max(2.0 * kl, 0.0)))
    return PinskerResult(l1_distance=l1, kl_bound=bound, holds=l1 <= bound + tol)


# ---------------------------------------------------------------------------
# Randomized check campaigns
# ---------------------------------------------------------------------------


def sample_within_margin(q: np.ndarray, budget: float, rng) -> np.ndarray:
    """A random distribution p with ||p - q||_inf strictly below ``budget``.

    Draws a zero-sum perturbation scaled into the sup-norm ball (so the
    simplex sum is preserved exactly) and halves it until all entries stay
    non-negative; halving never leaves the ball.
    """
    raw = rng.uniform(-1.0, 1.0, size=q.size)
    raw -= raw.mean()
    peak = np.abs(raw).max()
    if peak == 0.0:
        return q.copy()
    delta = raw / peak * (budget * rng.random())
    for _ in range(100):
        if not np.any(q + delta < 0):
            return q + delta
        delta *= 0.5
    return q.copy()  # q has a zero entry the zero-sum draw cannot clear


def stability_campaign(trials: int, n_experts: int, k: int, seed: int = 0) -> dict:
    """Randomized executable form of the margin lemma: perturbations inside
    half the probability margin must never change the Top-K set."""
    rng = np.random.default_rng(seed)
    failures = 0
    checked = 0
    for _ in range(trials):
        q = rng.dirichlet(np.ones(n_experts))
        margin = probability_margin(q, k)
        if margin <= 0:
            continue
        p = sample_within_margin(q, 0.999 * margin / 2.0, rng)
        verdict = stability_check(q, p, k)
        checked += 1
        if verdict.condition_met and not verdict.sets_equal:
            failures += 1
    return {"trials": trials, "checked": checked, "failures": failures}


def pinsker_campaign(trials: int, n_experts: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(trials):
        p = rng.dirichlet(np.ones(n_experts))
        q = rng.dirichlet(np.ones(n_experts))
        if not pinsker_check(p, q).holds:
            failures += 1
    return {"trials": trials, "checked": trials, "failures": failures}


# ---------------------------------------------------------------------------
# Gate parameters
# ---------------------------------------------------------------------------


@dataclass
class GateParams:
    """Trainable gate matrix plus the frozen reference snapshot.

    ``theta0`` is marked read-only at construction; the trainer mutates only
    ``theta`` and the reference path never reads ``theta``.
    """

    theta: np.ndarray  # (d, N_r)
    theta0: np.ndarray  # frozen copy, same shape

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.theta0 = np.asarray(self.theta0, dtype=float).copy()
        if self.theta.shape != self.theta0.shape or self.theta.ndim != 2:
            raise ValueError(
                f"theta {self.theta.shape} and theta0 {self.theta0.shape} must be equal 2-D shapes"
            )
        self.theta0.setflags(write=False)

    @classmethod
    def snapshot(cls, theta: np.ndarray) -> "GateParams":
        theta = np.asarray(theta, dtype=float)
        return cls(theta=theta.copy(), theta0=theta)

    @property
    def d(self) -> int:
        return self.theta.shape[0]

    @property
    def n_experts(self) -> int:
        return self.theta.shape[1]

    def forward(self, h: np.ndarray) -> np.ndarray:
        return gate_forward(h, self.theta)

    def forward_ref(self, h: np.ndarray) -> np.ndarray:
        return gate_forward(h, self.theta0)


_MAGIC = b"GATE"
_LITTLE, _BIG = 0, 1


def save_gate(params: GateParams, path) -> None:
    """Flat binary layout: magic, endianness tag, d, N_r, theta, theta0
    (float64 each), plus a JSON sidecar describing the layout."""
    d, n = params.theta.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BII", _LITTLE, d, n))
        f.write(np.ascontiguousarray(params.theta, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(params.theta0, dtype="<f8").tobytes())
    sidecar = {
        "format": "gate-params-v1",
        "d": d,
        "n_routed_experts": n,
        "dtype": "float64",
        "byte_order": "little",
        "arrays": ["theta", "theta0"],
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_gate(path) -> GateParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a gate-params file (magic {magic!r})")
        endian, d, n = struct.unpack("<BII", f.read(9))
        if endian != _LITTLE:
            raise ValueError("unsupported byte order tag")
        count = d * n
        theta = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(d, n)
        theta0 = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(d, n)
        if f.read(1):
            raise ValueError("trailing bytes after gate matrices")
    return GateParams(theta=theta.copy(), theta0=theta0.copy())
