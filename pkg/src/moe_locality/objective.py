"""Locality-shaping objective over a routing-distribution sequence, with
hand-derived analytic gradients and a finite-difference oracle.

Given hidden states h_1..h_T and gate matrix theta, the forward pass produces
P_t = softmax(h_t @ theta) and a frozen reference P_t^ref from the snapshot
theta0. The objective combines:

* trust:  mean_t KL(P_t || P_t^ref) - anchors routing to the snapshot; no
  gradient flows through the reference branch.
* reuse:  -log(rho + 1e-8) where rho is the mean probability mass (scaled by
  1/K) that P_t places on the previous step's Top-K set; the set is a
  constant for differentiation.
* smooth: mean adjacent-step symmetric KL; gradients flow to both steps.
* lag:    symmetric KL against earlier steps {t-d : d in lags}, normalized by
  |lags| regardless of how many lags are in range.
* ws:     mean entropy of window-averaged distributions over complete
  length-W windows (the trailing partial window is discarded by default).

The weighted total is

    lambda_kl * trust
    + alpha_reuse * lambda_reuse * reuse
    + alpha_loc * (lambda_smooth * smooth + lambda_lag * lag + lambda_ws * ws)

with linear warmups alpha = min(1, step / warm_steps). Everything runs in
float64; the analytic gradient is the exact derivative of the value actually
computed, which the finite-difference oracle verifies coordinate by
coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gate import KL_EPS, log_softmax

REUSE_EPS = 1e-8
_LOG_CLAMP = math.log(KL_EPS)

__all__ = [
    "REUSE_EPS",
    "LossWeights",
    "LossBreakdown",
    "McReuseResult",
    "alpha_schedule",
    "routing_distributions",
    "sets_from_rows",
    "entropy",
    "kl_div",
    "sym_kl",
    "trust_loss",
    "reuse_mass",
    "reuse_loss",
    "smooth_loss",
    "lag_loss",
    "ws_loss",
    "total_objective",
    "grad_total",
    "fd_gradient",
    "mc_reuse_expectation",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_kl: float = 0.45
    lambda_reuse: float = 0.2
    lambda_smooth: float = 0.05
    lambda_lag: float = 0.05
    lambda_ws: float = 0.01
    lag_set: tuple[int, ...] = (1, 2, 4, 8, 16)
    window: int = 16
    warm_reuse_steps: int = 400
    warm_loc_steps: int = 800
    eps: float = REUSE_EPS
    # Documented alternatives, off by default:
    lag_normalize_valid: bool = False  # divide by the in-range lag count, not |lags|
    ws_include_partial: bool = False  # weight the trailing partial window by r/W

    def __post_init__(self):
        for name in ("lambda_kl", "lambda_reuse", "lambda_smooth", "lambda_lag", "lambda_ws"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lags = tuple(self.lag_set)
        if not lags or any(d < 1 for d in lags) or list(lags) != sorted(set(lags)):
            raise ValueError("lag_set must be non-empty, distinct, ascending, positive")
        object.__setattr__(self, "lag_set", lags)
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.warm_reuse_steps < 0 or self.warm_loc_steps < 0:
            raise ValueError("warmup lengths must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    trust_kl: float
    reuse_rho: float
    reuse_loss: float
    smooth: float
    lag: float
    ws: float
    alpha_reuse: float
    alpha_loc: float
    total: float

    def reassembled(self, w: LossWeights) -> float:
        """Recompute the total from the parts with the canonical evaluation
        order; must equal ``total`` bitwise."""
        return (
            w.lambda_kl * self.trust_kl
            + self.alpha_reuse * w.lambda_reuse * self.reuse_loss
            + self.alpha_loc
            * (w.lambda_smooth * self.smooth + w.lambda_lag * self.lag + w.lambda_ws * self.ws)
        )


def alpha_schedule(step: int, warm_steps: int) -> float:
    """Linear warmup min(1, step / warm_steps); 1.0 when no warmup is configured."""
    if step < 0:
        raise ValueError("training step must be >= 0")
    if warm_steps <= 0:
        return 1.0
    return min(1.0, step / warm_steps)


def routing_distributions(theta, hiddens) -> np.ndarray:
    """Row-wise softmax(h_t @ theta)."""
    return np.exp(log_softmax(np.asarray(hiddens, dtype=float) @ np.asarray(theta, dtype=float)))


def topk_rows(p_rows: np.ndarray, k: int) -> np.ndarray:
    """Row-wise Top-K index matrix under the global tie rule (lowest index)."""
    return np.argsort(-p_rows, axis=1, kind="stable")[:, :k]


def sets_from_rows(p_rows: np.ndarray, k: int) -> list[tuple[int, ...]]:
    return [tuple(int(i) for i in row) for row in topk_rows(np.asarray(p_rows, float), k)]


# ---------------------------------------------------------------------------
# Individual terms (reference API; total_objective uses the fused path below)
# ---------------------------------------------------------------------------


def entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return -float(np.sum(nz * np.log(nz)))


def kl_div(p, q, eps: float = KL_EPS) -> float:
    """KL(P || Q) with Q clamped below by eps; >= 0 up to clamping."""
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), eps)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def sym_kl(p, q) -> float:
    return 0.5 * (kl_div(p, q) + kl_div(q, p))


def trust_loss(p_seq, pref_seq) -> float:
    p_seq = np.asarray(p_seq, dtype=float)
    pref_seq = np.asarray(pref_seq, dtype=float)
    if p_seq.shape != pref_seq.shape:
        raise ValueError(f"shape mismatch: {p_seq.shape} vs {pref_seq.shape}")
    return float(np.mean([kl_div(p, q) for p, q in zip(p_seq, pref_seq)]))


def reuse_mass(p, prev_set, k: int) -> float:
    """Probability mass on the previous step's routed set, scaled by 1/K.

    Bounded by 1/K since the set covers K entries of a distribution.
    """
    prev = tuple(prev_set)
    if len(set(prev)) != k:
        raise ValueError(f"prev_set must contain K={k} distinct experts")
    p = np.asarray(p, dtype=float)
    return float(p[list(prev)].sum() / k)


def reuse_loss(p_seq, e_seq, eps: float = REUSE_EPS) -> tuple[float, float]:
    """Sequence-level reuse score rho and its stabilized negative log.

    ``e_seq`` are the per-step routed sets; step t is scored against
    e_seq[t-1], so only steps 2..T contribute.
    """
    p_seq = np.asarray(p_seq, dtype=float)
    t_len = len(p_seq)
    if t_len < 2:
        raise ValueError("reuse needs a sequence of length >= 2")
    if len(e_seq) != t_len:
        raise ValueError("e_seq must align with p_seq")
    k = len(tuple(e_seq[0]))
    masses = [reuse_mass(p_seq[t], e_seq[t - 1], k) for t in range(1, t_len)]
    rho = float(np.mean(masses))
    return rho, -math.log(rho + eps)


def smooth_loss(p_seq) -> float:
    p_seq = np.asarray(p_seq, dtype=float)
    if len(p_seq) < 2:
        raise ValueError("smoothness needs a sequence of length >= 2")
    return float(np.mean([sym_kl(p_seq[t], p_seq[t - 1]) for t in range(1, len(p_seq))]))


def lag_loss(p_seq, lags, normalize_valid: bool = False) -> float:
    p_seq = np.asarray(p_seq, dtype=float)
    t_len = len(p_seq)
    if t_len < 2:
        raise ValueError("lag loss needs a sequence of length >= 2")
    lags = tuple(lags)
    if not lags:
        raise ValueError("empty lag set")
    total = 0.0
    for t in range(1, t_len):
        in_range = [d for d in lags if t - d >= 0]
        if not in_range:
            continue
        denom = len(in_range) if normalize_valid else len(lags)
        total += sum(sym_kl(p_seq[t], p_seq[t - d]) for d in in_range) / denom
    return total / (t_len - 1)


def ws_loss(p_seq, window: int, include_partial: bool = False) -> float:
    """Mean entropy of window-averaged distributions.

    Fewer rows than one window yields 0 by convention. With
    ``include_partial`` the trailing remainder of r rows joins with weight
    r / window.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    p_seq = np.asarray(p_seq, dtype=float)
    t_len = len(p_seq)
    n = t_len // window
    terms: list[tuple[float, float]] = [
        (1.0, entropy(p_seq[b * window : (b + 1) * window].mean(axis=0))) for b in range(n)
    ]
    rem = t_len - n * window
    if include_partial and rem > 0:
        terms.append((rem / window, entropy(p_seq[n * window :].mean(axis=0))))
    denom = sum(wgt for wgt, _ in terms)
    if denom == 0:
        return 0.0
    return sum(wgt * h for wgt, h in terms) / denom


# ---------------------------------------------------------------------------
# Fused forward / backward
# ---------------------------------------------------------------------------


def _forward(theta, theta0, hiddens):
    hiddens = np.asarray(hiddens, dtype=float)
    if hiddens.ndim != 2:
        raise ValueError("hiddens must be a T x d matrix")
    if len(hiddens) < 2:
        raise ValueError("objective needs a sequence of length >= 2")
    logp = log_softmax(hiddens @ np.asarray(theta, dtype=float))
    logref = log_softmax(hiddens @ np.asarray(theta0, dtype=float))
    return hiddens, logp, np.exp(logp), logref


def _pair_symkl(logp, p, idx_a, idx_b, want_grad):
    """Values (and both-sided dL/dP) of SymKL(P[a], P[b]) for index arrays."""
    la, lb = logp[idx_a], logp[idx_b]
    a, b = p[idx_a], p[idx_b]
    lac = np.maximum(la, _LOG_CLAMP)
    lbc = np.maximum(lb, _LOG_CLAMP)
    vals = 0.5 * ((a * (la - lbc)).sum(axis=1) + (b * (lb - lac)).sum(axis=1))
    if not want_grad:
        return vals, None, None
    mask_a = la > _LOG_CLAMP
    mask_b = lb > _LOG_CLAMP
    ratio_ba = np.where(mask_a, np.exp(np.where(mask_a, lb - la, 0.0)), 0.0)
    ratio_ab = np.where(mask_b, np.exp(np.where(mask_b, la - lb, 0.0)), 0.0)
    da = 0.5 * ((la - lbc + 1.0) - ratio_ba)
    db = 0.5 * ((lb - lac + 1.0) - ratio_ab)
    return vals, da, db


def _evaluate(theta, theta0, hiddens, w: LossWeights, train_step: int, top_k: int,
              want_grad: bool):
    h, logp, p, logref = _forward(theta, theta0, hiddens)
    t_len, n = p.shape
    grad_p = np.zeros_like(p) if want_grad else None

    a_reuse = alpha_schedule(train_step, w.warm_reuse_steps)
    a_loc = alpha_schedule(train_step, w.warm_loc_steps)

    # trust: mean_t KL(P_t || Pref_t), reference clamped and constant.
    logref_c = np.maximum(logref, _LOG_CLAMP)
    trust = float((p * (logp - logref_c)).sum(axis=1).mean())
    if want_grad and w.lambda_kl > 0:
        grad_p += (w.lambda_kl / t_len) * (logp - logref_c + 1.0)

    # reuse: previous-step Top-K sets are constants.
    prev_sets = topk_rows(p, top_k)[:-1]  # set of step t-1 scores step t
    cur_rows = np.arange(1, t_len)[:, None]
    masses = p[cur_rows, prev_sets].sum(axis=1) / top_k
    rho = float(masses.mean())
    reuse = -math.log(rho + w.eps)
    if want_grad:
        w_reuse = a_reuse * w.lambda_reuse
        if w_reuse > 0:
            coef = w_reuse * (-1.0 / (rho + w.eps)) / (t_len - 1) / top_k
            np.add.at(grad_p, (cur_rows, prev_sets), coef)

    # smooth: adjacent symmetric KL, both sides differentiable.
    idx_a = np.arange(1, t_len)
    idx_b = idx_a - 1
    w_smooth = a_loc * w.lambda_smooth
    vals, da, db = _pair_symkl(logp, p, idx_a, idx_b, want_grad and w_smooth > 0)
    smooth = float(vals.mean())
    if want_grad and w_smooth > 0:
        coef = w_smooth / (t_len - 1)
        np.add.at(grad_p, idx_a, coef * da)
        np.add.at(grad_p, idx_b, coef * db)

    # lag: per lag distance, steps with t-d in range.
    lag_total = 0.0
    w_lag = a_loc * w.lambda_lag
    for d in w.lag_set:
        if d >= t_len:
            continue
        idx_a = np.arange(d, t_len)
        idx_a = idx_a[idx_a >= 1]
        idx_b = idx_a - d
        if idx_a.size == 0:
            continue
        if w.lag_normalize_valid:
            n_valid = np.array(
                [sum(1 for dd in w.lag_set if t - dd >= 0) for t in idx_a], dtype=float
            )
        else:
            n_valid = np.full(idx_a.size, float(len(w.lag_set)))
        vals, da, db = _pair_symkl(logp, p, idx_a, idx_b, want_grad and w_lag > 0)
        lag_total += float((vals / n_valid).sum())
        if want_grad and w_lag > 0:
            coef = (w_lag / (t_len - 1)) / n_valid[:, None]
            np.add.at(grad_p, idx_a, coef * da)
            np.add.at(grad_p, idx_b, coef * db)
    lag = lag_total / (t_len - 1)

    # ws: entropy of window means.
    n_full = t_len // w.window
    rem = t_len - n_full * w.window
    win_weights = [1.0] * n_full
    if w.ws_include_partial and rem > 0:
        win_weights.append(rem / w.window)
    denom = sum(win_weights)
    ws = 0.0
    if denom > 0:
        w_ws = a_loc * w.lambda_ws
        acc = 0.0
        for b, wgt in enumerate(win_weights):
            rows = slice(b * w.window, min((b + 1) * w.window, t_len))
            block = p[rows]
            pbar = block.mean(axis=0)
            pos = pbar > 0
            logbar = np.where(pos, np.log(np.where(pos, pbar, 1.0)), 0.0)
            acc += wgt * float(-(pbar * logbar).sum())
            if want_grad and w_ws > 0:
                grad_p[rows] += w_ws * (wgt / denom) * np.where(pos, -(logbar + 1.0), 0.0) / len(block)
        ws = acc / denom

    total = (
        w.lambda_kl * trust
        + a_reuse * w.lambda_reuse * reuse
        + a_loc * (w.lambda_smooth * smooth + w.lambda_lag * lag + w.lambda_ws * ws)
    )
    breakdown = LossBreakdown(
        trust_kl=trust,
        reuse_rho=rho,
        reuse_loss=reuse,
        smooth=smooth,
        lag=lag,
        ws=ws,
        alpha_reuse=a_reuse,
        alpha_loc=a_loc,
        total=total,
    )
    if not want_grad:
        return breakdown, None
    # Chain through the row-wise softmax: dL/dz = P * (U - <P, U>).
    inner = (p * grad_p).sum(axis=1, keepdims=True)
    g_logits = p * (grad_p - inner)
    return breakdown, h.T @ g_logits


def total_objective(theta, theta0, hiddens, w: LossWeights, train_step: int,
                    top_k: int) -> LossBreakdown:
    """Forward pass of the full objective on one hidden-state sequence."""
    breakdown, _ = _evaluate(theta, theta0, hiddens, w, train_step, top_k, want_grad=False)
    return breakdown


def grad_total(theta, theta0, hiddens, w: LossWeights, train_step: int,
               top_k: int) -> np.ndarray:
    """Analytic d(total)/d(theta), exact for the computed objective value.

    The previous-step Top-K sets (reuse) and the reference distributions
    (trust) are constants; the symmetric-KL terms push gradient into both of
    their arguments.
    """
    _, grad = _evaluate(theta, theta0, hiddens, w, train_step, top_k, want_grad=True)
    return grad


def fd_gradient(theta, theta0, hiddens, w: LossWeights, train_step: int, top_k: int,
                h_step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle, one objective pair per coordinate."""
    theta = np.asarray(theta, dtype=float)
    if theta.size > 10_000:
        raise ValueError("finite differences limited to <= 1e4 coordinates")
    grad = np.zeros_like(theta)
    for idx in np.ndindex(*theta.shape):
        plus = theta.copy()
        plus[idx] += h_step
        minus = theta.copy()
        minus[idx] -= h_step
        f_plus = total_objective(plus, theta0, hiddens, w, train_step, top_k).total
        f_minus = total_objective(minus, theta0, hiddens, w, train_step, top_k).total
        grad[idx] = (f_plus - f_minus) / (2.0 * h_step)
    return grad


# ---------------------------------------------------------------------------
# Monte Carlo check of the reuse-mass expectation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McReuseResult:
    estimate: float  # mean reused-sample count over draws
    expected: float  # K^2 * m = K * (mass on the previous set)
    stderr: float  # binomial standard error of the estimate
    z_score: float
    n_samples: int

    @property
    def abs_error(self) -> float:
        return abs(self.estimate - self.expected)


def mc_reuse_expectation(p, prev_set, k: int, n_samples: int, seed: int = 0) -> McReuseResult:
    """Sample K experts i.i.d. from P per draw and count how many land in the
    previous set; the mean must match K^2 times the reuse mass."""
    p = np.asarray(p, dtype=float)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("p is not a distribution")
    prev = sorted(set(prev_set))
    if len(prev) != k:
        raise ValueError(f"prev_set must contain K={k} distinct experts")

    rng = np.random.default_rng(seed)
    cdf = np.cumsum(p)
    draws = np.searchsorted(cdf, rng.random((n_samples, k)), side="right")
    draws = np.minimum(draws, p.size - 1)
    reused = np.isin(draws, prev).sum(axis=1)

    q = float(p[prev].sum())
    expected = k * q  # equals K^2 * reuse_mass
    estimate = float(reused.mean())
    stderr = math.sqrt(k * q * (1.0 - q) / n_samples)
    if stderr > 0:
        z = (estimate - expected) / stderr
    else:
        z = 0.0 if estimate == expected else math.inf
    return McReuseResult(
        estimate=estimate, expected=expected, stderr=stderr, z_score=z, n_samples=n_samples
    )
