"""Training losses: class-weighted margin loss, CVaR tail aggregation, and a
pairwise AUC surrogate.

Per-sample loss (vector-scaling form). With the signed label y in {-1, +1}
(label 0 maps to -1), a per-class weight omega, logit multiplier zeta, and
additive margin delta:

    loss = omega * log(1 + exp(delta - zeta * y * logit))

Unit parameters (omega 1, zeta 1, delta 0) recover plain logistic loss on
signed labels.

CVaR aggregation. Instead of the batch mean, the tail average
``min_lambda  lambda + mean(relu(l_i - lambda)) / alpha`` focuses the
gradient on the worst ``alpha`` fraction of the batch. The inner problem is
solved by bisection on [min(l), max(l)]; at the optimum the objective's
gradient routes through the samples strictly above lambda* with weight
``1 / (alpha * m)`` each (ties at lambda* contribute nothing). With
``alpha = 1`` the aggregate is exactly the mean and every sample carries
weight ``1 / m``.

AUC surrogate. Over all real/fake logit pairs (h_r, h_f):

    mean over pairs of log(1 + exp(-(h_r - h_f)))

a smooth stand-in for the pair misranking rate; it needs at least one sample
of each class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import as_binary_labels, as_score_vector


class AucUndefinedError(ValueError):
    """AUC terms need at least one real and one fake sample."""


@dataclass(frozen=True)
class VsParams:
    """Per-class weights, logit multipliers, and additive margins."""

    omega_fake: float = 1.0
    omega_real: float = 1.0
    zeta_fake: float = 1.2
    zeta_real: float = 0.8
    delta_fake: float = 0.05
    delta_real: float = -0.05

    def __post_init__(self):
        for name in ("omega_fake", "omega_real", "zeta_fake", "zeta_real"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value}")
        for name in ("delta_fake", "delta_real"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")


UNIT_VS = VsParams(
    omega_fake=1.0, omega_real=1.0, zeta_fake=1.0, zeta_real=1.0,
    delta_fake=0.0, delta_real=0.0,
)


@dataclass(frozen=True)
class CvarConfig:
    alpha: float = 0.9
    lambda_tolerance: float = 1e-8
    max_bisection_iters: int = 100

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and 0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.lambda_tolerance > 0:
            raise ValueError("lambda_tolerance must be > 0")
        if self.max_bisection_iters < 1:
            raise ValueError("max_bisection_iters must be >= 1")


@dataclass(frozen=True)
class AucConfig:
    gamma: float = 0.6

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + exp(x)) without overflow for large |x|.
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def vs_loss(logits, labels, params: VsParams = VsParams()):
    """Per-sample margin loss and its derivative w.r.t. each logit.

    Accepts scalars or 1-D arrays; returns ``(values, derivatives)`` with the
    input's shape. Labels must be 0 (fake) or 1 (real).
    """
    scalar = np.ndim(logits) == 0
    h = as_score_vector(np.atleast_1d(logits), name="logits")
    y01 = as_binary_labels(np.atleast_1d(labels), n=h.size)
    y = np.where(y01 == 1, 1.0, -1.0)
    omega = np.where(y01 == 1, params.omega_real, params.omega_fake)
    zeta = np.where(y01 == 1, params.zeta_real, params.zeta_fake)
    delta = np.where(y01 == 1, params.delta_real, params.delta_fake)
    z = delta - zeta * y * h
    values = omega * _softplus(z)
    derivs = omega * _sigmoid(z) * (-zeta * y)
    if scalar:
        return float(values[0]), float(derivs[0])
    return values, derivs


def ce_loss(logits, labels):
    """Plain logistic loss on signed labels: vs_loss at unit parameters."""
    return vs_loss(logits, labels, UNIT_VS)


def default_omegas(n_real: int, n_fake: int) -> tuple[float, float]:
    """Inverse-frequency class weights ``m / (2 * m_c)``; returns (omega_fake, omega_real)."""
    if n_real < 1 or n_fake < 1:
        raise ValueError("class weights need at least one sample per class")
    m = n_real + n_fake
    return m / (2.0 * n_fake), m / (2.0 * n_real)


def cvar_objective(losses, lam: float, alpha: float) -> float:
    """The scalar objective ``lam + mean(relu(l - lam)) / alpha``."""
    l = as_score_vector(losses, name="losses")
    return float(lam + np.maximum(l - lam, 0.0).sum() / (alpha * l.size))


def cvar_solve_lambda(losses, alpha: float, config: CvarConfig | None = None) -> float:
    """Threshold lambda* minimizing the CVaR objective, by bisection.

    The subgradient of the objective in lambda is ``1 - |{l_i > lambda}| / (alpha m)``,
    nonpositive below the optimum and nonnegative above it, so bisection on
    [min(l), max(l)] converges; the returned value is snapped to the best of
    the bracket endpoints and any sample values inside the bracket, which
    lands on an exact minimizer.
    """
    cfg = config if config is not None else CvarConfig(alpha=alpha)
    if not (np.isfinite(alpha) and 0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    l = as_score_vector(losses, name="losses")
    lo, hi = float(l.min()), float(l.max())
    if alpha == 1.0 or lo == hi:
        # every sample is in the tail; any lambda <= min works, use min.
        return lo
    target = alpha * l.size
    for _ in range(cfg.max_bisection_iters):
        if hi - lo <= cfg.lambda_tolerance:
            break
        mid = 0.5 * (lo + hi)
        above = int((l > mid).sum())
        if above > target:
            lo = mid
        elif above < target:
            hi = mid
        else:
            # zero subgradient: mid sits on a flat stretch of the objective.
            return mid
    candidates = [lo, hi] + [float(v) for v in np.unique(l) if lo <= v <= hi]
    values = [cvar_objective(l, c, alpha) for c in candidates]
    return candidates[int(np.argmin(values))]


def cvar_quantile_oracle(losses, alpha: float) -> tuple[float, float]:
    """Order-statistics route to ``(lambda*, cvar)``, for cross-checking.

    lambda* is the ceil((1-alpha)m)-th smallest loss (the mean for the whole
    tail when alpha = 1 uses every sample), and the CVaR value averages the
    largest alpha*m losses with the boundary sample taken fractionally.
    """
    if not (np.isfinite(alpha) and 0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    l = np.sort(as_score_vector(losses, name="losses"))[::-1]
    m = l.size
    k = alpha * m
    whole = int(np.floor(k))
    frac = k - whole
    total = float(l[:whole].sum())
    if frac > 0 and whole < m:
        total += frac * float(l[whole])
    cvar = total / k
    rank = max(1, int(np.ceil((1.0 - alpha) * m - 1e-12)))
    lam = float(np.sort(l)[rank - 1]) if alpha < 1.0 else float(l.min())
    return lam, cvar


def cvar_loss(losses, d_losses, alpha: float, config: CvarConfig | None = None):
    """Tail-average a batch of per-sample losses.

    Returns ``(value, lambda_star, d_total_d_losses)``. The gradient treats
    lambda* as fixed (envelope rule): samples strictly above lambda* carry
    weight ``1/(alpha m)`` times their own derivative, ties at lambda* carry
    zero, and with alpha = 1 every sample carries ``1/m``.
    """
    l = as_score_vector(losses, name="losses")
    d = as_score_vector(d_losses, n=l.size, name="d_losses")
    m = l.size
    if alpha == 1.0:
        return float(l.mean()), float(l.min()), d / m
    lam = cvar_solve_lambda(l, alpha, config)
    value = cvar_objective(l, lam, alpha)
    weight = (l > lam).astype(np.float64) / (alpha * m)
    return value, lam, weight * d


def auc_indicator_loss(logits, labels) -> float:
    """Fraction of real/fake pairs ranked wrong or tied (real logit <= fake logit)."""
    h = as_score_vector(logits, name="logits")
    y = as_binary_labels(labels, n=h.size)
    real = h[y == 1]
    fake = h[y == 0]
    if real.size == 0 or fake.size == 0:
        raise AucUndefinedError("need at least one real and one fake sample")
    bad = (real[:, None] <= fake[None, :]).sum()
    return float(bad) / (real.size * fake.size)


def auc_surrogate_loss(logits, labels):
    """Smooth pairwise ranking loss and its gradient w.r.t. every logit.

    Value: mean over real/fake pairs of log(1 + exp(-(h_real - h_fake))).
    The gradient vector aligns with the input order.
    """
    h = as_score_vector(logits, name="logits")
    y = as_binary_labels(labels, n=h.size)
    real_idx = np.nonzero(y == 1)[0]
    fake_idx = np.nonzero(y == 0)[0]
    if real_idx.size == 0 or fake_idx.size == 0:
        raise AucUndefinedError("need at least one real and one fake sample")
    diff = h[real_idx][:, None] - h[fake_idx][None, :]
    n_pairs = real_idx.size * fake_idx.size
    value = float(_softplus(-diff).sum()) / n_pairs
    # d/d diff of softplus(-diff) is -sigmoid(-diff)
    s = _sigmoid(-diff) / n_pairs
    grad = np.zeros_like(h)
    grad[real_idx] = -s.sum(axis=1)
    grad[fake_idx] = s.sum(axis=0)
    return value, grad


@dataclass
class LossBreakdown:
    """Pieces of one batch loss evaluation."""

    cvar_value: float
    lambda_star: float
    auc_value: float
    total: float
    per_logit_gradient: np.ndarray
    auc_defined: bool = True


def total_loss(
    logits,
    labels,
    vs: VsParams,
    cvar: CvarConfig,
    auc: AucConfig,
) -> LossBreakdown:
    """Batch objective: CVaR of per-sample margin losses plus gamma times the
    pairwise AUC surrogate, with the combined per-logit gradient.

    A single-class batch keeps the CVaR term and drops the AUC term (value 0,
    ``auc_defined`` False) instead of failing.
    """
    h = as_score_vector(logits, name="logits")
    y = as_binary_labels(labels, n=h.size)
    values, derivs = vs_loss(h, y, vs)
    cvar_value, lam, grad = cvar_loss(values, derivs, cvar.alpha, cvar)
    try:
        auc_value, auc_grad = auc_surrogate_loss(h, y)
        auc_defined = True
    except AucUndefinedError:
        auc_value, auc_grad, auc_defined = 0.0, np.zeros_like(h), False
    total = cvar_value + auc.gamma * auc_value
    gradient = grad + auc.gamma * auc_grad
    return LossBreakdown(
        cvar_value=cvar_value,
        lambda_star=lam,
        auc_value=auc_value,
        total=total,
        per_logit_gradient=gradient,
        auc_defined=auc_defined,
    )
