"""Optimization pieces: AdamW, cosine annealing, and sharpness-aware updates.

Everything here works on plain dicts mapping parameter names to float64
arrays, so the routines are independent of the model code. AdamW applies
decoupled weight decay to weight matrices only (keys ending in ``.weight``);
biases and batch-norm scale/shift are exempt.

A sharpness-aware (SAM) update takes two gradient evaluations per step: the
gradient at the current point defines an ascent perturbation of L2 radius
``nu`` over all trainable arrays jointly, and the gradient re-evaluated at
the perturbed point is what AdamW actually applies. With ``nu = 0`` the
update reduces to plain AdamW on the first gradient, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class NumericError(ArithmeticError):
    """A non-finite value showed up where the optimizer needs a finite one."""


@dataclass(frozen=True)
class AdamWConfig:
    base_lr: float = 1e-5
    weight_decay: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (np.isfinite(self.base_lr) and self.base_lr > 0):
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not (np.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class CosineSchedule:
    total_epochs: int = 100
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not (np.isfinite(self.min_lr) and self.min_lr >= 0):
            raise ValueError(f"min_lr must be >= 0, got {self.min_lr}")


@dataclass(frozen=True)
class SamConfig:
    nu: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.nu) and self.nu >= 0):
            raise ValueError(f"nu must be finite and >= 0, got {self.nu}")


@dataclass
class AdamWState:
    """First/second moment estimates and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def initial(cls, trainable: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in trainable.items()},
            v={k: np.zeros_like(p) for k, p in trainable.items()},
            t=0,
        )

    def copy(self) -> "AdamWState":
        return AdamWState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def lr_at(schedule: CosineSchedule, config: AdamWConfig, epoch: int) -> float:
    """Cosine-annealed learning rate for an epoch in [0, total_epochs].

    The start, midpoint, and end are pinned to their closed forms
    (base, (base+min)/2, min) so those anchors are exact.
    """
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]"
        )
    if epoch == 0:
        return config.base_lr
    if epoch == schedule.total_epochs:
        return schedule.min_lr
    if 2 * epoch == schedule.total_epochs:
        return (config.base_lr + schedule.min_lr) / 2.0
    cosine = math.cos(math.pi * epoch / schedule.total_epochs)
    return schedule.min_lr + 0.5 * (config.base_lr - schedule.min_lr) * (1.0 + cosine)


def _decayed(key: str) -> bool:
    return key.endswith(".weight")


def _check_finite(arrays: dict[str, np.ndarray], what: str) -> None:
    for key in sorted(arrays):
        if not np.isfinite(arrays[key]).all():
            raise NumericError(f"non-finite {what} in parameter block {key!r}")


def global_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm over all arrays jointly, accumulated in a fixed key order."""
    total = 0.0
    for key in sorted(grads):
        g = grads[key]
        total += float(np.einsum("i,i->", g.ravel(), g.ravel(), optimize=False))
    return math.sqrt(total)


def sam_perturbation(grads: dict[str, np.ndarray], nu: float) -> dict[str, np.ndarray]:
    """Ascent offset ``nu * g / ||g||`` with the norm taken over all arrays.

    A zero gradient (or nu = 0) gives an all-zero offset rather than 0/0.
    """
    if not (np.isfinite(nu) and nu >= 0):
        raise ValueError(f"nu must be finite and >= 0, got {nu}")
    _check_finite(grads, "gradient")
    norm = global_norm(grads)
    if nu == 0.0 or norm == 0.0:
        return {k: np.zeros_like(g) for k, g in grads.items()}
    scale = nu / norm
    return {k: g * scale for k, g in grads.items()}


def adamw_step(
    trainable: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    config: AdamWConfig,
):
    """One AdamW update; returns ``(new_trainable, new_state)``.

    Decoupled decay subtracts ``lr * weight_decay * p`` from weight matrices
    after the moment-based step; other blocks get no decay.
    """
    if set(grads) != set(trainable):
        raise ValueError("gradient keys do not match trainable keys")
    if not (np.isfinite(lr) and lr >= 0):
        raise ValueError(f"lr must be finite and >= 0, got {lr}")
    _check_finite(grads, "gradient")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for key, p in trainable.items():
        g = grads[key]
        m = b1 * state.m[key] + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * g * g
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + config.epsilon)
        if _decayed(key):
            step = step + lr * config.weight_decay * p
        new_params[key] = p - step
        new_m[key] = m
        new_v[key] = v
    _check_finite(new_params, "update")
    return new_params, AdamWState(m=new_m, v=new_v, t=t)


GradFn = Callable[[dict[str, np.ndarray]], tuple[object, dict[str, np.ndarray]]]


def sam_update(
    trainable: dict[str, np.ndarray],
    grad_fn: GradFn,
    state: AdamWState,
    lr: float,
    adamw: AdamWConfig,
    sam: SamConfig,
):
    """One two-pass sharpness-aware step; returns ``(new_trainable, new_state, aux)``.

    ``grad_fn`` maps a trainable dict to ``(aux, grads)`` and must be
    deterministic across the two calls (the caller fixes dropout masks and
    any other stochastic choices). ``aux`` from the first pass is returned.
    When the perturbation is all zero the second pass is skipped, which makes
    ``nu = 0`` bitwise identical to a plain AdamW step.
    """
    aux, grads = grad_fn(trainable)
    offset = sam_perturbation(grads, sam.nu)
    if any(o.any() for o in offset.values()):
        perturbed = {k: trainable[k] + offset[k] for k in trainable}
        _, grads = grad_fn(perturbed)
    new_trainable, new_state = adamw_step(trainable, grads, state, lr, adamw)
    return new_trainable, new_state, aux
