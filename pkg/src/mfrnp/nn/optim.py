"""Adam with bias correction, global-norm clipping and step decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mfrnp.errors import ConfigurationError, TrainingError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        shapes = [np.shape(getattr(p, "data", p)) for p in params]
        return cls(m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **hyper)


def clip_by_global_norm(grads, max_norm):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are sequences of arrays; new arrays are returned
    and ``state`` is advanced in place (and also returned).  ``lr`` overrides
    ``state.lr`` for this step only, which is how schedules are applied.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigurationError("params, grads and optimizer state differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient passed to adam_step")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g) or np.shape(g) != state.m[i].shape:
            raise ConfigurationError(f"shape mismatch at parameter {i}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        updated.append(p - (lr / c1) * m / denom)
    return updated, state


def lr_schedule(base_lr, epoch, decay=0.85, step_size=10000):
    """Step decay: ``base_lr * decay ** floor(epoch / step_size)``."""
    if not 0.0 < decay <= 1.0:
        raise ConfigurationError("decay must lie in (0, 1]")
    if step_size < 1:
        raise ConfigurationError("step_size must be >= 1")
    return base_lr * decay ** (epoch // step_size)
