"""Adam with bias correction, plus global-norm gradient clipping."""
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def as_arrays(self):
        return {"step": np.array(self.step), **{f"m{i}": a for i, a in enumerate(self.m)},
                **{f"v{i}": a for i, a in enumerate(self.v)}}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of ``params`` (Tensors) with ``grads`` (arrays).

    ``lr`` is a float or one rate per parameter.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or any(m.shape != p.data.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match parameter shapes")
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingDiverged(f"non-finite gradient for {p.name or p.shape}: {bad} entries")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    lrs = list(lr) if isinstance(lr, (list, tuple)) else [lr] * len(params)
    for p, g, m, v, rate in zip(params, grads, state.m, state.v, lrs):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def sgd_step(params, grads, state, lr):
    state.step += 1
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {p.name or p.shape}")
        p.data -= lr * g
    return params, state


def clip_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is None or total <= max_norm or not np.isfinite(total):
        return grads, total
    scale = max_norm / total
    return [g * scale for g in grads], total
