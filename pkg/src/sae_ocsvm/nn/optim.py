from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .autodiff import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place.

    ``params`` maps names to arrays (or Tensors); ``grads`` must carry the
    same names and shapes.  Returns ``(params, state)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        # ndarray has its own .data buffer attribute, so test the type explicitly
        data = p.data if isinstance(p, Tensor) else p
        g = grads[name]
        if g.shape != data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {data.shape} for {name!r}")
        m = state.first_moment.setdefault(name, np.zeros_like(data))
        v = state.second_moment.setdefault(name, np.zeros_like(data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
