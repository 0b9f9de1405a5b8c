"""Adam optimizer over a ParamSet."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import OptimizerError, ValidationError


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr > 0:
            raise ValidationError("adam lr must be positive, got %r" % lr)
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValidationError("adam betas must lie in [0, 1)")
        if not eps > 0:
            raise ValidationError("adam eps must be positive")
        st = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, t in params.trainable_items():
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
        return st


def adam_step(params, state):
    """One in-place Adam update using the grads stored on the tensors."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.trainable_items():
        if name not in state.m:
            raise OptimizerError("no optimizer state for parameter %r" % name)
        g = p.grad
        if g is None:
            raise OptimizerError("parameter %r has no gradient; run "
                                 "backward() before adam_step" % name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
