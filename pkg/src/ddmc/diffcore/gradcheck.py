"""Finite-difference validation of reverse-mode gradients."""

import numpy as np

from ..errors import GraphError


def grad_check(fn, inputs, eps=1e-5, n_samples=None, rng=None):
    """Compare analytic grads of fn against central finite differences.

    Parameters
    ----------
    fn : callable
        Maps the input tensors to a scalar Tensor.  Must be a pure
        function of the input values (re-evaluated many times).
    inputs : sequence of Tensor
        Float64 tensors with requires_grad=True; perturbed in place.
    eps : float
        Central difference step.
    n_samples : int, optional
        If given, check only this many randomly chosen elements per
        input instead of every element.
    rng : numpy Generator, optional
        Required when n_samples is given.

    Returns
    -------
    float
        Worst relative error |a - n| / max(|a|, |n|) over all checked
        elements, treating pairs below 1e-12 as exact.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise GraphError("grad_check inputs must be float64, got %s"
                             % t.data.dtype)
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise GraphError("grad_check target must be scalar")
    out.backward()
    analytic = [np.array(t.grad, copy=True) for t in inputs]

    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = an.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=n_samples, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*inputs).data)
            flat[i] = orig - eps
            fm = float(fn(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = aflat[i]
            scale = max(abs(a), abs(num))
            if scale < 1e-12:
                continue
            worst = max(worst, abs(a - num) / scale)
    return worst
