"""Central finite-difference gradient checking.

Rebuilds the graph under test in double precision, compares each
analytic input gradient against (f(x+h) - f(x-h)) / 2h, and reports the
worst relative error |a - n| / max(|a|, |n|, 1e-8).
"""

import numpy as np

from .autodiff import Tensor


def random_tensor(shape, rng, scale=1.0, shift=0.0, requires_grad=True):
    """Float64 tensor with entries drawn from scale*N(0,1) + shift."""
    data = (rng.standard_normal(shape) * scale + shift).astype(np.float64)
    return Tensor(data, requires_grad=requires_grad)


def grad_check(fn, inputs, h=1e-3):
    """Worst relative error of analytic vs numeric gradients.

    ``fn`` maps the input Tensors to a scalar loss Tensor and is called
    repeatedly, so it must be deterministic.  Inputs must be float64.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = fn(*inputs).item()
            flat[idx] = orig - h
            down = fn(*inputs).item()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(a_flat[idx] - numeric) / max(
                abs(a_flat[idx]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
