"""Central finite-difference gradient checking used across the test suite."""

import numpy as np

from maq2l.tensor import Tensor


def max_rel_error(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.max(np.abs(analytic - numeric) / scale)


def numeric_grad(f, arrays, index, step=1e-5):
    """Central differences of scalar-valued f w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(base)
        flat[i] = keep - step
        lo = f(base)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(build, arrays, step=1e-5, tol=1e-4):
    """Compare analytic grads of build(list-of-Tensors)->scalar against FD.

    `build` must be deterministic and re-runnable. Returns the worst
    relative error across all inputs.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(leaves)
    loss.backward()

    def scalar(vals):
        fresh = [Tensor(v) for v in vals]
        return float(build(fresh).data)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(scalar, [a.copy() for a in arrays], i, step=step)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        worst = max(worst, float(max_rel_error(ana, num)))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e} >= {tol}"
    return worst
