"""Finite-difference oracle shared by the test modules."""
import numpy as np

from csmixer import tensor as T


def fd_grad(f, arrays, i, step=1e-5):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``."""
    a = arrays[i]
    out = np.zeros_like(a)
    flat, gflat = a.reshape(-1), out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        hi = f(*arrays)
        flat[j] = orig - step
        lo = f(*arrays)
        flat[j] = orig
        gflat[j] = (hi - lo) / (2 * step)
    return out


def analytic_grads(build, arrays):
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = build(*ts)
    tape.backward(loss)
    return [t.grad for t in ts]


def rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grads(build, arrays, tol=1e-6, step=1e-5):
    """Return the worst relative error of analytic vs central-difference gradients."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = analytic_grads(build, arrays)

    def f(*arrs):
        return build(*[T.Tensor(a) for a in arrs]).item()

    # central differences carry ~1e-16*|loss|/step of rounding noise, so entries
    # much smaller than the loss scale are compared against this floor instead
    floor = 1e-4 * max(1.0, abs(f(*arrays)))
    worst = 0.0
    for i, g in enumerate(grads):
        num = fd_grad(f, arrays, i, step)
        worst = max(worst, rel_err(g, num, floor))
    return worst
