"""Shared test utilities: finite differences and a small seeded world."""
import numpy as np

from sidsearch.autodiff import Tape, Tensor, parameter

ACCEPTANCE: list[str] = []    # criterion lines, echoed in the terminal summary


def numeric_grad(f, arrays, idx, h=1e-4):
    """Central difference of scalar ``f(*arrays)`` wrt ``arrays[idx]`` (modified in place, then restored)."""
    x = arrays[idx]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(*arrays)
        x[i] = old - h
        down = f(*arrays)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_op(build, arrays, h=1e-4):
    """Max relative error between tape gradients and central differences for every input."""
    def scalar(*xs):
        return float(build(*[Tensor(x) for x in xs]).data)

    ts = [parameter(a.copy()) for a in arrays]
    with Tape() as tape:
        out = build(*ts)
        tape.backward(out)
    worst = 0.0
    for k, t in enumerate(ts):
        num = numeric_grad(scalar, [a.copy() for a in arrays], k, h)
        worst = max(worst, rel_err(t.grad, num))
    return worst
