"""Shared oracles for the test suite."""
import numpy as np

from lirdrec.tensor import Tape


def analytic_grads(build, params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = build()
    tape.backward(out)
    return [p.grad.copy() for p in params]


def numeric_grads(build, params, eps=1e-6):
    """Central differences of the scalar ``build()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.value, dtype=np.float64)
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = float(build().value)
            flat[k] = orig - eps
            lo = float(build().value)
            flat[k] = orig
            g.reshape(-1)[k] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def grad_check(build, params, eps=1e-6):
    """Per-parameter relative errors between tape gradients and central differences."""
    ana = analytic_grads(build, params)
    num = numeric_grads(build, params, eps)
    return {p.name: rel_err(a, n) for p, a, n in zip(params, ana, num)}


ACCEPTANCE = []


def report(criterion, ok, detail):
    """Record and print one acceptance verdict line."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def note(line):
    """Record a supporting line (not a verdict) for the acceptance summary."""
    ACCEPTANCE.append(line)
    print(line)
