"""Independent oracles shared by the test modules."""
import itertools

import numpy as np

from fine3d.tensor import Tape


def fd_grad(f, arr, h=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    """Norm-relative error ``|a-b| / max(|a|, |b|, floor)`` of two gradient arrays."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / max(na, nb, floor))


def autodiff_grads(loss_fn, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def max_param_rel_err(loss_fn, params, h=1e-6):
    """Largest per-tensor relative error between autodiff and central differences."""
    ad = autodiff_grads(loss_fn, params)
    worst = 0.0
    for p, g in zip(params, ad):
        fd = fd_grad(lambda: float(loss_fn().data), p.data, h)
        worst = max(worst, rel_err(g, fd))
    return worst


# metrics ----------------------------------------------------------------------

def brute_surface(mask):
    out = []
    X, Y, Z = mask.shape
    for p in zip(*np.nonzero(mask)):
        for axis, step in itertools.product(range(3), (-1, 1)):
            q = list(p)
            q[axis] += step
            if not 0 <= q[axis] < mask.shape[axis] or not mask[tuple(q)]:
                out.append(p)
                break
    return np.array(out, dtype=np.float64).reshape(-1, 3)


def percentile_linear(values, q):
    v = sorted(values)
    pos = q / 100.0 * (len(v) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def brute_hd95(a, b, spacing):
    sa, sb = brute_surface(a) * spacing, brute_surface(b) * spacing
    d = []
    for src, dst in ((sa, sb), (sb, sa)):
        for p in src:
            d.append(min(float(np.sqrt(((p - q) ** 2).sum())) for q in dst))
    return percentile_linear(d, 95)


def brute_dice(a, b):
    a, b = a.ravel().tolist(), b.ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    n = sum(a) + sum(b)
    return 1.0 if n == 0 else 2 * inter / n
