"""Central finite-difference gradient checks shared by unit and acceptance tests."""
import numpy as np


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(loss, arr, idx, h):
    old = arr.flat[idx]
    arr.flat[idx] = old + h
    fp = loss()
    arr.flat[idx] = old - h
    fm = loss()
    arr.flat[idx] = old
    return (fp - fm) / (2.0 * h)


def probe(loss, arrays, grads, n_probes, h, rng, min_rel=1e-3):
    """Compare analytic ``grads[name]`` with central differences at random entries.

    Probes are drawn round-robin over ``arrays`` from entries whose analytic
    gradient is at least ``min_rel`` of that array's largest, so numerical
    noise on vanishing entries does not dominate. Returns ``(name, idx,
    analytic, numeric, rel_err)`` tuples.
    """
    names = [k for k in arrays if k in grads and np.abs(grads[k]).max(initial=0.0) > 0]
    out = []
    pools = {}
    for k in names:
        g = np.abs(grads[k]).ravel()
        pools[k] = np.flatnonzero(g >= min_rel * g.max())
    i = 0
    while len(out) < n_probes and names:
        k = names[i % len(names)]
        idx = int(rng.choice(pools[k]))
        num = numeric_grad(loss, arrays[k], idx, h)
        ana = float(grads[k].flat[idx])
        out.append((k, idx, ana, num, rel_err(ana, num)))
        i += 1
    return out


def worst(results):
    return max(r[4] for r in results) if results else 0.0
