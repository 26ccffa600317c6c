"""Independent oracles shared by the test modules."""
from __future__ import annotations

import numpy as np


def naive_conv(x, weight, bias, padding):
    """Direct nested-loop correlation in float64 (stride 1)."""
    x = np.asarray(x, np.float64)
    weight = np.asarray(weight, np.float64)
    b, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    out = np.zeros((b, cout, oh, ow))
    for n in range(b):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = bias[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += weight[o, c, u, v] * xp[n, c, i + u, j + v]
                    out[n, o, i, j] = acc
    return out


def central_diff(f, x: np.ndarray, h: float = 1e-3, entries=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``x`` (modified in place, restored).

    ``entries`` restricts the flat indices probed; unprobed entries are NaN.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if entries is None else entries
    for j in idx:
        old = flat[j]
        flat[j] = old + h
        fp = f()
        flat[j] = old - h
        fm = f()
        flat[j] = old
        out[j] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_err(analytic, numeric, floor: float = 1e-2) -> float:
    """Max entrywise relative error; denominators are floored at ``floor`` times the
    largest numeric gradient so near-zero entries are judged on an absolute scale."""
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    mask = ~np.isnan(n)
    a, n = a[mask], n[mask]
    scale = max(1e-8, floor * float(np.max(np.abs(n)))) if n.size else 1.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), scale))) if n.size else 0.0
