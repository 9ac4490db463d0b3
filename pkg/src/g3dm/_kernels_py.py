"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Tie rules are identical: kNN orders by (squared distance, node index) and max
reductions pick the lowest node index among equal values.
"""

import numpy as np

_CHUNK_ELEMS = 1 << 22


def knn_segments(x, starts, k):
    x = np.ascontiguousarray(x, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    n, dim = x.shape
    out = np.empty((n, k), dtype=np.int64)
    for s in range(starts.size - 1):
        lo, hi = int(starts[s]), int(starts[s + 1])
        size = hi - lo
        if size < 2:
            raise ValueError(f"segment {s} has fewer than 2 nodes")
        kk = min(k, size - 1)
        seg = x[lo:hi]
        rows = max(1, _CHUNK_ELEMS // max(1, size * dim))
        for r0 in range(0, size, rows):
            r1 = min(size, r0 + rows)
            diff = seg[r0:r1, None, :] - seg[None, :, :]
            d = np.einsum("ijc,ijc->ij", diff, diff)
            d[np.arange(r1 - r0), np.arange(r0, r1)] = np.inf
            order = np.argsort(d, axis=1, kind="stable")[:, :kk]
            out[lo + r0 : lo + r1, :kk] = order + lo
            if kk < k:
                out[lo + r0 : lo + r1, kk:] = (order[:, :1] + lo)
    return out


def gather_max(x, nbr):
    x = np.ascontiguousarray(x, dtype=np.float64)
    nbr = np.asarray(nbr, dtype=np.int64)
    g = x[nbr]  # (n, k, ch)
    out = g.max(axis=1)
    hit = g == out[:, None, :]
    big = np.iinfo(np.int64).max
    arg = np.where(hit, nbr[:, :, None], big).min(axis=1)
    return out, arg


def scatter_add_rows(grad, arg, n_rows):
    grad = np.asarray(grad, dtype=np.float64)
    out = np.zeros((n_rows, grad.shape[1]))
    cols = np.broadcast_to(np.arange(grad.shape[1]), grad.shape)
    np.add.at(out, (arg, cols), grad)
    return out


def segment_max(x, starts):
    x = np.asarray(x, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    nseg = starts.size - 1
    out = np.empty((nseg, x.shape[1]))
    arg = np.empty((nseg, x.shape[1]), dtype=np.int64)
    for s in range(nseg):
        seg = x[starts[s] : starts[s + 1]]
        a = np.argmax(seg, axis=0)  # first occurrence on ties
        arg[s] = a + starts[s]
        out[s] = seg[a, np.arange(x.shape[1])]
    return out, arg
