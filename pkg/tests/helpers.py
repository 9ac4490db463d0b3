"""Shared builders for the test suite."""

import math

import numpy as np

from g3dm import autodiff as ad
from g3dm import graphnet as gn
from g3dm.geometry3d import GradientGrid


def random_rows(n, rng, dim=6):
    """Plausible minutiae rows: spread positions, orientation vectors of norm 25."""
    if dim == 3:
        return np.column_stack([rng.uniform(-150, 150, (n, 2)), rng.uniform(0, 2 * np.pi, n)])
    p = rng.uniform(-150, 150, (n, 3))
    o = rng.normal(size=(n, 3))
    o *= 25.0 / np.linalg.norm(o, axis=1, keepdims=True)
    return np.hstack([p, o])


def perturbed_params(cfg, seed, head):
    """Initial parameters with every tensor nudged away from its structured start.

    Zero final layers, unit scales and zero biases hide gradient bugs, so the
    finite-difference checks run on randomised copies.
    """
    rng = np.random.default_rng(seed + 1000)
    out = {}
    for name, v in gn.init_params(cfg, seed, head).items():
        if name.endswith("running_var"):
            out[name] = rng.uniform(0.5, 2.0, v.shape)
        elif head == "stn" and name.startswith("head5.weight"):
            out[name] = rng.normal(scale=0.002, size=v.shape)
        else:
            out[name] = v + rng.normal(scale=0.05, size=v.shape)
    return out


def full_matcher_graph(cfg, n=8, seed=0, training=False):
    """Scalar root over pose correction plus embedding of one ``n``-minutia set.

    Returns ``(root, input_leaf, stn_leaves, embed_leaves)``.
    """
    rng = np.random.default_rng(seed)
    scale = [0.1, 0.1, 0.1, 1, 1, 1] if cfg.input_dim == 6 else [0.1, 0.1, 1]
    x = ad.leaf(random_rows(n, rng, cfg.input_dim) * scale, name="x")
    ps = gn.bind(perturbed_params(cfg, seed, "stn"), "stn.")
    pe = gn.bind(perturbed_params(cfg, seed + 1, "embed"), "embed.")
    starts = np.array([0, n])
    out = gn.matcher_node(x, starts, ps, pe, cfg, training=training)
    w = ad.constant(rng.normal(size=out.shape))
    return ad.sum_(ad.mul(out, w)), x, ps, pe


# brute-force oracles


def oracle_eer(gen, imp):
    """Threshold sweep written with plain loops."""
    cands = sorted(set(list(gen) + list(imp))) + [math.inf]
    curve = []
    for t in cands:
        fmr = sum(1 for s in imp if s >= t) / len(imp)
        fnmr = sum(1 for s in gen if s < t) / len(gen)
        curve.append((t, fmr, fnmr))
    for k, (t, fmr, fnmr) in enumerate(curve):
        if fmr - fnmr <= 0:
            if k == 0:
                return fmr
            _, f0, n0 = curve[k - 1]
            d0, d1 = f0 - n0, fmr - fnmr
            w = d0 / (d0 - d1)
            return f0 + w * (fmr - f0)
    raise AssertionError("no crossing")


def oracle_cmc(scores, gen):
    hits = np.zeros(scores.shape[1])
    n = 0
    for p in range(scores.shape[0]):
        if not gen[p].any():
            continue
        n += 1
        # rank of the best genuine entry: count entries placed before it
        best = None
        for g in range(scores.shape[1]):
            if gen[p, g]:
                before = sum(
                    1 for h in range(scores.shape[1]) if scores[p, h] > scores[p, g] or (scores[p, h] == scores[p, g] and h < g)
                )
                best = before if best is None else min(best, before)
        hits[best:] += 1
    return hits / n


def brute_mine(a, aid, pool, pid):
    out = []
    for i in range(len(a)):
        best, best_j = math.inf, -1
        for j in range(len(pool)):
            if pid[j] == aid[i]:
                continue
            d = float(np.sum((a[i] - pool[j]) ** 2))
            if d < best:
                best, best_j = d, j
        out.append(best_j)
    return out


def brute_knn(pts, k):
    edges = []
    for i in range(len(pts)):
        d = [(float(np.sum((pts[i] - pts[j]) ** 2)), j) for j in range(len(pts)) if j != i]
        edges += [(i, j) for _, j in sorted(d)[:k]]
    return edges


def hemisphere_grid(n=128, radius=200.0, scale=None):
    """Analytic hemisphere centred on the grid, sampled at cell centres."""
    scale = scale if scale is not None else 2 * radius / (n - 1) * 0.98
    c = (n - 1) / 2
    jj, ii = np.mgrid[0:n, 0:n]
    x, y = (ii - c) * scale, (jj - c) * scale
    r2 = x * x + y * y
    mask = r2 < (0.95 * radius) ** 2
    z = np.sqrt(np.clip(radius**2 - r2, 1e-9, None))
    gx = np.where(mask, -x / z, 0.0)
    gy = np.where(mask, -y / z, 0.0)
    grid = GradientGrid(gx, gy, mask, scale=scale, origin=(-c * scale, -c * scale))
    return grid, np.where(mask, z, 0.0)
