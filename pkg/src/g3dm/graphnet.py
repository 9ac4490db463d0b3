"""EdgeConv graph network: spatial transformer and 256-d graph embedding.

Minutiae sets of a batch are stacked into one feature matrix and split by
segment offsets (``starts``); kNN, neighbourhood max and pooling never cross a
segment boundary.  Zero padding is therefore never seen by the network, which
makes embeddings independent of the padded length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geometry3d import Pose, Template3D, apply_pose, euler_factor_derivatives, euler_factors

MIN_MINUTIAE = 4
EMBED_DIM = 256


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    k: int = 20
    input_dim: int = 6
    edgeconv_widths: tuple = (64, 64, 128, 256, 512)
    concat_width: int = 1024
    stn_mlp_widths: tuple = (512, 256, 128, 64, 6)
    embed_mlp_widths: tuple = (512, 256)
    residual_layers: tuple = (1, 3)
    normalization: bool = True
    angle_bounds: tuple = (math.pi / 2, math.pi, math.pi / 2)
    orientation_mode: str = "as-printed"
    matrix_mode_2d: str = "proper-rotation"
    slope: float = 0.2
    centre_inputs: bool = False  # subtract each set's position centroid before every backbone

    def __post_init__(self):
        if self.input_dim not in (3, 6):
            raise NetworkError("input_dim must be 6 (3D minutiae) or 3 (2D baseline)")
        if len(self.edgeconv_widths) != 5:
            raise NetworkError("exactly 5 EdgeConv widths are required")
        if sum(self.edgeconv_widths) != self.concat_width:
            raise NetworkError(
                f"EdgeConv widths sum to {sum(self.edgeconv_widths)}, declared concat width is {self.concat_width}"
            )
        if len(self.embed_mlp_widths) != 2 or self.embed_mlp_widths[-1] != EMBED_DIM:
            raise NetworkError("embedding head needs 2 layers ending in 256")
        pose_dim = 6 if self.input_dim == 6 else 3
        if len(self.stn_mlp_widths) != 5 or self.stn_mlp_widths[-1] != pose_dim:
            raise NetworkError(f"transformer head needs 5 layers ending in {pose_dim}")
        if len(self.angle_bounds) != pose_dim // 2 or min(self.angle_bounds) <= 0:
            raise NetworkError("one positive angle bound per rotation angle")
        if self.k < 1:
            raise NetworkError("k must be positive")
        if any(r not in (1, 2, 3, 4, 5) for r in self.residual_layers):
            raise NetworkError("residual layers are 1-based EdgeConv indices")
        if self.orientation_mode not in ("as-printed", "rotate-only"):
            raise NetworkError(f"unknown orientation mode {self.orientation_mode!r}")

    @classmethod
    def baseline_2d(cls, **kw) -> "NetworkConfig":
        kw.setdefault("input_dim", 3)
        kw.setdefault("stn_mlp_widths", (512, 256, 128, 64, 3))
        kw.setdefault("angle_bounds", (math.pi,))
        return cls(**kw)

    @property
    def pose_dim(self) -> int:
        return 6 if self.input_dim == 6 else 3


# ---------------------------------------------------------------------------
# Sets and batches


@dataclass
class PaddedSet:
    features: np.ndarray  # (n_pad, input_dim)
    valid_mask: np.ndarray  # (n_pad,) bool

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.features.shape[0] != self.valid_mask.shape[0]:
            raise NetworkError("features and mask lengths differ")
        if self.valid_mask.sum() < MIN_MINUTIAE:
            raise NetworkError(f"a set needs at least {MIN_MINUTIAE} valid minutiae")
        if np.any(self.features[~self.valid_mask]):
            raise NetworkError("padding rows must be zero")

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    def valid_rows(self) -> np.ndarray:
        return self.features[self.valid_mask]


def pad_set(rows: np.ndarray, n_pad: int) -> PaddedSet:
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if n > n_pad:
        raise NetworkError(f"{n} minutiae do not fit a padded length of {n_pad}")
    feats = np.zeros((n_pad, rows.shape[1]))
    feats[:n] = rows
    mask = np.zeros(n_pad, dtype=bool)
    mask[:n] = True
    return PaddedSet(feats, mask)


@dataclass
class GraphBatch:
    features: np.ndarray  # (n_total, input_dim)
    starts: np.ndarray  # (B + 1,)

    @classmethod
    def from_rows(cls, sets: Sequence[np.ndarray]) -> "GraphBatch":
        sizes = [len(s) for s in sets]
        if min(sizes) < MIN_MINUTIAE:
            raise NetworkError(f"a set needs at least {MIN_MINUTIAE} minutiae, got {min(sizes)}")
        starts = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        return cls(np.vstack([np.asarray(s, dtype=np.float64) for s in sets]), starts)

    @classmethod
    def from_padded(cls, sets: Sequence[PaddedSet]) -> "GraphBatch":
        return cls.from_rows([s.valid_rows() for s in sets])

    @property
    def size(self) -> int:
        return self.starts.size - 1

    @property
    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.size), np.diff(self.starts))


# ---------------------------------------------------------------------------
# Parameters


def is_trainable(name: str) -> bool:
    return not name.endswith(("running_mean", "running_var"))


def _layer_widths(cfg: NetworkConfig):
    cin = cfg.input_dim
    for layer, cout in enumerate(cfg.edgeconv_widths, start=1):
        yield layer, cin, cout
        cin = cout


def init_params(cfg: NetworkConfig, seed: int, head: str = "embed") -> dict:
    """Fan-in scaled random parameters; the transformer's last layer starts at zero."""
    if head not in ("embed", "stn"):
        raise NetworkError(f"unknown head {head!r}")
    rng = np.random.default_rng(seed)
    gain = math.sqrt(2.0 / (1.0 + cfg.slope**2))
    params = {}
    for layer, cin, cout in _layer_widths(cfg):
        p = f"ec{layer}"
        params[f"{p}.weight"] = rng.normal(0.0, gain / math.sqrt(2 * cin), size=(2 * cin, cout))
        params[f"{p}.bias"] = np.zeros(cout)
        if cfg.normalization:
            params[f"{p}.bn.gamma"] = np.ones(cout)
            params[f"{p}.bn.beta"] = np.zeros(cout)
            params[f"{p}.bn.running_mean"] = np.zeros(cout)
            params[f"{p}.bn.running_var"] = np.ones(cout)
        if layer in cfg.residual_layers and cin != cout:
            params[f"{p}.res.weight"] = rng.normal(0.0, 1.0 / math.sqrt(cin), size=(cin, cout))
    widths = cfg.embed_mlp_widths if head == "embed" else cfg.stn_mlp_widths
    fan_in = 2 * cfg.concat_width
    for m, w in enumerate(widths, start=1):
        last = m == len(widths)
        if head == "stn" and last:
            params[f"head{m}.weight"] = np.zeros((fan_in, w))
        else:
            scale = (1.0 if last else gain) / math.sqrt(fan_in)
            params[f"head{m}.weight"] = rng.normal(0.0, scale, size=(fan_in, w))
        params[f"head{m}.bias"] = np.zeros(w)
        fan_in = w
    return params


def bind(params: dict, prefix: str = "") -> dict:
    """Trainable parameters as gradient leaves (running statistics stay plain arrays)."""
    return {
        name: ad.leaf(v, name=prefix + name) if is_trainable(name) else v
        for name, v in params.items()
    }


# ---------------------------------------------------------------------------
# Layers


@dataclass
class Trace:
    """Handles on intermediate nodes, for instrumentation and running statistics."""

    knn: list = field(default_factory=list)
    layer_inputs: list = field(default_factory=list)
    layer_outputs: list = field(default_factory=list)
    norms: dict = field(default_factory=dict)


def _raw(v):
    return v.value if isinstance(v, ad.Node) else v


def edge_conv_node(x, nbr, P, layer, cin, cout, cfg, training, trace=None):
    """One EdgeConv layer on stacked node features.

    Computes ``max_j leaky(W [x_i, x_j - x_i] + b)`` via the split
    ``W_top x_i + W_bot (x_j - x_i)``; the rectifier is monotone so it commutes
    with the neighbourhood max.  Normalisation and the residual follow.
    """
    p = f"ec{layer}"
    w = P[f"{p}.weight"]
    if np.shape(_raw(w)) != (2 * cin, cout):
        raise NetworkError(f"{p}.weight has shape {np.shape(_raw(w))}, expected {(2 * cin, cout)}")
    w_top = ad.slice_(w, 0, cin, axis=0)
    w_bot = ad.slice_(w, cin, 2 * cin, axis=0)
    own = ad.matmul(x, ad.sub(w_top, w_bot))
    agg = ad.gather_max(ad.matmul(x, w_bot), nbr, name=f"{p}.max")
    h = ad.leaky_relu(ad.add(ad.add(own, agg), P[f"{p}.bias"]), cfg.slope)
    if cfg.normalization:
        h = ad.batch_norm(
            h,
            P[f"{p}.bn.gamma"],
            P[f"{p}.bn.beta"],
            training=training,
            running_mean=_raw(P[f"{p}.bn.running_mean"]),
            running_var=_raw(P[f"{p}.bn.running_var"]),
            name=f"{p}.bn",
        )
        if trace is not None:
            trace.norms[f"{p}.bn"] = h
    if layer in cfg.residual_layers:
        skip = x if cin == cout else ad.matmul(x, P[f"{p}.res.weight"])
        h = ad.add(h, skip)
    return h


class SegmentCentre(ad.Op):
    """Subtract each segment's mean from the first ``n_cols`` columns."""

    name = "segment_centre"

    def __init__(self, starts, n_cols):
        self.starts = np.asarray(starts, dtype=np.int64)
        self.counts = np.diff(self.starts)
        self.n_cols = n_cols

    def _centre(self, v):
        out = v.copy()
        means = np.add.reduceat(v[:, : self.n_cols], self.starts[:-1], axis=0) / self.counts[:, None]
        out[:, : self.n_cols] -= np.repeat(means, self.counts, axis=0)
        return out

    def forward(self, x):
        return self._centre(x), None

    def backward(self, ctx, g, x):
        # the map is a symmetric projection, so it is its own adjoint
        return (self._centre(g),)


def backbone(x, starts, P, cfg: NetworkConfig, training: bool, trace: Trace | None = None):
    """Five dynamic EdgeConv layers, channel concat, masked max+mean pooling."""
    outs = []
    if cfg.centre_inputs:
        x = ad.apply(SegmentCentre(starts, 3 if cfg.input_dim == 6 else 2), x, name="centre")
    h = x
    for layer, cin, cout in _layer_widths(cfg):
        # dynamic graph: neighbours in the previous layer's feature space
        nbr = ad.knn(h, cfg.k, starts, name=f"ec{layer}.knn")
        if trace is not None:
            trace.knn.append(nbr)
            trace.layer_inputs.append(h)
        h = edge_conv_node(h, nbr, P, layer, cin, cout, cfg, training, trace)
        if trace is not None:
            trace.layer_outputs.append(h)
        outs.append(h)
    cat = ad.concat(outs, axis=1)
    return ad.concat([ad.segment_max(cat, starts), ad.segment_mean(cat, starts)], axis=1)


def mlp_head(pooled, P, n_layers, slope):
    h = pooled
    for m in range(1, n_layers + 1):
        h = ad.linear(h, P[f"head{m}.weight"], P[f"head{m}.bias"])
        if m < n_layers:
            h = ad.leaky_relu(h, slope)
    return h


def embed_node(x, starts, P, cfg, training=False, trace=None):
    pooled = backbone(x, starts, P, cfg, training, trace)
    return mlp_head(pooled, P, len(cfg.embed_mlp_widths), cfg.slope)


def pose_node(x, starts, P, cfg, training=False, trace=None):
    """Transformer output ``(B, pose_dim)``: translations then bounded angles."""
    pooled = backbone(x, starts, P, cfg, training, trace)
    raw = mlp_head(pooled, P, len(cfg.stn_mlp_widths), cfg.slope)
    n_t = cfg.pose_dim - len(cfg.angle_bounds)
    t = ad.slice_(raw, 0, n_t)
    angles = ad.bounded(ad.slice_(raw, n_t, cfg.pose_dim), cfg.angle_bounds)
    return ad.concat([t, angles], axis=1)


class SegmentRigid3D(ad.Op):
    """Apply per-segment poses ``(t, euler)`` to stacked 6-d minutiae rows."""

    name = "segment_rigid3d"

    def __init__(self, starts, orientation_mode="as-printed"):
        self.seg = np.repeat(np.arange(len(starts) - 1), np.diff(starts))
        self.starts = np.asarray(starts)
        self.add_t_to_o = orientation_mode == "as-printed"

    def forward(self, x, pose):
        t, ang = pose[:, :3], pose[:, 3:6]
        rx, ry, rz = euler_factors(ang)
        r = rz @ ry @ rx
        rn = r[self.seg]
        p = np.einsum("nij,nj->ni", rn, x[:, :3]) + t[self.seg]
        o = np.einsum("nij,nj->ni", rn, x[:, 3:6])
        if self.add_t_to_o:
            o = o + t[self.seg]
        return np.hstack([p, o]), (rx, ry, rz, r)

    def backward(self, ctx, g, x, pose):
        rx, ry, rz, r = ctx
        rn = r[self.seg]
        gp, go = g[:, :3], g[:, 3:6]
        dx = np.hstack([np.einsum("nij,ni->nj", rn, gp), np.einsum("nij,ni->nj", rn, go)])
        nb = r.shape[0]
        dt = np.zeros((nb, 3))
        np.add.at(dt, self.seg, gp)
        if self.add_t_to_o:
            np.add.at(dt, self.seg, go)
        outer = np.einsum("ni,nj->nij", gp, x[:, :3]) + np.einsum("ni,nj->nij", go, x[:, 3:6])
        dr = np.zeros((nb, 3, 3))
        np.add.at(dr, self.seg, outer)
        drx, dry, drz = euler_factor_derivatives(pose[:, 3:6])
        dang = np.stack(
            [
                (dr * (rz @ ry @ drx)).sum(axis=(1, 2)),
                (dr * (rz @ dry @ rx)).sum(axis=(1, 2)),
                (dr * (drz @ ry @ rx)).sum(axis=(1, 2)),
            ],
            axis=1,
        )
        return dx, np.hstack([dt, dang])


class SegmentRigid2D(ad.Op):
    """Per-segment 2D correction of ``(x, y, theta)`` rows; angles re-wrapped to [0, 2*pi)."""

    name = "segment_rigid2d"

    def __init__(self, starts, matrix_mode="proper-rotation"):
        self.seg = np.repeat(np.arange(len(starts) - 1), np.diff(starts))
        if matrix_mode not in ("proper-rotation", "as-printed"):
            raise NetworkError(f"unknown matrix mode {matrix_mode!r}")
        self.printed = matrix_mode == "as-printed"

    def _mats(self, th):
        c, s = np.cos(th), np.sin(th)
        if self.printed:
            m = np.stack([np.stack([-c, s], -1), np.stack([s, c], -1)], -2)
            dm = np.stack([np.stack([s, c], -1), np.stack([c, -s], -1)], -2)
        else:
            m = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
            dm = np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)
        return m, dm

    def forward(self, x, pose):
        t, th = pose[:, :2], pose[:, 2]
        m, dm = self._mats(th)
        p = np.einsum("nij,nj->ni", m[self.seg], x[:, :2]) + t[self.seg]
        raw = x[:, 2] + th[self.seg]
        turns = np.floor(raw / (2 * math.pi))
        ang = raw - 2 * math.pi * turns
        return np.column_stack([p, ang]), (m, dm, turns)

    def backward(self, ctx, g, x, pose):
        m, dm, _ = ctx
        gp, ga = g[:, :2], g[:, 2]
        dx = np.column_stack([np.einsum("nij,ni->nj", m[self.seg], gp), ga])
        nb = pose.shape[0]
        dpose = np.zeros((nb, 3))
        np.add.at(dpose[:, :2], self.seg, gp)
        dth = np.einsum("ni,nij,nj->n", gp, dm[self.seg], x[:, :2]) + ga
        np.add.at(dpose[:, 2], self.seg, dth)
        return dx, dpose

    def signature(self, ctx):
        return ctx[2].tobytes()


def apply_pose_node(x, pose, starts, cfg: NetworkConfig):
    if cfg.input_dim == 6:
        return ad.apply(SegmentRigid3D(starts, cfg.orientation_mode), x, pose, name="pose_correction")
    return ad.apply(SegmentRigid2D(starts, cfg.matrix_mode_2d), x, pose, name="pose_correction")


def matcher_node(x, starts, P_stn, P_emb, cfg, training=False, trace_stn=None, trace_emb=None):
    """Full forward pass: pose correction (when ``P_stn`` is given) then embedding."""
    if P_stn is not None:
        pose = pose_node(x, starts, P_stn, cfg, training, trace_stn)
        x = apply_pose_node(x, pose, starts, cfg)
    return embed_node(x, starts, P_emb, cfg, training, trace_emb)


def fold_running_stats(params: dict, trace: Trace, momentum: float = 0.1) -> dict:
    """Blend the batch statistics recorded in ``trace`` into running estimates."""
    out = dict(params)
    for key, node in trace.norms.items():
        ctx = node.ctx
        n = node.value.shape[0]
        unbiased = ctx["var"] * n / max(n - 1, 1)
        out[f"{key}.running_mean"] = (1 - momentum) * params[f"{key}.running_mean"] + momentum * ctx["mean"]
        out[f"{key}.running_var"] = (1 - momentum) * params[f"{key}.running_var"] + momentum * unbiased
    return out


# ---------------------------------------------------------------------------
# Public single-set API


def knn_graph(s: PaddedSet, k: int) -> np.ndarray:
    """Directed edges ``(i, j)``: the ``k`` nearest valid neighbours of each valid node.

    Indices refer to rows of the padded set.  Raises when there are not more
    than ``k`` valid nodes.
    """
    if s.n_valid < k + 1:
        raise NetworkError(f"kNN with k={k} needs at least {k + 1} valid nodes, got {s.n_valid}")
    from . import kernels

    rows = np.flatnonzero(s.valid_mask)
    nbr = kernels.knn_segments(s.features[rows], np.array([0, rows.size]), k)
    src = np.repeat(rows, k)
    return np.column_stack([src, rows[nbr.reshape(-1)]])


def edge_conv(s: PaddedSet, params: dict, layer: int, cfg: NetworkConfig, training: bool = False) -> np.ndarray:
    """Apply EdgeConv layer ``layer`` to a padded set; padding rows stay zero."""
    widths = dict((l, (ci, co)) for l, ci, co in _layer_widths(cfg))
    cin, cout = widths[layer]
    if s.features.shape[1] != cin:
        raise NetworkError(f"layer {layer} expects width {cin}, got {s.features.shape[1]}")
    rows = s.valid_rows()
    starts = np.array([0, rows.shape[0]])
    x = ad.constant(rows)
    nbr = ad.knn(x, cfg.k, starts)
    P = {k: ad.constant(v) for k, v in params.items()}
    out = edge_conv_node(x, nbr, P, layer, cin, cout, cfg, training)
    full = np.zeros((s.features.shape[0], cout))
    full[s.valid_mask] = out.value
    return full


def embed(s: PaddedSet, params: dict, cfg: NetworkConfig) -> np.ndarray:
    return embed_batch([s.valid_rows()], params, cfg)[0]


def embed_batch(sets: Sequence[np.ndarray], params: dict, cfg: NetworkConfig) -> np.ndarray:
    """Inference-mode embeddings ``(B, 256)`` for raw (unpadded) minutiae arrays."""
    batch = GraphBatch.from_rows(sets)
    P = {k: ad.constant(v) for k, v in params.items()}
    return embed_node(ad.constant(batch.features), batch.starts, P, cfg).value


def spatial_transform(s: PaddedSet, params: dict, cfg: NetworkConfig) -> Pose:
    rows = s.valid_rows()
    P = {k: ad.constant(v) for k, v in params.items()}
    vec = pose_node(ad.constant(rows), np.array([0, rows.shape[0]]), P, cfg).value[0]
    if cfg.pose_dim == 6:
        return Pose.from_vector(vec)
    return Pose(t=(float(vec[0]), float(vec[1]), 0.0), euler=(float(vec[2]), 0.0, 0.0))


def correct_and_embed(
    tpl: Template3D, params_stn: dict | None, params_embed: dict, cfg: NetworkConfig, n_pad: int = 400
) -> np.ndarray:
    """Pose-correct a template with the transformer, then embed it."""
    if cfg.input_dim != 6:
        raise NetworkError("correct_and_embed works on 3D templates; use matcher_embed_batch for 2D rows")
    if len(tpl) < MIN_MINUTIAE:
        raise NetworkError(f"template {tpl.template_id} has {len(tpl)} minutiae, need {MIN_MINUTIAE}")
    if params_stn is not None:
        pose = spatial_transform(pad_set(tpl.minutiae, max(n_pad, len(tpl))), params_stn, cfg)
        tpl = apply_pose(tpl, pose, cfg.orientation_mode)
    return embed(pad_set(tpl.minutiae, max(n_pad, len(tpl))), params_embed, cfg)


def matcher_embed_batch(sets: Sequence[np.ndarray], params_stn, params_embed, cfg) -> np.ndarray:
    """Batched inference through transformer (if any) and embedder."""
    batch = GraphBatch.from_rows(sets)
    Ps = None if params_stn is None else {k: ad.constant(v) for k, v in params_stn.items()}
    Pe = {k: ad.constant(v) for k, v in params_embed.items()}
    return matcher_node(ad.constant(batch.features), batch.starts, Ps, Pe, cfg).value
