"""Triplet training of the pose-correcting matcher.

Two stages share one loop: ``pretrain`` fits the embedder alone on
spherically lifted contact prints, ``finetune`` trains transformer and
embedder jointly on multi-pose captures.  Pairs are oversampled by a
pose-gap weight table, augmented on the fly and batched; negatives are mined
batch-hard on L2-normalised embeddings.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .geometry3d import Template3D, rotation_from_euler, wrap_angle
from .graphnet import (
    MIN_MINUTIAE,
    GraphBatch,
    NetworkConfig,
    Trace,
    bind,
    fold_running_stats,
    init_params,
    matcher_node,
)


class TrainingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; ``result`` holds the last good epoch."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# Samples and pairs


@dataclass
class Sample:
    rows: np.ndarray  # (N, 6) 3D minutiae or (N, 3) 2D minutiae
    finger_id: str
    pose_label: str = "front"
    yaw: float = 0.0
    template_id: str = ""

    @classmethod
    def from_template(cls, tpl: Template3D) -> "Sample":
        return cls(tpl.minutiae, tpl.finger_id, tpl.pose_label, tpl.yaw, tpl.template_id)


@dataclass(frozen=True)
class TrainPair:
    a: int
    b: int
    pose_class: str


def pose_gap_class(yaw_a: float, yaw_b: float) -> str:
    gap = abs(yaw_a - yaw_b)
    if gap <= 10.0:
        return "gap<=10"
    if gap <= 45.0:
        return "10<gap<=45"
    return "gap>45"


def orientation_class(label_a: str, label_b: str) -> str:
    if label_a == label_b:
        return "same"
    return "-".join(sorted((label_a, label_b)))


@dataclass(frozen=True)
class PairWeightTable:
    """How many times each pose class of pair is repeated per epoch."""

    weights: tuple  # ((class, multiplicity), ...)
    by: str = "yaw-gap"  # or "label"

    def __post_init__(self):
        if self.by not in ("yaw-gap", "label"):
            raise TrainingError(f"unknown pair classifier {self.by!r}")
        for cls_, w in self.weights:
            if int(w) != w or w < 1:
                raise TrainingError(f"multiplicity for {cls_!r} must be an integer >= 1")

    @classmethod
    def yaw_gap(cls, small: int = 3, medium: int = 6, large: int = 3) -> "PairWeightTable":
        return cls((("gap<=10", small), ("10<gap<=45", medium), ("gap>45", large)), "yaw-gap")

    @classmethod
    def labels(cls, weights: dict) -> "PairWeightTable":
        return cls(tuple(sorted(weights.items())), "label")

    @classmethod
    def uniform(cls) -> "PairWeightTable":
        return cls((("*", 1),), "yaw-gap")

    def classify(self, a: Sample, b: Sample) -> str:
        if self.weights == (("*", 1),):
            return "*"
        if self.by == "yaw-gap":
            return pose_gap_class(a.yaw, b.yaw)
        return orientation_class(a.pose_label, b.pose_label)

    def multiplicity(self, pose_class: str) -> int:
        table = dict(self.weights)
        if pose_class not in table:
            raise TrainingError(f"pose class {pose_class!r} has no weight")
        return int(table[pose_class])


def make_pairs(samples: Sequence[Sample], table: PairWeightTable) -> list[TrainPair]:
    """Every unordered pair of distinct samples of the same finger, tagged by pose class."""
    by_finger: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_finger.setdefault(s.finger_id, []).append(i)
    pairs = []
    for idx in by_finger.values():
        for u in range(len(idx)):
            for v in range(u + 1, len(idx)):
                i, j = idx[u], idx[v]
                pairs.append(TrainPair(i, j, table.classify(samples[i], samples[j])))
    return pairs


def build_epoch(pairs: Sequence[TrainPair], table: PairWeightTable, rng: np.random.Generator) -> list[TrainPair]:
    """Repeat each pair by its class multiplicity, then shuffle."""
    out = []
    for p in pairs:
        out.extend([p] * table.multiplicity(p.pose_class))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentBranch:
    """Uniform ranges, symmetric about zero."""

    rotation_deg: tuple = (30.0, 90.0, 30.0)  # ranges for (theta_t, psi_t, phi_t)
    translation: float = 300.0  # px, each axis
    drop_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.drop_fraction < 1.0:
            raise TrainingError("drop fraction must lie in [0, 1)")
        if min(self.rotation_deg) < 0 or self.translation < 0:
            raise TrainingError("augmentation ranges are half-widths and must be non-negative")


@dataclass(frozen=True)
class AugmentPolicy:
    """Heavy augmentation for near-identical poses, light for large pose gaps."""

    small_gap: AugmentBranch = AugmentBranch()
    large_gap: AugmentBranch = AugmentBranch((0.0, 0.0, 0.0), 100.0, 1.0 / 6.0)
    small_gap_classes: tuple = ("gap<=10", "same", "*")

    def branch(self, pose_class: str) -> AugmentBranch:
        return self.small_gap if pose_class in self.small_gap_classes else self.large_gap


def augment(tpl, branch: AugmentBranch, rng: np.random.Generator):
    """Random rigid motion and point dropout of a template or a raw row array.

    Exactly ``floor(drop_fraction * N)`` minutiae are removed, uniformly
    without replacement.  3D rows rotate positions and orientations
    (orientations are not translated); 2D rows rotate in-plane by the first
    angle range.
    """
    rows = tpl.minutiae if isinstance(tpl, Template3D) else np.asarray(tpl, dtype=np.float64)
    n = rows.shape[0]
    n_drop = int(math.floor(branch.drop_fraction * n))
    if n - n_drop < MIN_MINUTIAE:
        raise TrainingError(f"{n} minutiae leave fewer than {MIN_MINUTIAE} after dropping {n_drop}")
    keep = np.sort(rng.choice(n, size=n - n_drop, replace=False))
    rows = rows[keep]
    lim = np.radians(np.asarray(branch.rotation_deg, dtype=np.float64))
    if rows.shape[1] == 6:
        ang = rng.uniform(-1.0, 1.0, 3) * lim
        t = rng.uniform(-1.0, 1.0, 3) * branch.translation
        r = rotation_from_euler(ang)
        out = np.hstack([rows[:, :3] @ r.T + t, rows[:, 3:] @ r.T])
    elif rows.shape[1] == 3:
        th = rng.uniform(-1.0, 1.0) * lim[0]
        t = rng.uniform(-1.0, 1.0, 2) * branch.translation
        c, s = math.cos(th), math.sin(th)
        xy = rows[:, :2] @ np.array([[c, s], [-s, c]]) + t
        out = np.column_stack([xy, wrap_angle(rows[:, 2] + th)])
    else:
        raise TrainingError(f"cannot augment rows of width {rows.shape[1]}")
    if isinstance(tpl, Template3D):
        return replace(tpl, minutiae=out, meta=dict(tpl.meta))
    return out


# ---------------------------------------------------------------------------
# Loss and mining


def mine_hard_negatives(
    anchor_emb: np.ndarray,
    anchor_ids: Sequence[str],
    pool_emb: np.ndarray,
    pool_ids: Sequence[str],
    allow_missing: bool = False,
) -> np.ndarray:
    """Index of the closest pool embedding of a different finger, per anchor.

    Ties go to the lowest pool index.  Anchors whose pool holds only their own
    finger raise, or get ``-1`` when ``allow_missing``.
    """
    anchor_emb = np.atleast_2d(np.asarray(anchor_emb, dtype=np.float64))
    pool_emb = np.atleast_2d(np.asarray(pool_emb, dtype=np.float64))
    if anchor_emb.shape[1] != pool_emb.shape[1]:
        raise TrainingError("anchor and pool embeddings differ in dimension")
    pool_ids = np.asarray(pool_ids)
    d = ((anchor_emb[:, None, :] - pool_emb[None, :, :]) ** 2).sum(axis=2)
    out = np.empty(anchor_emb.shape[0], dtype=np.int64)
    for k, fid in enumerate(anchor_ids):
        cand = np.flatnonzero(pool_ids != fid)
        if cand.size == 0:
            if allow_missing:
                out[k] = -1
                continue
            raise TrainingError(f"anchor {k} (finger {fid}) has no negative in the pool")
        out[k] = cand[int(np.argmin(d[k, cand]))]
    return out


def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, gamma: float = 0.2) -> float:
    """Mean of ``max(0, |a - p| - |a - n| + gamma)`` over rows."""
    a, p, n = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (a, p, n))
    d_ap = np.linalg.norm(a - p, axis=1)
    d_an = np.linalg.norm(a - n, axis=1)
    return float(np.maximum(0.0, d_ap - d_an + gamma).mean())


def triplet_loss_node(emb: ad.Node, anchors, positives, negatives, gamma: float = 0.2) -> ad.Node:
    """Graph version of :func:`triplet_loss` over rows of an embedding node."""
    a = ad.take_rows(emb, np.asarray(anchors))
    p = ad.take_rows(emb, np.asarray(positives))
    n = ad.take_rows(emb, np.asarray(negatives))
    hinge = ad.relu(ad.add(ad.sub(ad.row_norm(ad.sub(a, p)), ad.row_norm(ad.sub(a, n))), ad.constant(gamma)))
    return ad.mean(hinge)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class MatcherParams:
    net: NetworkConfig
    embed: dict
    stn: dict | None = None

    @classmethod
    def fresh(cls, net: NetworkConfig, seed: int, with_stn: bool = True) -> "MatcherParams":
        emb = init_params(net, seed, "embed")
        stn = init_params(net, seed + 1, "stn") if with_stn else None
        return cls(net, emb, stn)

    def copy(self) -> "MatcherParams":
        return MatcherParams(
            self.net,
            {k: v.copy() for k, v in self.embed.items()},
            None if self.stn is None else {k: v.copy() for k, v in self.stn.items()},
        )


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    epochs: int = 100
    batch_size: int = 64
    gamma: float = 0.2
    n_pad: int = 400  # nominal; the stacked batches never materialise padding
    adam: ad.AdamConfig = ad.AdamConfig()
    momentum: float = 0.1
    augment: AugmentPolicy | None = AugmentPolicy()
    seed: int = 0
    max_batches_per_epoch: int | None = None
    lr_schedule: str = "constant"  # or "cosine": anneal to zero over the run, per step

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise TrainingError(f"unknown stage {self.stage!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise TrainingError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if self.batch_size < 2:
            raise TrainingError("batch size must be at least 2")
        if self.epochs < 0:
            raise TrainingError("epochs must be non-negative")
        if not self.gamma > 0:
            raise TrainingError("margin must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    stage: str
    mean_loss: float
    active_triplet_fraction: float


@dataclass
class TrainResult:
    params: MatcherParams
    history: list = field(default_factory=list)


def _run_batch(samples, batch, cfg: TrainConfig, params: MatcherParams, states, rng):
    """Forward, mine, backward and update on one batch; anchors occupy rows [0, B)."""
    B = len(batch)
    anchors, positives, ids = [], [], []
    for pair in batch:
        ra, rb = samples[pair.a].rows, samples[pair.b].rows
        if rng.random() < 0.5:
            ra, rb = rb, ra
        if cfg.augment is not None:
            br = cfg.augment.branch(pair.pose_class)
            ra, rb = augment(ra, br, rng), augment(rb, br, rng)
        anchors.append(ra)
        positives.append(rb)
        ids.append(samples[pair.a].finger_id)
    batch_rows = GraphBatch.from_rows(anchors + positives)

    use_stn = cfg.stage == "finetune" and params.stn is not None
    P_emb = bind(params.embed, "embed.")
    P_stn = bind(params.stn, "stn.") if use_stn else None
    tr_emb, tr_stn = Trace(), Trace()
    emb = matcher_node(
        ad.constant(batch_rows.features), batch_rows.starts, P_stn, P_emb, params.net, True, tr_stn, tr_emb
    )
    emb = ad.l2_normalize(emb)
    # negatives come from the positives of other pairs
    neg = mine_hard_negatives(emb.value[:B], ids, emb.value[B:], ids, allow_missing=True)
    ok = np.flatnonzero(neg >= 0)
    if ok.size == 0:
        return None
    a_idx, p_idx, n_idx = ok, ok + B, neg[ok] + B
    loss = triplet_loss_node(emb, a_idx, p_idx, n_idx, cfg.gamma)
    value = float(loss.value)
    hinge = np.linalg.norm(emb.value[a_idx] - emb.value[p_idx], axis=1) - np.linalg.norm(
        emb.value[a_idx] - emb.value[n_idx], axis=1
    )
    active = float(np.mean(hinge + cfg.gamma > 0))
    if not math.isfinite(value):
        raise FloatingPointError("loss is not finite")
    grads = ad.backward(loss)

    def collect(P):
        return {name: grads[node] for name, node in P.items() if isinstance(node, ad.Node) and node in grads}

    new_emb, states["embed"] = ad.adam_update(params.embed, collect(P_emb), states["embed"], cfg.adam)
    new_emb = fold_running_stats(new_emb, tr_emb, cfg.momentum)
    new_stn = params.stn
    if use_stn:
        new_stn, states["stn"] = ad.adam_update(params.stn, collect(P_stn), states["stn"], cfg.adam)
        new_stn = fold_running_stats(new_stn, tr_stn, cfg.momentum)
    return MatcherParams(params.net, new_emb, new_stn), value, active


def train(
    samples: Sequence[Sample],
    pairs: Sequence[TrainPair],
    table: PairWeightTable,
    cfg: TrainConfig,
    params: MatcherParams,
    on_epoch: Callable[[EpochStats, MatcherParams], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of batch-hard triplet training.

    Raises :class:`TrainingDiverged` (carrying the last good epoch's
    parameters) when the loss or a gradient becomes non-finite.
    """
    if not pairs:
        raise TrainingError("no training pairs")
    width = params.net.input_dim
    for s in samples:
        if s.rows.ndim != 2 or s.rows.shape[1] != width:
            raise TrainingError(f"sample {s.template_id} has rows of shape {s.rows.shape}, network expects width {width}")
        if s.rows.shape[0] < MIN_MINUTIAE:
            raise TrainingError(f"sample {s.template_id} has fewer than {MIN_MINUTIAE} minutiae")
    if cfg.stage == "finetune" and params.stn is None:
        params = replace(params, stn=init_params(params.net, cfg.seed + 1, "stn"))
    rng = np.random.default_rng([cfg.seed, 0 if cfg.stage == "pretrain" else 1])
    states = {"embed": ad.AdamState(), "stn": ad.AdamState()}
    result = TrainResult(params.copy())
    for epoch in range(1, cfg.epochs + 1):
        seq = build_epoch(pairs, table, rng)
        batches = [seq[i : i + cfg.batch_size] for i in range(0, len(seq), cfg.batch_size)]
        batches = [b for b in batches if len(b) >= 2]
        if cfg.max_batches_per_epoch is not None:
            batches = batches[: cfg.max_batches_per_epoch]
        losses, actives = [], []
        current = result.params
        try:
            for b, batch in enumerate(batches):
                step_cfg = cfg
                if cfg.lr_schedule == "cosine":
                    frac = (epoch - 1 + b / len(batches)) / cfg.epochs
                    step_cfg = replace(cfg, adam=replace(cfg.adam, lr=cfg.adam.lr * 0.5 * (1.0 + math.cos(math.pi * frac))))
                out = _run_batch(samples, batch, step_cfg, current, states, rng)
                if out is None:
                    continue
                current, loss, active = out
                losses.append(loss)
                actives.append(active)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", result) from exc
        stats = EpochStats(
            epoch,
            cfg.stage,
            float(np.mean(losses)) if losses else float("nan"),
            float(np.mean(actives)) if actives else 0.0,
        )
        result = TrainResult(current, result.history + [stats])
        if on_epoch is not None:
            on_epoch(stats, current)
    return result


def train_dual(
    samples: Sequence[Sample],
    pairs: Sequence[TrainPair],
    table: PairWeightTable,
    cfg: TrainConfig,
    params: MatcherParams,
) -> tuple[TrainResult, TrainResult]:
    """Network A on all pairs; network B on same-pose-label pairs only, from the same start."""
    same = [p for p in pairs if samples[p.a].pose_label == samples[p.b].pose_label]
    if not same:
        raise TrainingError("no same-orientation pairs for the second network")
    res_a = train(samples, pairs, table, cfg, params.copy())
    res_b = train(samples, same, table, replace(cfg, seed=cfg.seed + 7919), params.copy())
    return res_a, res_b


def write_loss_trace(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "stage", "mean_loss", "active_triplet_fraction"])
        for s in history:
            w.writerow([s.epoch, s.stage, f"{s.mean_loss:.9g}", f"{s.active_triplet_fraction:.9g}"])
