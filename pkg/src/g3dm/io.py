"""File formats: template JSON-Lines, binary checkpoints, TOML run config,
grid CSVs and dataset manifests.

Every writer is deterministic, and every loader rejects what its writer could
not have produced.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .autodiff import AdamConfig
from .geometry3d import DEFAULT_ALPHA, DEFAULT_SPHERE_C, DepthGrid, GradientGrid, Template3D, TWO_PI
from .graphnet import NetworkConfig
from .training import AugmentBranch, AugmentPolicy, PairWeightTable, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class FormatError(ValueError):
    pass


def _num(v: float) -> str:
    if not math.isfinite(float(v)):
        raise FormatError(f"cannot serialise non-finite number {v}")
    return f"{float(v):.9g}"


# ---------------------------------------------------------------------------
# Templates


@dataclass
class Template2D:
    """2D counterpart of :class:`Template3D`; rows are ``(x, y, theta)``."""

    template_id: str
    finger_id: str
    pose_label: str
    minutiae: np.ndarray
    yaw: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.minutiae, dtype=np.float64)
        if m.size == 0:
            m = m.reshape(0, 3)
        if m.ndim != 2 or m.shape[1] != 3:
            raise FormatError(f"template {self.template_id}: 2D minutiae must be (N, 3), got {m.shape}")
        self.minutiae = m

    def __len__(self) -> int:
        return self.minutiae.shape[0]


def _template_line(t) -> str:
    rows = ",".join("[" + ",".join(_num(v) for v in r) + "]" for r in t.minutiae)
    head = json.dumps(
        {"template_id": t.template_id, "finger_id": t.finger_id, "pose_label": t.pose_label},
        ensure_ascii=False,
    )[:-1]
    return f'{head}, "yaw": {_num(t.yaw)}, "minutiae": [{rows}]}}'


def save_templates(path, templates: Sequence, alpha: float | None = None) -> None:
    """Write one JSON object per template; an optional first line records a non-default alpha."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if alpha is not None:
            fh.write(json.dumps({"alpha": float(alpha)}) + "\n")
        for t in templates:
            fh.write(_template_line(t) + "\n")


_TEMPLATE_KEYS = {"template_id", "finger_id", "pose_label", "yaw", "minutiae"}


def load_templates(path, alpha: float = DEFAULT_ALPHA, rtol: float = 1e-6) -> list:
    """Parse a template file into :class:`Template3D` (6-wide rows) or :class:`Template2D` (3-wide rows).

    3D orientations must have norm ``alpha`` (or the file's header alpha)
    within ``rtol``; 2D angles must lie in ``[0, 2*pi)``.  All rows in a file
    share one width.
    """
    out = []
    ids = set()
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            if lineno == 1 and set(obj) == {"alpha"}:
                alpha = obj["alpha"]
                if not isinstance(alpha, (int, float)) or not alpha > 0:
                    raise FormatError(f"{path}:1: alpha must be a positive number")
                continue
            if set(obj) != _TEMPLATE_KEYS:
                missing = sorted(_TEMPLATE_KEYS - set(obj))
                extra = sorted(set(obj) - _TEMPLATE_KEYS)
                raise FormatError(f"{path}:{lineno}: missing keys {missing}, unexpected keys {extra}")
            for k in ("template_id", "finger_id", "pose_label"):
                if not isinstance(obj[k], str) or not obj[k]:
                    raise FormatError(f"{path}:{lineno}: {k} must be a non-empty string")
            if not isinstance(obj["yaw"], (int, float)) or isinstance(obj["yaw"], bool):
                raise FormatError(f"{path}:{lineno}: yaw must be a number")
            rows = obj["minutiae"]
            if not isinstance(rows, list):
                raise FormatError(f"{path}:{lineno}: minutiae must be a list")
            for r_i, r in enumerate(rows):
                if not isinstance(r, list) or len(r) not in (3, 6):
                    n = len(r) if isinstance(r, list) else "non-list"
                    raise FormatError(f"{path}:{lineno}: minutia {r_i} has {n} fields, expected 6 (or 3 for 2D)")
                if width is None:
                    width = len(r)
                elif len(r) != width:
                    raise FormatError(f"{path}:{lineno}: minutia {r_i} has {len(r)} fields, file uses {width}")
                if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in r):
                    raise FormatError(f"{path}:{lineno}: minutia {r_i} has a non-numeric field")
            tid = obj["template_id"]
            if tid in ids:
                raise FormatError(f"{path}:{lineno}: duplicate template_id {tid!r}")
            ids.add(tid)
            m = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1 if rows else (width or 6))
            if not np.isfinite(m).all():
                raise FormatError(f"template {tid}: non-finite value")
            if m.shape[1] == 6:
                norms = np.linalg.norm(m[:, 3:], axis=1)
                bad = np.flatnonzero(np.abs(norms - alpha) > rtol * alpha)
                if bad.size:
                    raise FormatError(
                        f"template {tid}: orientation {int(bad[0])} has norm {norms[bad[0]]:.9g}, expected {alpha}"
                    )
                out.append(Template3D(tid, obj["finger_id"], obj["pose_label"], m, yaw=float(obj["yaw"])))
            else:
                if np.any((m[:, 2] < 0) | (m[:, 2] >= TWO_PI)):
                    raise FormatError(f"template {tid}: theta outside [0, 2*pi)")
                out.append(Template2D(tid, obj["finger_id"], obj["pose_label"], m, yaw=float(obj["yaw"])))
    return out


# ---------------------------------------------------------------------------
# Checkpoints

MAGIC = b"G3DM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict  # name -> float64 array (values are exact float32)
    config: dict
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, params: dict, config: dict | None = None) -> None:
    """Binary layout, little-endian throughout::

        b"G3DM" | u32 version | u32 len + JSON config | u32 count |
        per tensor: u32 len + UTF-8 name | u32 rank | u32 extents... | float32 payload
    """
    cfg = json.dumps(config or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, value in params.items():
        a = np.asarray(value, dtype="<f4")
        if not np.isfinite(a).all():
            raise CheckpointError(f"tensor {name!r} has non-finite values")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a G3DM checkpoint")
    version, cfg_len = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        config = json.loads(take(cfg_len, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt config block") from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params = {}
    for t in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"name length of tensor {t}"))
        try:
            name = take(nlen, f"name of tensor {t}").decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: tensor {t} has an undecodable name") from None
        (rank,) = struct.unpack("<I", take(4, f"rank of tensor {name!r}"))
        if rank > 8:
            raise CheckpointError(f"{path}: tensor {name!r} has implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of tensor {name!r}"))
        n = int(np.prod(shape)) if rank else 1
        buf = take(4 * n, f"payload of tensor {name!r}")
        if name in params:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after the last tensor")
    return Checkpoint(params, config, version)


def split_params(params: dict) -> tuple[dict | None, dict]:
    """Split a ``stn.``/``embed.``-prefixed tensor map into (transformer, embedder)."""
    stn = {k[4:]: v for k, v in params.items() if k.startswith("stn.")}
    emb = {k[6:]: v for k, v in params.items() if k.startswith("embed.")}
    if not emb:
        raise CheckpointError("checkpoint has no embedder tensors")
    return (stn or None), emb


def join_params(stn: dict | None, embed: dict) -> dict:
    out = {f"embed.{k}": v for k, v in embed.items()}
    if stn is not None:
        out.update({f"stn.{k}": v for k, v in stn.items()})
    return out


# ---------------------------------------------------------------------------
# Run configuration


class ConfigError(ValueError):
    pass


@dataclass
class GeometrySection:
    alpha: float = DEFAULT_ALPHA
    sphere_c: float = DEFAULT_SPHERE_C
    normal: str = "as-printed"

    def validate(self):
        if not self.alpha > 0:
            raise ConfigError("geometry.alpha: must be positive")
        if not self.sphere_c > 0:
            raise ConfigError("geometry.sphere_c: must be positive")
        if self.normal not in ("as-printed", "surface"):
            raise ConfigError("geometry.normal: expected 'as-printed' or 'surface'")


@dataclass
class NetworkSection:
    k: int = 20
    edgeconv_widths: list = field(default_factory=lambda: [64, 64, 128, 256, 512])
    concat_width: int = 1024
    embed_mlp_widths: list = field(default_factory=lambda: [512, 256])
    stn_mlp_widths: list = field(default_factory=lambda: [512, 256, 128, 64, 6])
    stn_mlp_widths_2d: list = field(default_factory=lambda: [512, 256, 128, 64, 3])
    residual_layers: list = field(default_factory=lambda: [1, 3])
    normalization: bool = True
    orientation_mode: str = "as-printed"
    matrix_mode_2d: str = "proper-rotation"
    slope: float = 0.2
    centre_inputs: bool = False

    def to_config(self, dim: int = 6) -> NetworkConfig:
        common = dict(
            k=self.k,
            edgeconv_widths=tuple(self.edgeconv_widths),
            concat_width=self.concat_width,
            embed_mlp_widths=tuple(self.embed_mlp_widths),
            residual_layers=tuple(self.residual_layers),
            normalization=self.normalization,
            orientation_mode=self.orientation_mode,
            matrix_mode_2d=self.matrix_mode_2d,
            slope=self.slope,
            centre_inputs=self.centre_inputs,
        )
        if dim == 6:
            return NetworkConfig(stn_mlp_widths=tuple(self.stn_mlp_widths), **common)
        if dim == 3:
            return NetworkConfig.baseline_2d(stn_mlp_widths=tuple(self.stn_mlp_widths_2d), **common)
        raise ConfigError(f"unknown input dimension {dim}")

    def validate(self):
        try:
            self.to_config(6)
            self.to_config(3)
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from None


@dataclass
class StageSection:
    epochs: int = 100
    batch_size: int = 64
    n_pad: int = 400
    gamma: float = 0.2
    max_batches_per_epoch: int = 0  # 0 means no cap
    lr: float = 0.0  # 0 means use optimizer.lr

    def validate(self, name):
        if self.epochs < 0:
            raise ConfigError(f"{name}.epochs: must be non-negative")
        if self.batch_size < 2:
            raise ConfigError(f"{name}.batch_size: must be at least 2")
        if not self.gamma > 0:
            raise ConfigError(f"{name}.gamma: must be positive")
        if self.n_pad < 4:
            raise ConfigError(f"{name}.n_pad: must be at least 4")
        if self.max_batches_per_epoch < 0:
            raise ConfigError(f"{name}.max_batches_per_epoch: must be non-negative")
        if self.lr < 0:
            raise ConfigError(f"{name}.lr: must be non-negative")


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    schedule: str = "constant"  # or "cosine"

    def validate(self):
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("optimizer.schedule: expected 'constant' or 'cosine'")
        if self.lr < 0 or self.weight_decay < 0 or not self.eps > 0:
            raise ConfigError("optimizer: lr and weight_decay must be non-negative, eps positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer: betas must lie in [0, 1)")

    def to_adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class BranchSection:
    rotation_deg: list
    translation: float
    drop_fraction: float

    def to_branch(self, name) -> AugmentBranch:
        if len(self.rotation_deg) != 3:
            raise ConfigError(f"augment.{name}.rotation_deg: expected 3 values")
        try:
            return AugmentBranch(tuple(float(v) for v in self.rotation_deg), float(self.translation), float(self.drop_fraction))
        except ValueError as exc:
            raise ConfigError(f"augment.{name}: {exc}") from None


@dataclass
class AugmentSection:
    enabled: bool = True
    small_gap: BranchSection = field(default_factory=lambda: BranchSection([30.0, 90.0, 30.0], 300.0, 0.25))
    large_gap: BranchSection = field(default_factory=lambda: BranchSection([0.0, 0.0, 0.0], 100.0, 1.0 / 6.0))

    def to_policy(self) -> AugmentPolicy | None:
        if not self.enabled:
            return None
        return AugmentPolicy(self.small_gap.to_branch("small_gap"), self.large_gap.to_branch("large_gap"))


@dataclass
class PairsSection:
    by: str = "yaw-gap"
    weights: dict = field(default_factory=lambda: {"gap<=10": 3, "10<gap<=45": 6, "gap>45": 3})

    def to_table(self) -> PairWeightTable:
        try:
            return PairWeightTable(tuple(sorted(self.weights.items())), self.by)
        except ValueError as exc:
            raise ConfigError(f"pairs: {exc}") from None


@dataclass
class RunConfig:
    seed: int = 0
    geometry: GeometrySection = field(default_factory=GeometrySection)
    network: NetworkSection = field(default_factory=NetworkSection)
    pretrain: StageSection = field(default_factory=lambda: StageSection(epochs=80, batch_size=128, n_pad=200))
    finetune: StageSection = field(default_factory=StageSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    pairs: PairsSection = field(default_factory=PairsSection)

    def validate(self) -> "RunConfig":
        self.geometry.validate()
        self.network.validate()
        self.pretrain.validate("pretrain")
        self.finetune.validate("finetune")
        self.optimizer.validate()
        self.augment.to_policy()
        self.pairs.to_table()
        return self

    def train_config(self, stage: str, seed: int | None = None) -> TrainConfig:
        sec = self.pretrain if stage == "pretrain" else self.finetune
        return TrainConfig(
            stage=stage,
            epochs=sec.epochs,
            batch_size=sec.batch_size,
            gamma=sec.gamma,
            n_pad=sec.n_pad,
            adam=self._adam(sec),
            augment=self.augment.to_policy() if stage == "finetune" else None,
            seed=self.seed if seed is None else seed,
            max_batches_per_epoch=sec.max_batches_per_epoch or None,
            lr_schedule=self.optimizer.schedule,
        )

    def _adam(self, sec: StageSection):
        adam = self.optimizer.to_adam()
        if sec.lr > 0:
            adam = replace(adam, lr=sec.lr)
        return adam

    def to_dict(self) -> dict:
        return asdict(self)


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    if isinstance(default, dict):
        return isinstance(value, dict)
    return True


def _merge(obj, data: dict, path: str):
    known = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        kp = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{kp}: unknown key")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{kp}: expected a table")
            _merge(current, value, kp)
            continue
        if not _type_ok(value, current):
            raise ConfigError(f"{kp}: expected {type(current).__name__}, got {type(value).__name__}")
        if isinstance(current, float):
            value = float(value)
        if isinstance(current, list) and current and isinstance(current[0], (int, float)):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{kp}: expected a list of numbers")
        setattr(obj, key, value)


def load_config(path=None, text: str | None = None) -> RunConfig:
    """Read a TOML run configuration; omitted keys keep their defaults."""
    if text is None:
        text = "" if path is None else Path(path).read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path or '<config>'}: {exc}") from None
    cfg = RunConfig()
    _merge(cfg, data, "")
    return cfg.validate()


# ---------------------------------------------------------------------------
# Grids


def _write_grid(path, header_w, header_h, cols, values, mask):
    h, w = mask.shape
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["width", "height"])
        wr.writerow([w, h])
        wr.writerow(["i", "j", *cols, "mask"])
        for j in range(h):
            for i in range(w):
                wr.writerow([i, j, *(_num(v[j, i]) for v in values), int(mask[j, i])])


def save_gradient_grid(path, grid: GradientGrid) -> None:
    _write_grid(path, grid.width, grid.height, ("g_x", "g_y"), (grid.g_x, grid.g_y), grid.mask)


def save_depth_grid(path, depth: DepthGrid) -> None:
    _write_grid(path, depth.width, depth.height, ("z",), (depth.z,), depth.mask)


def _read_grid(path, cols):
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        try:
            if next(r) != ["width", "height"]:
                raise FormatError(f"{path}:1: expected header width,height")
            w, h = (int(v) for v in next(r))
            if next(r) != ["i", "j", *cols, "mask"]:
                raise FormatError(f"{path}:3: expected header i,j,{','.join(cols)},mask")
        except StopIteration:
            raise FormatError(f"{path}: truncated header") from None
        except ValueError:
            raise FormatError(f"{path}:2: width and height must be integers") from None
        if w < 1 or h < 1:
            raise FormatError(f"{path}:2: empty grid")
        vals = np.zeros((len(cols), h, w))
        mask = np.zeros((h, w), dtype=bool)
        n = 0
        for lineno, row in enumerate(r, start=4):
            j, i = divmod(n, w)
            if j >= h:
                raise FormatError(f"{path}:{lineno}: more rows than width*height")
            if len(row) != len(cols) + 3:
                raise FormatError(f"{path}:{lineno}: expected {len(cols) + 3} fields")
            try:
                ri, rj = int(row[0]), int(row[1])
                v = [float(x) for x in row[2:-1]]
                m = int(row[-1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed number") from None
            if (ri, rj) != (i, j) or m not in (0, 1):
                raise FormatError(f"{path}:{lineno}: expected cell ({i},{j}) with mask 0/1")
            vals[:, j, i] = v
            mask[j, i] = bool(m)
            n += 1
        if n != w * h:
            raise FormatError(f"{path}: {n} cells, expected {w * h}")
    return vals, mask


def load_gradient_grid(path, scale: float = 1.0, origin=(0.0, 0.0)) -> GradientGrid:
    vals, mask = _read_grid(path, ("g_x", "g_y"))
    return GradientGrid(vals[0], vals[1], mask, scale=float(scale), origin=tuple(float(v) for v in origin))


def load_depth_grid(path, scale: float = 1.0, origin=(0.0, 0.0)) -> DepthGrid:
    vals, mask = _read_grid(path, ("z",))
    return DepthGrid(vals[0], mask, scale=float(scale), origin=tuple(float(v) for v in origin))


def save_minutiae_csv(path, rows: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "theta"])
        for x, y, t in rows:
            w.writerow([_num(x), _num(y), _num(t)])


def load_minutiae_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        if next(r, None) != ["x", "y", "theta"]:
            raise FormatError(f"{path}:1: expected header x,y,theta")
        out = []
        for lineno, row in enumerate(r, start=2):
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields")
            try:
                out.append([float(v) for v in row])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed number") from None
    return np.asarray(out, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Dataset manifests


@dataclass
class ManifestRecord:
    template_id: str
    finger_id: str
    pose_label: str
    yaw: float
    minutiae: str  # 2D minutiae CSV, relative to the manifest
    gradient: str  # gradient grid CSV, relative to the manifest
    grid_scale: float = 1.0
    grid_origin: tuple = (0.0, 0.0)


@dataclass
class DatasetManifest:
    name: str
    records: list
    meta: dict = field(default_factory=dict)
    root: Path = Path(".")

    def to_json(self) -> str:
        recs = []
        for r in self.records:
            d = asdict(r)
            d["grid_origin"] = list(r.grid_origin)
            recs.append(d)
        return json.dumps({"dataset": self.name, "meta": self.meta, "records": recs}, indent=1, sort_keys=True) + "\n"


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(manifest.to_json(), encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(d, dict) or set(d) != {"dataset", "meta", "records"}:
        raise FormatError(f"{path}: expected keys dataset, meta, records")
    names = {f.name for f in fields(ManifestRecord)}
    recs, seen = [], set()
    for k, r in enumerate(d["records"]):
        if not isinstance(r, dict) or set(r) != names:
            raise FormatError(f"{path}: record {k} must have keys {sorted(names)}")
        rec = ManifestRecord(**{**r, "grid_origin": tuple(r["grid_origin"])})
        if rec.template_id in seen:
            raise FormatError(f"{path}: duplicate template_id {rec.template_id!r}")
        seen.add(rec.template_id)
        if check_files:
            for f in (rec.minutiae, rec.gradient):
                if not (path.parent / f).is_file():
                    raise FormatError(f"{path}: record {rec.template_id} references missing file {f}")
        recs.append(rec)
    return DatasetManifest(d["dataset"], recs, d["meta"], path.parent)


def to_jsonable(x: Any):
    """Plain JSON types for config echoes."""
    if is_dataclass(x):
        return to_jsonable(asdict(x))
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x
