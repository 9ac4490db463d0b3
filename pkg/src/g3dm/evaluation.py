"""Scores, fusion rules and verification / identification metrics.

Scores live on ``[0, 1]``: ``(1 + cos) / 2`` between L2-normalised
embeddings.  A pair is genuine iff both templates come from the same finger,
whatever their poses.  Templates that cannot be embedded score 0 against
everything.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry3d import Template3D

FUSION_THRESHOLD = 0.7


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Scores and fusion


def _unit_rows(e: np.ndarray) -> np.ndarray:
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    if not np.isfinite(e).all():
        raise EvaluationError("non-finite embedding")
    n = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(n == 0):
        raise EvaluationError("zero-norm embedding")
    return e / n


def match_score(a, b) -> float:
    """``(1 + cos(a, b)) / 2``; symmetric, 1 for identical directions."""
    ua, ub = _unit_rows(a)[0], _unit_rows(b)[0]
    c = float(np.clip(ua @ ub, -1.0, 1.0))
    return (1.0 + c) / 2.0


def score_block(probe_emb: np.ndarray, gallery_emb: np.ndarray) -> np.ndarray:
    """Matrix form of :func:`match_score`."""
    c = np.clip(_unit_rows(probe_emb) @ _unit_rows(gallery_emb).T, -1.0, 1.0)
    return (1.0 + c) / 2.0


def _check_unit(name, v):
    v = np.asarray(v, dtype=np.float64)
    if not (np.isfinite(v).all() and (v >= 0).all() and (v <= 1).all()):
        raise EvaluationError(f"{name} must lie in [0, 1]")
    return v


def fuse_dual(s1, s2):
    """Dual-network fusion: ``0.6 s1 + 0.4 s2`` when ``s2 >= 0.7``, else ``s2``.

    ``s1`` comes from the all-pose network, ``s2`` from the same-pose one.
    Works elementwise on arrays.
    """
    a, b = _check_unit("s1", s1), _check_unit("s2", s2)
    out = np.where(b >= FUSION_THRESHOLD, 0.6 * a + 0.4 * b, b)
    return float(out) if out.ndim == 0 else out


def fuse_external(s3, s):
    """``s3 / 1000 + s / 300`` with ``s`` on the 0-300 internal scale."""
    s3 = np.asarray(s3, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s3 < 0) or not (np.isfinite(s3).all() and np.isfinite(s).all()):
        raise EvaluationError("external scores must be finite and non-negative")
    out = s3 / 1000.0 + s / 300.0
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Score files


def write_scores(path, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["probe_id", "gallery_id", "score"])
        for p, g, s in rows:
            w.writerow([p, g, f"{float(s):.9g}"])


def read_scores(path) -> dict[tuple[str, str], float]:
    """Parse a ``probe_id,gallery_id,score`` file into a pair -> score map."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["probe_id", "gallery_id", "score"]:
            raise EvaluationError(f"{path}: expected header probe_id,gallery_id,score")
        for lineno, row in enumerate(r, start=2):
            if len(row) != 3:
                raise EvaluationError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                s = float(row[2])
            except ValueError:
                raise EvaluationError(f"{path}:{lineno}: score {row[2]!r} is not a number") from None
            if not math.isfinite(s):
                raise EvaluationError(f"{path}:{lineno}: non-finite score")
            key = (row[0], row[1])
            if key in out:
                raise EvaluationError(f"{path}:{lineno}: duplicate pair {key}")
            out[key] = s
    return out


def _lookup(table, p, g):
    if (p, g) in table:
        return table[(p, g)]
    return table.get((g, p))


def fuse_dual_files(path_all, path_same) -> list[tuple[str, str, float]]:
    """Fuse two score files pair by pair; pairs missing from either score 0 there."""
    a, b = read_scores(path_all), read_scores(path_same)
    keys = list(a) + [k for k in b if _lookup(a, *k) is None]
    return [(p, g, fuse_dual(_lookup(a, p, g) or 0.0, _lookup(b, p, g) or 0.0)) for p, g in keys]


def fuse_external_files(path_internal, path_external) -> list[tuple[str, str, float]]:
    """Fuse internal ``[0, 1]`` scores with an external matcher's; missing external rows count as 0."""
    internal, external = read_scores(path_internal), read_scores(path_external)
    return [(p, g, fuse_external(_lookup(external, p, g) or 0.0, 300.0 * s)) for (p, g), s in internal.items()]


# ---------------------------------------------------------------------------
# Verification metrics


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold: float


def error_rates(genuine, impostor) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (union of scores plus +inf) with FMR and FNMR at each.

    A comparison is accepted when its score is ``>= threshold``.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    if g.size == 0 or i.size == 0:
        raise EvaluationError("need at least one genuine and one impostor score")
    if not (np.isfinite(g).all() and np.isfinite(i).all()):
        raise EvaluationError("non-finite score")
    th = np.append(np.unique(np.concatenate([g, i])), np.inf)
    fmr = 1.0 - np.searchsorted(i, th, side="left") / i.size
    fnmr = np.searchsorted(g, th, side="left") / g.size
    return th, fmr, fnmr


def compute_eer(genuine, impostor) -> EERResult:
    """Equal error rate by linear interpolation at the FMR/FNMR crossing.

    The crossing is bracketed by the last threshold with ``FMR > FNMR`` and the
    next one; the returned threshold is interpolated the same way (or the
    bracketing score when the upper end is +inf).
    """
    th, fmr, fnmr = error_rates(genuine, impostor)
    diff = fmr - fnmr
    i = int(np.argmax(diff <= 0))  # diff ends at -1, so a crossing exists
    if i == 0:
        return EERResult(float(fmr[0]), float(th[0]))
    w = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = fmr[i - 1] + w * (fmr[i] - fmr[i - 1])
    t = th[i - 1] + w * (th[i] - th[i - 1]) if math.isfinite(th[i]) else th[i - 1]
    return EERResult(float(eer), float(t))


# ---------------------------------------------------------------------------
# Score matrices and identification


@dataclass
class ScoreMatrix:
    probe_ids: list
    gallery_ids: list
    probe_fingers: list
    gallery_fingers: list
    scores: np.ndarray  # (P, G) in [0, 1]
    missing: np.ndarray  # (P, G) bool, entries scored 0 because embedding failed
    symmetric: bool = False  # all-vs-all: probes and gallery are the same list

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.missing = np.asarray(self.missing, dtype=bool)
        shape = (len(self.probe_ids), len(self.gallery_ids))
        if self.scores.shape != shape or self.missing.shape != shape:
            raise EvaluationError(f"score matrix shape {self.scores.shape} does not match ids {shape}")
        if not np.isfinite(self.scores).all():
            raise EvaluationError("non-finite score in matrix")

    def genuine_mask(self) -> np.ndarray:
        return np.asarray(self.probe_fingers)[:, None] == np.asarray(self.gallery_fingers)[None, :]

    def pair_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Indices of scored pairs; unique unordered pairs when symmetric."""
        if self.symmetric:
            return np.triu_indices(len(self.probe_ids), 1)
        p, g = np.indices(self.scores.shape)
        return p.ravel(), g.ravel()

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Genuine and impostor score arrays."""
        r, c = self.pair_index()
        gen = self.genuine_mask()[r, c]
        s = self.scores[r, c]
        return s[gen], s[~gen]

    def rows(self) -> list[tuple[str, str, float]]:
        r, c = self.pair_index()
        return [(self.probe_ids[i], self.gallery_ids[j], float(self.scores[i, j])) for i, j in zip(r, c)]

    def with_scores(self, scores: np.ndarray) -> "ScoreMatrix":
        return ScoreMatrix(
            self.probe_ids, self.gallery_ids, self.probe_fingers, self.gallery_fingers, scores, self.missing, self.symmetric
        )


@dataclass(frozen=True)
class CMCResult:
    hit_rates: tuple  # CMC(r) for r = 1..G
    rank1: float
    n_probes: int
    excluded: int  # probes without a genuine gallery entry


def compute_cmc(matrix: ScoreMatrix) -> CMCResult:
    """Cumulative match characteristic of a probe-vs-gallery matrix.

    Each probe's gallery is sorted by descending score with ties broken by
    gallery index; the rank of its best-placed genuine entry is recorded.
    """
    if matrix.symmetric:
        raise EvaluationError("CMC needs an identification (probe vs gallery) matrix")
    n_gal = len(matrix.gallery_ids)
    if n_gal == 0:
        raise EvaluationError("empty gallery")
    gen = matrix.genuine_mask()
    ranks = []
    excluded = 0
    for p in range(len(matrix.probe_ids)):
        if not gen[p].any():
            excluded += 1
            continue
        order = np.argsort(-matrix.scores[p], kind="stable")
        ranks.append(int(np.argmax(gen[p][order])) + 1)
    if not ranks:
        raise EvaluationError("no probe has a genuine gallery entry")
    ranks = np.asarray(ranks)
    hits = tuple(float(np.mean(ranks <= r)) for r in range(1, n_gal + 1))
    return CMCResult(hits, hits[0], len(ranks), excluded)


# ---------------------------------------------------------------------------
# Protocols


@dataclass(frozen=True)
class ProtocolSpec:
    mode: str = "all-vs-all"  # or "identification"
    gallery_rule: str = "min-abs-yaw"

    def __post_init__(self):
        if self.mode not in ("all-vs-all", "identification"):
            raise EvaluationError(f"unknown protocol mode {self.mode!r}")
        if self.gallery_rule != "min-abs-yaw":
            raise EvaluationError(f"unknown gallery rule {self.gallery_rule!r}")


@dataclass
class MetricsReport:
    protocol: str
    n_templates: int
    n_failed: int
    n_genuine: int
    n_impostor: int
    eer: float
    eer_threshold: float
    rank1: float | None = None
    n_probes: int | None = None
    excluded_probes: int | None = None
    det: list = field(default_factory=list)  # [(fmr, fnmr)]
    roc: list = field(default_factory=list)  # [(fmr, tar)]
    cmc: list = field(default_factory=list)  # [(rank, hit_rate)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        for k in ("det", "roc", "cmc"):
            d[k] = [tuple(p) for p in d[k]]
        return cls(**d)


def split_gallery(templates: Sequence[Template3D]) -> tuple[list[int], list[int]]:
    """Per finger, the first template with the smallest |yaw| is the gallery; the rest probe."""
    best: dict[str, int] = {}
    for i, t in enumerate(templates):
        j = best.get(t.finger_id)
        if j is None or abs(t.yaw) < abs(templates[j].yaw):
            best[t.finger_id] = i
    gallery = sorted(best.values())
    gset = set(gallery)
    return [i for i in range(len(templates)) if i not in gset], gallery


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("G3DM_THREADS", "1")))
    except ValueError:
        raise EvaluationError("G3DM_THREADS must be an integer") from None


def embed_all(
    templates: Sequence, embedder: Callable[[list], tuple[np.ndarray, np.ndarray]], chunk: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``embedder`` over chunks (in parallel up to ``G3DM_THREADS``), preserving order.

    ``embedder(chunk)`` returns ``(embeddings, ok)``; rows with ``ok`` false
    are failures.
    """
    chunks = [list(templates[i : i + chunk]) for i in range(0, len(templates), chunk)]
    n = _threads()
    if n == 1 or len(chunks) < 2:
        parts = [embedder(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            parts = list(pool.map(embedder, chunks))
    if not parts:
        return np.zeros((0, 0)), np.zeros(0, dtype=bool)
    return np.vstack([p[0] for p in parts]), np.concatenate([np.asarray(p[1], dtype=bool) for p in parts])


def build_score_matrix(templates: Sequence[Template3D], spec: ProtocolSpec, emb: np.ndarray, ok: np.ndarray) -> ScoreMatrix:
    ids = [t.template_id for t in templates]
    if len(set(ids)) != len(ids):
        raise EvaluationError("template ids must be unique")
    fingers = [t.finger_id for t in templates]
    ok = np.asarray(ok, dtype=bool)
    safe = np.where(ok[:, None], emb, 1.0)
    if spec.mode == "all-vs-all":
        probes = gallery = list(range(len(templates)))
    else:
        probes, gallery = split_gallery(templates)
    s = score_block(safe[probes], safe[gallery])
    missing = ~(ok[probes][:, None] & ok[gallery][None, :])
    s[missing] = 0.0
    return ScoreMatrix(
        [ids[i] for i in probes],
        [ids[i] for i in gallery],
        [fingers[i] for i in probes],
        [fingers[i] for i in gallery],
        s,
        missing,
        symmetric=spec.mode == "all-vs-all",
    )


def metrics_from_matrix(matrix: ScoreMatrix, spec: ProtocolSpec, n_templates: int, n_failed: int) -> MetricsReport:
    gen, imp = matrix.split()
    e = compute_eer(gen, imp)
    th, fmr, fnmr = error_rates(gen, imp)
    report = MetricsReport(
        protocol=spec.mode,
        n_templates=n_templates,
        n_failed=n_failed,
        n_genuine=int(gen.size),
        n_impostor=int(imp.size),
        eer=e.eer,
        eer_threshold=e.threshold,
        det=[(float(a), float(b)) for a, b in zip(fmr, fnmr)],
        roc=[(float(a), float(1.0 - b)) for a, b in zip(fmr, fnmr)],
    )
    if spec.mode == "identification":
        c = compute_cmc(matrix)
        report.rank1 = c.rank1
        report.n_probes = c.n_probes
        report.excluded_probes = c.excluded
        report.cmc = [(r, h) for r, h in enumerate(c.hit_rates, start=1)]
    return report


def run_protocol(
    templates: Sequence[Template3D],
    spec: ProtocolSpec,
    matcher: Callable[[list], tuple[np.ndarray, np.ndarray]],
) -> tuple[MetricsReport, ScoreMatrix]:
    """Embed every template with ``matcher`` and score per ``spec``."""
    if len(templates) < 2:
        raise EvaluationError("a protocol needs at least two templates")
    emb, ok = embed_all(templates, matcher)
    if emb.shape[0] != len(templates):
        raise EvaluationError("matcher returned the wrong number of embeddings")
    matrix = build_score_matrix(templates, spec, emb, ok)
    return metrics_from_matrix(matrix, spec, len(templates), int((~ok).sum())), matrix


# ---------------------------------------------------------------------------
# Curves


def _fmt(v: float) -> str:
    # shortest repr, so curve files re-parse to the exact report values
    return repr(float(v))


def _write_points(path: Path, header: tuple[str, str], pts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for a, b in pts:
            w.writerow([_fmt(a) if isinstance(a, float) else a, _fmt(b)])


def read_points(path) -> list[tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        return [(float(a), float(b)) for a, b in r]


def _svg(title: str, xlabel: str, ylabel: str, pts, log_x: bool = False, x_floor: float = 1e-4) -> str:
    w, h, m = 480, 360, 50
    xs = np.array([p[0] for p in pts], dtype=np.float64)
    ys = np.array([p[1] for p in pts], dtype=np.float64)
    if log_x:
        lo = math.log10(x_floor)
        xv = (np.log10(np.maximum(xs, x_floor)) - lo) / -lo
    else:
        x_max = max(float(xs.max()), 1.0) if xs.size else 1.0
        xv = xs / x_max
    yv = np.clip(ys, 0.0, 1.0)
    coords = " ".join(f"{m + x * (w - 2 * m):.2f},{h - m - y * (h - 2 * m):.2f}" for x, y in zip(xv, yv))
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
        f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{h / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {h / 2})">{ylabel}</text>',
    ]
    if log_x:
        for e in range(int(math.log10(x_floor)), 1):
            x = m + (e - math.log10(x_floor)) / -math.log10(x_floor) * (w - 2 * m)
            lines.append(f'<text x="{x:.2f}" y="{h - m + 14}" text-anchor="middle" font-size="10">1e{e}</text>')
    lines.append(f'<polyline fill="none" stroke="#1f4e9c" stroke-width="1.5" points="{coords}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_curves(report: MetricsReport, out_dir) -> dict[str, Path]:
    """Write DET/ROC (and CMC when present) as CSV plus SVG; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvaluationError(f"cannot create {out}: {exc}") from exc
    curves = {
        "det": (("fmr", "fnmr"), report.det, "DET", "FMR (log)", "FNMR", True),
        "roc": (("fmr", "tar"), report.roc, "ROC", "FMR", "TAR", False),
    }
    if report.cmc:
        curves["cmc"] = (("rank", "hit_rate"), report.cmc, "CMC", "rank", "identification rate", False)
    written = {}
    for name, (header, pts, title, xl, yl, log_x) in curves.items():
        if not pts:
            raise EvaluationError(f"report has no {name} points")
        csv_path, svg_path = out / f"{name}.csv", out / f"{name}.svg"
        _write_points(csv_path, header, pts)
        floor = 1.0 / max(report.n_impostor, 1) if log_x else 1e-4
        floor = 10.0 ** math.floor(math.log10(floor))
        svg_path.write_text(_svg(title, xl, yl, pts, log_x, floor), encoding="utf-8")
        written[f"{name}_csv"], written[f"{name}_svg"] = csv_path, svg_path
    return written
