"""Command-line entry point: ``g3dm <subcommand> ...``.

Every subcommand accepts ``--seed`` and ``--config``; failures exit 1 with a
one-line diagnostic, usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import geometry3d as g3
from . import io
from . import synthgen as sg
from . import training as tr
from .graphnet import MIN_MINUTIAE, NetworkConfig, matcher_embed_batch

FORMATS = """\
file formats:
  templates   JSON-Lines, one object per line:
              {"template_id": str, "finger_id": str, "pose_label": str, "yaw": deg,
               "minutiae": [[x, y, z, dx, dy, dz], ...]}   (3D, |(dx,dy,dz)| = alpha)
              or rows [x, y, theta] for 2D sets; an optional first line {"alpha": a}
              overrides the orientation scale.  Numbers carry 9 significant digits.
  manifest    JSON {"dataset", "meta", "records": [{template_id, finger_id, pose_label,
              yaw, minutiae, gradient, grid_scale, grid_origin}]}; paths are relative
              to the manifest.
  minutiae    CSV header x,y,theta then one row per minutia (pixels, radians).
  grid        CSV: width,height / <w>,<h> / i,j,g_x,g_y,mask / rows with j outer,
              i inner.  Cell (i, j) sits at grid_origin + (i, j) * grid_scale.
  checkpoint  b"G3DM", u32 version, u32 length + JSON config echo, u32 tensor count,
              then per tensor u32 name length, name, u32 rank, u32 extents,
              float32 payload; little-endian.
  scores      CSV probe_id,gallery_id,score (all-vs-all lists each unordered pair once).
  embeddings  JSON-Lines {"template_id", "finger_id", "pose_label", "yaw",
              "embedding": [256 numbers] or null when the template failed}.
  loss trace  CSV epoch,stage,mean_loss,active_triplet_fraction.
  report      JSON MetricsReport; curves as det/roc/cmc .csv and .svg.
environment:
  G3DM_THREADS caps evaluation parallelism (default 1).
"""


class CliError(Exception):
    pass


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# synth / lift


def cmd_synth(args, cfg: io.RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "contact":
        sets = sg.generate_contact_set(args.seed, args.identities, args.impressions)
        tpls = [
            io.Template2D(
                f"{c.identity}_{c.impression}",
                c.identity,
                "contact",
                np.array([[m.x, m.y, m.theta] for m in c.minutiae]),
            )
            for c in sets
        ]
        io.save_templates(out / "contact.jsonl", tpls)
        meta = {"kind": "contact", "seed": args.seed, "identities": args.identities, "templates": "contact.jsonl"}
        io.save_manifest(out / "manifest.json", io.DatasetManifest("contact", [], meta))
        return
    spec = sg.ObservationSpec()
    records, truth = [], []
    (out / "minutiae").mkdir(exist_ok=True)
    (out / "grids").mkdir(exist_ok=True)
    for f in range(args.first_finger, args.first_finger + args.fingers):
        finger = sg.generate_finger(args.seed * 1_000_003 + f, finger_id=f"F{f:04d}")
        for yaw in args.poses:
            label = sg.pose_label_for(yaw)
            grid_rel = f"grids/{finger.finger_id}_{label}.csv"
            for imp in range(args.impressions):
                ospec = replace(
                    spec,
                    yaw=yaw,
                    dropout=args.dropout,
                    position_sigma=args.position_sigma,
                    orientation_sigma=args.orientation_sigma,
                    seed=(args.seed * 1_000_003 + f) * 97 + imp * 11 + int(yaw + 90),
                    min_normal_z=args.min_normal_z,
                    alpha=cfg.geometry.alpha,
                )
                tid = f"{finger.finger_id}_{label}_{imp}"
                obs = sg.observe(finger, ospec, tid, label, render=imp == 0)
                if imp == 0:
                    io.save_gradient_grid(out / grid_rel, obs.gradient)
                    scale, origin = obs.gradient.scale, obs.gradient.origin
                rows = np.array([[m.x, m.y, m.theta] for m in obs.minutiae2d])
                io.save_minutiae_csv(out / "minutiae" / f"{tid}.csv", rows)
                truth.append(obs.template)
                records.append(
                    io.ManifestRecord(tid, finger.finger_id, label, float(yaw), f"minutiae/{tid}.csv", grid_rel, scale, origin)
                )
    io.save_templates(out / "truth.jsonl", truth, alpha=None if cfg.geometry.alpha == g3.DEFAULT_ALPHA else cfg.geometry.alpha)
    meta = {
        "kind": "posed",
        "seed": args.seed,
        "fingers": args.fingers,
        "first_finger": args.first_finger,
        "poses": list(args.poses),
        "impressions": args.impressions,
        "truth": "truth.jsonl",
    }
    io.save_manifest(out / "manifest.json", io.DatasetManifest("synthetic", records, meta))


def _lift_manifest(man: io.DatasetManifest, mode: str, cfg: io.RunConfig) -> list:
    out = []
    cache = {}
    for rec in man.records:
        key = (rec.gradient, rec.grid_scale, tuple(rec.grid_origin))
        if key not in cache:
            grid = io.load_gradient_grid(man.root / rec.gradient, rec.grid_scale, rec.grid_origin)
            cache = {key: (grid, g3.integrate_depth(grid) if mode == "grid" else None)}
        grid, depth = cache[key]
        rows2d = io.load_minutiae_csv(man.root / rec.minutiae)
        ms = [g3.Minutia2D(*r) for r in rows2d]
        if mode == "grid":
            rows, kept = g3.lift_minutiae(ms, grid, depth, cfg.geometry.alpha, True, cfg.geometry.normal)
            out.append(g3.Template3D(rec.template_id, rec.finger_id, rec.pose_label, rows, yaw=rec.yaw))
        else:
            # same on-mask subset as the 3D lift, kept flat
            kept = [k for k, m in enumerate(ms) if _on_mask(grid, m)]
            flat = np.array([[ms[k].x, ms[k].y, ms[k].theta] for k in kept]).reshape(-1, 3)
            out.append(io.Template2D(rec.template_id, rec.finger_id, rec.pose_label, flat, yaw=rec.yaw))
    return out


def _on_mask(grid, m) -> bool:
    try:
        g3.sample_bilinear(grid, grid.g_x, m.x, m.y)
    except g3.GeometryError:
        return False
    return True


def cmd_lift(args, cfg: io.RunConfig) -> None:
    alpha = cfg.geometry.alpha
    header = None if alpha == g3.DEFAULT_ALPHA else alpha
    if args.mode in ("grid", "flat"):
        if not args.manifest:
            raise CliError(f"--mode {args.mode} needs --manifest")
        tpls = _lift_manifest(io.load_manifest(args.manifest), args.mode, cfg)
    else:
        if not args.templates:
            raise CliError(f"--mode {args.mode} needs --templates (2D sets)")
        src = io.load_templates(args.templates)
        tpls = []
        for t in src:
            if not isinstance(t, io.Template2D):
                raise CliError(f"{args.templates}: --mode {args.mode} expects 2D templates")
            ms = sg.centre_minutiae([g3.Minutia2D(*r) for r in t.minutiae])
            if args.mode == "sphere":
                rows = g3.spherical_lift_array(
                    [m.x for m in ms], [m.y for m in ms], [m.theta for m in ms], cfg.geometry.sphere_c, alpha, cfg.geometry.normal
                )
                tpls.append(g3.Template3D(t.template_id, t.finger_id, t.pose_label, rows, yaw=t.yaw))
            else:
                tpls.append(io.Template2D(t.template_id, t.finger_id, t.pose_label, [[m.x, m.y, m.theta] for m in ms], yaw=t.yaw))
    io.save_templates(args.out, tpls, alpha=header if tpls and isinstance(tpls[0], g3.Template3D) else None)


# ---------------------------------------------------------------------------
# training


def _dim(tpls) -> int:
    if not tpls:
        raise CliError("no templates")
    return tpls[0].minutiae.shape[1]


def _checkpoint_config(net: NetworkConfig, dim: int, stage: str, cfg: io.RunConfig, seed: int) -> dict:
    return {"input_dim": dim, "stage": stage, "seed": seed, "network": io.to_jsonable(net), "run": cfg.to_dict()}


def _net_from_echo(echo: dict) -> NetworkConfig:
    d = dict(echo["network"])
    for k in ("edgeconv_widths", "stn_mlp_widths", "embed_mlp_widths", "residual_layers", "angle_bounds"):
        d[k] = tuple(d[k])
    return NetworkConfig(**d)


def _load_matcher(path) -> tuple[tr.MatcherParams, dict]:
    ck = io.load_checkpoint(path)
    if "network" not in ck.config:
        raise CliError(f"{path}: checkpoint lacks a network config echo")
    stn, emb = io.split_params(ck.params)
    return tr.MatcherParams(_net_from_echo(ck.config), emb, stn), ck.config


def _run_training(args, cfg: io.RunConfig, stage: str) -> None:
    tpls = [t for t in io.load_templates(args.templates) if len(t) >= MIN_MINUTIAE]
    dim = _dim(tpls)
    samples = [tr.Sample(t.minutiae, t.finger_id, t.pose_label, t.yaw, t.template_id) for t in tpls]
    if args.init:
        params, _ = _load_matcher(args.init)
        if params.net.input_dim != dim:
            raise CliError(f"{args.init}: network expects width {params.net.input_dim}, templates have {dim}")
    else:
        params = tr.MatcherParams.fresh(cfg.network.to_config(dim), args.seed, with_stn=False)
    if stage == "pretrain":
        table = tr.PairWeightTable.uniform()
        params = replace(params, stn=None)
    else:
        table = cfg.pairs.to_table()
    pairs = tr.make_pairs(samples, table)
    if args.same_pose_only:
        pairs = [p for p in pairs if samples[p.a].pose_label == samples[p.b].pose_label]
        if not pairs:
            raise CliError("no same-orientation pairs in the training set")
    tcfg = cfg.train_config(stage, args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    echo = _checkpoint_config(params.net, dim, stage, cfg, args.seed)
    try:
        result = tr.train(samples, pairs, table, tcfg, params)
    except tr.TrainingDiverged as exc:
        good = exc.result
        io.save_checkpoint(args.out, io.join_params(good.params.stn, good.params.embed), {**echo, "aborted": True})
        if args.trace:
            tr.write_loss_trace(args.trace, good.history)
        raise CliError(f"training diverged ({exc}); last good epoch saved to {args.out}") from None
    io.save_checkpoint(args.out, io.join_params(result.params.stn, result.params.embed), echo)
    if args.trace:
        tr.write_loss_trace(args.trace, result.history)


def cmd_pretrain(args, cfg):
    _run_training(args, cfg, "pretrain")


def cmd_finetune(args, cfg):
    _run_training(args, cfg, "finetune")


# ---------------------------------------------------------------------------
# embedding, matching, evaluation


def network_embedder(params: tr.MatcherParams):
    """Callable for :func:`evaluation.run_protocol`; templates below the minimum size fail."""

    def run(chunk):
        ok = np.array([len(t) >= MIN_MINUTIAE and t.minutiae.shape[1] == params.net.input_dim for t in chunk])
        emb = np.zeros((len(chunk), params.embed[f"head{len(params.net.embed_mlp_widths)}.bias"].shape[0]))
        idx = np.flatnonzero(ok)
        if idx.size:
            emb[idx] = matcher_embed_batch([chunk[i].minutiae for i in idx], params.stn, params.embed, params.net)
        bad = ~np.isfinite(emb).all(axis=1) | (np.linalg.norm(emb, axis=1) == 0)
        ok &= ~bad
        emb[~ok] = 0.0
        return emb, ok

    return run


def cmd_embed(args, cfg):
    params, _ = _load_matcher(args.checkpoint)
    tpls = io.load_templates(args.templates)
    emb, ok = ev.embed_all(tpls, network_embedder(params))
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for t, e, good in zip(tpls, emb, ok):
            vec = "[" + ",".join(io._num(v) for v in e) + "]" if good else "null"
            head = json.dumps({"template_id": t.template_id, "finger_id": t.finger_id, "pose_label": t.pose_label})[:-1]
            fh.write(f'{head}, "yaw": {io._num(t.yaw)}, "embedding": {vec}}}\n')


class _Stub:
    """Template-like record rebuilt from an embeddings file."""

    def __init__(self, d):
        self.template_id, self.finger_id = d["template_id"], d["finger_id"]
        self.pose_label, self.yaw = d["pose_label"], float(d["yaw"])


def load_embeddings(path):
    stubs, rows, ok = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                d = json.loads(line)
                stubs.append(_Stub(d))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise CliError(f"{path}:{lineno}: malformed embedding record") from None
            e = d.get("embedding")
            ok.append(e is not None)
            rows.append(e if e is not None else None)
    dim = next((len(r) for r in rows if r is not None), 1)
    emb = np.array([r if r is not None else [0.0] * dim for r in rows], dtype=np.float64).reshape(len(rows), dim)
    return stubs, emb, np.array(ok, dtype=bool)


def cmd_match(args, cfg):
    stubs, emb, ok = load_embeddings(args.embeddings)
    m = ev.build_score_matrix(stubs, ev.ProtocolSpec(args.protocol), emb, ok)
    ev.write_scores(args.out, m.rows())


def _matrix_from_scores(tpls, spec: ev.ProtocolSpec, scores: dict) -> ev.ScoreMatrix:
    n = len(tpls)
    base = ev.build_score_matrix(tpls, spec, np.ones((n, 1)), np.ones(n, dtype=bool))
    s = np.zeros_like(base.scores)
    missing = np.ones_like(base.missing)
    for i, p in enumerate(base.probe_ids):
        for j, g in enumerate(base.gallery_ids):
            v = scores.get((p, g), scores.get((g, p)))
            if v is not None:
                s[i, j], missing[i, j] = v, False
    if spec.mode == "all-vs-all":
        np.fill_diagonal(missing, False)
    return ev.ScoreMatrix(base.probe_ids, base.gallery_ids, base.probe_fingers, base.gallery_fingers, s, missing, base.symmetric)


def cmd_evaluate(args, cfg):
    spec = ev.ProtocolSpec(args.protocol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scores:
        if not args.templates:
            raise CliError("--scores needs --templates (or --embeddings) for labels")
        tpls = io.load_templates(args.templates)
        matrix = _matrix_from_scores(tpls, spec, ev.read_scores(args.scores))
        failed = sorted({p for p, row in zip(matrix.probe_ids, matrix.missing) if row.all()})
        report = ev.metrics_from_matrix(matrix, spec, len(tpls), len(failed))
    else:
        if not (args.checkpoint and args.templates):
            raise CliError("evaluate needs --checkpoint and --templates, or --scores and --templates")
        params, _ = _load_matcher(args.checkpoint)
        tpls = io.load_templates(args.templates)
        report, matrix = ev.run_protocol(tpls, spec, network_embedder(params))
    ev.write_scores(out / "scores.csv", matrix.rows())
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")


def cmd_fuse(args, cfg):
    if args.mode == "dual":
        if not (args.all and args.same):
            raise CliError("--mode dual needs --all and --same score files")
        rows = ev.fuse_dual_files(args.all, args.same)
    else:
        if not (args.internal and args.external):
            raise CliError("--mode external needs --internal and --external score files")
        rows = ev.fuse_external_files(args.internal, args.external)
    ev.write_scores(args.out, rows)


def cmd_report(args, cfg):
    try:
        report = ev.MetricsReport.from_json(Path(args.report).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise CliError(f"{args.report}: not a metrics report ({exc})") from None
    ev.emit_curves(report, args.out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="g3dm",
        description="3D minutiae lifting, graph embedding and cross-pose matching.",
        epilog=FORMATS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_, fn):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=FORMATS, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        sp.add_argument("--config", help="TOML run configuration")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", "generate a synthetic multi-pose dataset or a contact-print set", cmd_synth)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--kind", choices=("posed", "contact"), default="posed")
    sp.add_argument("--fingers", type=int, default=100)
    sp.add_argument("--first-finger", type=int, default=0, help="index of the first finger (disjoint ranges give disjoint fingers)")
    sp.add_argument("--poses", type=_floats, default=(-30.0, 0.0, 30.0), help="comma-separated yaw angles in degrees")
    sp.add_argument("--impressions", type=int, default=2)
    sp.add_argument("--identities", type=int, default=1000, help="contact identities (--kind contact)")
    sp.add_argument("--dropout", type=float, default=0.15)
    sp.add_argument("--position-sigma", type=float, default=3.0)
    sp.add_argument("--orientation-sigma", type=float, default=0.1)
    sp.add_argument("--min-normal-z", type=float, default=0.25)

    sp = add("lift", "lift 2D minutiae to 3D (grid or sphere) or export matched 2D sets (flat, centre)", cmd_lift)
    sp.add_argument("--manifest", help="dataset manifest (modes grid, flat)")
    sp.add_argument("--templates", help="2D template file (modes sphere, centre)")
    sp.add_argument("--mode", choices=("grid", "flat", "sphere", "centre"), default="grid")
    sp.add_argument("--out", required=True, help="output template file")

    for name, fn, help_ in (
        ("pretrain", cmd_pretrain, "train the embedder alone on lifted contact prints"),
        ("finetune", cmd_finetune, "train transformer and embedder on multi-pose templates"),
    ):
        sp = add(name, help_, fn)
        sp.add_argument("--templates", required=True)
        sp.add_argument("--init", help="checkpoint to start from")
        sp.add_argument("--out", required=True, help="output checkpoint")
        sp.add_argument("--trace", help="loss trace CSV")
        sp.add_argument("--epochs", type=int, help="override the configured epoch count")
        sp.add_argument("--same-pose-only", action="store_true", help="train on same-orientation pairs only")

    sp = add("embed", "embed templates with a checkpoint", cmd_embed)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--templates", required=True)
    sp.add_argument("--out", required=True)

    sp = add("match", "score embeddings pairwise", cmd_match)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--protocol", choices=("all-vs-all", "identification"), default="all-vs-all")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", "run a matching protocol and write report.json and scores.csv", cmd_evaluate)
    sp.add_argument("--protocol", choices=("all-vs-all", "identification"), default="all-vs-all")
    sp.add_argument("--checkpoint")
    sp.add_argument("--templates")
    sp.add_argument("--scores", help="evaluate an existing score file instead of a checkpoint")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("fuse", "fuse dual-network scores or internal with external scores", cmd_fuse)
    sp.add_argument("--mode", choices=("dual", "external"), default="dual")
    sp.add_argument("--all", help="scores of the all-pose network (s1)")
    sp.add_argument("--same", help="scores of the same-pose network (s2)")
    sp.add_argument("--internal", help="internal scores in [0, 1]")
    sp.add_argument("--external", help="external matcher scores (s3)")
    sp.add_argument("--out", required=True)

    sp = add("report", "draw DET/ROC/CMC curves from a report", cmd_report)
    sp.add_argument("--report", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _join_negative_lists(argv):
    # "--poses -30,0,30" would otherwise read as an unknown option
    out = list(argv)
    for i in range(len(out) - 1):
        if out[i] == "--poses" and out[i + 1][:1] == "-" and out[i + 1][1:2].isdigit():
            out[i : i + 2] = [f"--poses={out[i + 1]}", ""]
    return [a for a in out if a != ""]


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    args = parser.parse_args(_join_negative_lists(argv))  # exits 2 on usage errors
    try:
        cfg = io.load_config(args.config)
        args.fn(args, cfg)
    except (CliError, ValueError, OSError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"g3dm {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
