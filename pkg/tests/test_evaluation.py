import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from g3dm import evaluation as ev
from g3dm.geometry3d import Template3D
from helpers import oracle_cmc, oracle_eer


def tpl(tid, finger, yaw=0.0, n=5):
    return Template3D(tid, finger, "front" if yaw == 0 else f"yaw{yaw:+g}", np.ones((n, 6)), yaw=yaw)


class TestScores:
    def test_examples(self):
        a = np.array([1.0, 2.0, 3.0])
        assert ev.match_score(a, a) == pytest.approx(1.0)
        assert ev.match_score(a, -a) == pytest.approx(0.0)
        assert ev.match_score([1, 0], [0, 1]) == pytest.approx(0.5)

    def test_block_matches_pairwise(self):
        rng = np.random.default_rng(0)
        p, g = rng.normal(size=(4, 7)), rng.normal(size=(5, 7))
        blk = ev.score_block(p, g)
        for i in range(4):
            for j in range(5):
                assert blk[i, j] == pytest.approx(ev.match_score(p[i], g[j]), abs=1e-15)

    def test_bad_embeddings(self):
        with pytest.raises(ev.EvaluationError):
            ev.match_score([0, 0], [1, 0])
        with pytest.raises(ev.EvaluationError):
            ev.match_score([np.nan, 0], [1, 0])


class TestFusion:
    def test_examples(self):
        assert ev.fuse_dual(0.5, 0.8) == pytest.approx(0.62)
        for s1 in (0.0, 0.3, 1.0):
            assert ev.fuse_dual(s1, 0.6) == 0.6
        assert ev.fuse_dual(0.7, 0.7) == pytest.approx(0.7)

    def test_branches_exactly(self):
        rng = np.random.default_rng(0)
        s1, s2 = rng.random(1000), rng.random(1000)
        got = ev.fuse_dual(s1, s2)
        for a, b, f in zip(s1, s2, got):
            assert f == (0.6 * a + 0.4 * b if b >= 0.7 else b)

    def test_monotone_above_threshold(self):
        s1 = np.linspace(0, 1, 11)
        assert np.all(np.diff(ev.fuse_dual(s1, np.full(11, 0.9))) > 0)
        assert np.all(ev.fuse_dual(s1, np.full(11, 0.5)) == 0.5)

    def test_range_checked(self):
        with pytest.raises(ev.EvaluationError):
            ev.fuse_dual(1.2, 0.5)

    def test_external(self):
        assert ev.fuse_external(0, 0) == 0
        assert ev.fuse_external(500, 300) == pytest.approx(1.5)
        with pytest.raises(ev.EvaluationError):
            ev.fuse_external(-1, 0)

    def test_external_files_missing_rows(self, tmp_path):
        ev.write_scores(tmp_path / "a.csv", [("p", "g", 0.5), ("p", "h", 0.25)])
        ev.write_scores(tmp_path / "b.csv", [("g", "p", 400.0)])
        got = ev.fuse_external_files(tmp_path / "a.csv", tmp_path / "b.csv")
        assert got[0] == ("p", "g", pytest.approx(0.4 + 0.5))
        assert got[1] == ("p", "h", pytest.approx(0.25))

    def test_dual_files(self, tmp_path):
        ev.write_scores(tmp_path / "a.csv", [("p", "g", 0.5)])
        ev.write_scores(tmp_path / "b.csv", [("p", "g", 0.8)])
        assert ev.fuse_dual_files(tmp_path / "a.csv", tmp_path / "b.csv")[0][2] == pytest.approx(0.62)


class TestScoreFiles:
    def test_round_trip(self, tmp_path):
        rows = [("a", "b", 0.123456789123), ("a", "c", 1.0)]
        ev.write_scores(tmp_path / "s.csv", rows)
        got = ev.read_scores(tmp_path / "s.csv")
        assert got == {("a", "b"): 0.123456789, ("a", "c"): 1.0}

    @pytest.mark.parametrize(
        "text,match",
        [
            ("p,g,s\n", "header"),
            ("probe_id,gallery_id,score\na,b\n", ":2:"),
            ("probe_id,gallery_id,score\na,b,x\n", ":2:"),
            ("probe_id,gallery_id,score\na,b,0.1\na,b,0.2\n", ":3: duplicate"),
            ("probe_id,gallery_id,score\na,b,nan\n", "non-finite"),
        ],
    )
    def test_rejects(self, tmp_path, text, match):
        p = tmp_path / "s.csv"
        p.write_text(text)
        with pytest.raises(ev.EvaluationError, match=match):
            ev.read_scores(p)


class TestEER:
    def test_perfect(self):
        assert ev.compute_eer([0.9, 0.8], [0.1, 0.2]).eer == 0.0

    def test_identical_distributions(self):
        s = [0.1, 0.4, 0.4, 0.7, 0.9]
        assert ev.compute_eer(s, s).eer == pytest.approx(0.5)

    def test_random_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            n_g, n_i = int(rng.integers(1, 40)), int(rng.integers(1, 60))
            gen = rng.normal(0.6, 0.15, n_g)
            imp = rng.normal(0.45, 0.15, n_i)
            if trial % 3 == 0:
                gen, imp = np.round(gen, 1), np.round(imp, 1)
            assert abs(ev.compute_eer(gen, imp).eer - oracle_eer(gen, imp)) <= 1e-9

    def test_thousand_scores(self):
        rng = np.random.default_rng(1)
        gen, imp = rng.random(300), rng.random(700) * 0.8
        assert abs(ev.compute_eer(gen, imp).eer - oracle_eer(gen, imp)) <= 1e-9

    def test_anti_correlated_exceeds_half(self):
        assert ev.compute_eer([0.1, 0.2], [0.8, 0.9]).eer > 0.5

    def test_error_rates_monotone(self):
        rng = np.random.default_rng(2)
        th, fmr, fnmr = ev.error_rates(rng.random(50), rng.random(80))
        assert np.all(np.diff(fmr) <= 0) and np.all(np.diff(fnmr) >= 0)
        assert fmr[-1] == 0 and fnmr[-1] == 1 and math.isinf(th[-1])

    def test_empty(self):
        with pytest.raises(ev.EvaluationError):
            ev.compute_eer([], [0.1])


def matrix(scores, probe_fingers, gallery_fingers):
    P, G = scores.shape
    return ev.ScoreMatrix(
        [f"p{i}" for i in range(P)], [f"g{j}" for j in range(G)], probe_fingers, gallery_fingers, scores, np.zeros((P, G), bool)
    )


class TestCMC:
    def test_diagonal(self):
        s = np.eye(5) * 0.5 + 0.4
        assert ev.compute_cmc(matrix(s, list("abcde"), list("abcde"))).rank1 == 1.0

    def test_always_second(self):
        s = np.array([[0.9, 0.8, 0.1], [0.2, 0.9, 0.85], [0.6, 0.1, 0.7]])
        res = ev.compute_cmc(matrix(s, list("bca"), list("abc")))
        assert res.hit_rates[:2] == (0.0, 1.0)

    def test_random_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            P, G = 10, int(rng.integers(2, 12))
            s = rng.random((P, G))
            if trial % 2:
                s = np.round(s, 1)
            gf = [f"f{j}" for j in range(G)]
            pf = [f"f{int(rng.integers(0, G + 2))}" for _ in range(P)]
            m = matrix(s, pf, gf)
            if not m.genuine_mask().any():
                continue
            got = ev.compute_cmc(m)
            np.testing.assert_allclose(got.hit_rates, oracle_cmc(s, m.genuine_mask()), atol=1e-12)
            assert got.excluded == sum(not m.genuine_mask()[p].any() for p in range(P))

    def test_symmetric_rejected(self):
        m = matrix(np.eye(2), ["a", "b"], ["a", "b"])
        m.symmetric = True
        with pytest.raises(ev.EvaluationError):
            ev.compute_cmc(m)


def perfect_matcher(templates):
    fingers = sorted({t.finger_id for t in templates})
    emb = np.zeros((len(templates), 8))
    for i, t in enumerate(templates):
        emb[i, int(t.finger_id[1:]) % 8] = 1.0
    return emb, np.ones(len(templates), bool)


class TestProtocols:
    def templates(self):
        return [tpl(f"F{f}_{y}", f"F{f}", y) for f in range(3) for y in (0.0, 30.0)]

    def test_counts(self):
        ts = self.templates()
        rep, m = ev.run_protocol(ts, ev.ProtocolSpec("all-vs-all"), perfect_matcher)
        assert rep.n_genuine + rep.n_impostor == 15
        assert rep.n_genuine == 3
        assert len(m.rows()) == 15

    def test_identification_perfect(self):
        ts = self.templates() + [tpl("F1_x", "F1", -30.0)]
        rep, m = ev.run_protocol(ts, ev.ProtocolSpec("identification"), perfect_matcher)
        assert rep.rank1 == 1.0 and rep.n_probes == 4 and rep.excluded_probes == 0
        assert m.gallery_ids == ["F0_0.0", "F1_0.0", "F2_0.0"]
        assert rep.eer == 0.0

    def test_gallery_rule(self):
        ts = [tpl("a", "F0", 30.0), tpl("b", "F0", -10.0), tpl("c", "F0", 10.0)]
        assert ev.split_gallery(ts) == ([0, 2], [1])

    def test_failed_template_scores_zero(self):
        ts = self.templates()

        def matcher(chunk):
            emb, ok = perfect_matcher(chunk)
            ok[[i for i, t in enumerate(chunk) if t.template_id == "F1_30.0"]] = False
            return emb, ok

        rep, m = ev.run_protocol(ts, ev.ProtocolSpec("all-vs-all"), matcher)
        k = m.probe_ids.index("F1_30.0")
        assert np.all(m.scores[k] == 0) and np.all(m.scores[:, k] == 0)
        assert rep.n_failed == 1
        # the failed finger's genuine pair keeps its label but now sits at the bottom
        assert rep.n_genuine == 3 and rep.eer > 0

    def test_thread_cap_preserves_order(self, monkeypatch):
        ts = [tpl(f"t{i}", f"F{i % 5}") for i in range(40)]

        def matcher(chunk):
            return np.array([[float(t.template_id[1:]), 1.0] for t in chunk]), np.ones(len(chunk), bool)

        monkeypatch.setenv("G3DM_THREADS", "4")
        emb, ok = ev.embed_all(ts, matcher, chunk=3)
        np.testing.assert_array_equal(emb[:, 0], np.arange(40))

    def test_duplicate_ids(self):
        with pytest.raises(ev.EvaluationError):
            ev.run_protocol([tpl("a", "F0"), tpl("a", "F1")], ev.ProtocolSpec(), perfect_matcher)

    def test_report_json_round_trip(self):
        rep, _ = ev.run_protocol(self.templates() + [tpl("x", "F0", 10.0)], ev.ProtocolSpec("identification"), perfect_matcher)
        assert ev.MetricsReport.from_json(rep.to_json()) == rep


class TestCurves:
    def report(self):
        ts = [tpl(f"F{f}_{y}", f"F{f}", y) for f in range(4) for y in (0.0, 20.0, -20.0)]
        rng = np.random.default_rng(3)

        def noisy(chunk):
            emb, ok = perfect_matcher(chunk)
            return emb + rng.normal(scale=0.6, size=emb.shape), ok

        return ev.run_protocol(ts, ev.ProtocolSpec("identification"), noisy)[0]

    def test_csv_round_trip(self, tmp_path):
        rep = self.report()
        paths = ev.emit_curves(rep, tmp_path)
        assert ev.read_points(paths["det_csv"]) == rep.det
        assert ev.read_points(paths["roc_csv"]) == rep.roc
        assert ev.read_points(paths["cmc_csv"]) == [(float(r), h) for r, h in rep.cmc]

    def test_svg_well_formed(self, tmp_path):
        paths = ev.emit_curves(self.report(), tmp_path)
        for k in ("det_svg", "roc_svg", "cmc_svg"):
            root = ET.parse(paths[k]).getroot()
            assert root.tag.endswith("svg")

    def test_perfect_separation(self, tmp_path):
        ts = [tpl(f"F{f}_{y}", f"F{f}", y) for f in range(3) for y in (0.0, 20.0)]
        rep, _ = ev.run_protocol(ts, ev.ProtocolSpec("identification"), perfect_matcher)
        # the DET passes through the origin and CMC is flat at 1
        assert (0.0, 0.0) in rep.det
        assert all(h == 1.0 for _, h in rep.cmc)
