import json
import struct

import numpy as np
import pytest

from g3dm import io
from g3dm.geometry3d import DepthGrid, GradientGrid, Template3D
from helpers import random_rows


def random_template(i, rng):
    return Template3D(f"t{i}", f"f{i % 7}", "front", random_rows(int(rng.integers(0, 40)), rng), yaw=float(rng.uniform(-45, 45)))


class TestTemplates:
    def test_round_trip_100(self, tmp_path):
        rng = np.random.default_rng(0)
        tpls = [random_template(i, rng) for i in range(100)]
        p = tmp_path / "t.jsonl"
        io.save_templates(p, tpls)
        back = io.load_templates(p)
        assert [t.template_id for t in back] == [t.template_id for t in tpls]
        for a, b in zip(tpls, back):
            np.testing.assert_allclose(b.minutiae, a.minutiae, rtol=1e-8, atol=1e-6)
            assert b.yaw == pytest.approx(a.yaw, rel=1e-8)
            assert (b.finger_id, b.pose_label) == (a.finger_id, a.pose_label)

    def test_writer_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(1)
        tpls = [random_template(i, rng) for i in range(5)]
        io.save_templates(tmp_path / "a", tpls)
        io.save_templates(tmp_path / "b", tpls)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        assert io.load_templates(p) == []

    def test_2d_round_trip(self, tmp_path):
        t = io.Template2D("a", "f", "front", [[1.0, 2.0, 0.5], [3.0, 4.0, 6.0]])
        io.save_templates(tmp_path / "t", [t])
        (b,) = io.load_templates(tmp_path / "t")
        assert isinstance(b, io.Template2D)
        np.testing.assert_array_equal(b.minutiae, t.minutiae)

    def test_alpha_header(self, tmp_path):
        rows = random_rows(5, np.random.default_rng(2))
        rows[:, 3:] *= 2.0
        io.save_templates(tmp_path / "t", [Template3D("a", "f", "front", rows)], alpha=50.0)
        assert len(io.load_templates(tmp_path / "t")) == 1

    def _line(self, rows):
        return json.dumps({"template_id": "a", "finger_id": "f", "pose_label": "front", "yaw": 0, "minutiae": rows})

    def test_five_fields_names_line(self, tmp_path):
        p = tmp_path / "bad"
        good = [1, 2, 3, 25, 0, 0]
        p.write_text(self._line([good]).replace('"a"', '"b"') + "\n" + self._line([good, [1, 2, 3, 4, 5]]) + "\n")
        with pytest.raises(io.FormatError, match=r":2: minutia 1 has 5 fields"):
            io.load_templates(p)

    @pytest.mark.parametrize(
        "rows, msg",
        [
            ([[0, 0, 0, 24, 0, 0]], "norm"),
            ([[0, 0, 0, 25, 0, 0], [1, 2, 3]], "file uses 6"),
            ([[0, 0, 7.0]], "theta"),
            ([[0, 0, "x", 25, 0, 0]], "non-numeric"),
        ],
    )
    def test_rejects(self, tmp_path, rows, msg):
        p = tmp_path / "bad"
        p.write_text(self._line(rows) + "\n")
        with pytest.raises(io.FormatError, match=msg):
            io.load_templates(p)

    def test_duplicate_and_missing_keys(self, tmp_path):
        p = tmp_path / "bad"
        p.write_text(self._line([]) + "\n" + self._line([]) + "\n")
        with pytest.raises(io.FormatError, match="duplicate"):
            io.load_templates(p)
        p.write_text('{"template_id": "a"}\n')
        with pytest.raises(io.FormatError, match="missing keys"):
            io.load_templates(p)


class TestCheckpoint:
    def params(self):
        rng = np.random.default_rng(3)
        return {"embed.w": rng.normal(size=(4, 3)), "embed.b": rng.normal(size=3), "stn.s": np.array(2.5)}

    def test_round_trip_at_float32(self, tmp_path):
        p = self.params()
        io.save_checkpoint(tmp_path / "c", p, {"k": 10})
        ck = io.load_checkpoint(tmp_path / "c")
        assert ck.config == {"k": 10} and list(ck.params) == list(p)
        for k in p:
            np.testing.assert_array_equal(ck.params[k], np.asarray(p[k], dtype=np.float32).astype(np.float64))
        # a second pass is lossless
        io.save_checkpoint(tmp_path / "d", ck.params, ck.config)
        assert (tmp_path / "c").read_bytes() == (tmp_path / "d").read_bytes()

    def test_corrupt_magic(self, tmp_path):
        io.save_checkpoint(tmp_path / "c", self.params())
        data = bytearray((tmp_path / "c").read_bytes())
        data[0:4] = b"XXXX"
        (tmp_path / "c").write_bytes(bytes(data))
        with pytest.raises(io.CheckpointError, match="magic"):
            io.load_checkpoint(tmp_path / "c")

    def test_truncation_names_tensor(self, tmp_path):
        io.save_checkpoint(tmp_path / "c", self.params())
        data = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(data[:-2])
        with pytest.raises(io.CheckpointError, match="payload of tensor 'stn.s'"):
            io.load_checkpoint(tmp_path / "c")

    def test_version_and_trailing(self, tmp_path):
        io.save_checkpoint(tmp_path / "c", self.params())
        data = (tmp_path / "c").read_bytes()
        (tmp_path / "v").write_bytes(data[:4] + struct.pack("<I", 9) + data[8:])
        with pytest.raises(io.CheckpointError, match="version 9"):
            io.load_checkpoint(tmp_path / "v")
        (tmp_path / "t").write_bytes(data + b"\0")
        with pytest.raises(io.CheckpointError, match="trailing"):
            io.load_checkpoint(tmp_path / "t")

    def test_non_finite_refused(self, tmp_path):
        with pytest.raises(io.CheckpointError):
            io.save_checkpoint(tmp_path / "c", {"embed.w": np.array([np.inf])})

    def test_split_join(self):
        p = self.params()
        stn, emb = io.split_params(p)
        assert set(stn) == {"s"} and set(emb) == {"w", "b"}
        assert io.join_params(stn, emb).keys() == p.keys()
        assert io.split_params({"embed.w": 1})[0] is None
        with pytest.raises(io.CheckpointError):
            io.split_params({"stn.s": 1})


class TestConfig:
    def test_defaults(self):
        cfg = io.load_config()
        assert cfg.optimizer.lr == 0.001
        assert cfg.network.k == 20
        assert cfg.finetune.gamma == 0.2
        assert cfg.geometry.normal == "as-printed"

    def test_override(self):
        cfg = io.load_config(text="[network]\nk = 10\n[optimizer]\nlr = 1\n")
        assert cfg.network.k == 10 and cfg.network.to_config().k == 10
        assert cfg.optimizer.lr == 1.0 and isinstance(cfg.optimizer.lr, float)

    @pytest.mark.parametrize(
        "text, msg",
        [
            ("[geometry]\nalpha = -1\n", "geometry.alpha"),
            ("[network]\nkk = 3\n", "network.kk: unknown key"),
            ("bogus = 1\n", "bogus: unknown key"),
            ('[network]\nk = "ten"\n', "network.k: expected int, got str"),
            ("[network]\nnormalization = 1\n", "network.normalization: expected bool"),
            ("network = 3\n", "network: expected a table"),
            ("[augment.small_gap]\nrotation_deg = [1, 2]\n", "rotation_deg"),
            ("[finetune]\nbatch_size = 1\n", "finetune.batch_size"),
            ("[network]\nconcat_width = 7\n", "network:"),
            ("[pretrain\n", "<config>"),
            ('[optimizer]\nschedule = "step"\n', "optimizer.schedule"),
            ("[pretrain]\nlr = -1\n", "pretrain.lr"),
        ],
    )
    def test_errors_name_key(self, text, msg):
        with pytest.raises(io.ConfigError, match=msg):
            io.load_config(text=text)

    def test_from_file(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text("seed = 4\n[finetune]\nepochs = 2\n")
        cfg = io.load_config(p)
        tc = cfg.train_config("finetune")
        assert (tc.seed, tc.epochs, tc.stage) == (4, 2, "finetune")
        assert tc.augment is not None and cfg.train_config("pretrain").augment is None
        assert tc.lr_schedule == "constant"
        assert io.load_config(text='[optimizer]\nschedule = "cosine"\n').train_config("pretrain").lr_schedule == "cosine"

    def test_stage_lr(self):
        cfg = io.load_config(text="[optimizer]\nlr = 0.003\n[pretrain]\nlr = 0.001\n")
        assert cfg.train_config("pretrain").adam.lr == 0.001
        assert cfg.train_config("finetune").adam.lr == 0.003


class TestGrids:
    def test_gradient_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        g = GradientGrid(rng.normal(size=(5, 7)), rng.normal(size=(5, 7)), rng.random((5, 7)) > 0.3)
        io.save_gradient_grid(tmp_path / "g.csv", g)
        b = io.load_gradient_grid(tmp_path / "g.csv")
        np.testing.assert_allclose(b.g_x, g.g_x, rtol=1e-8)
        np.testing.assert_allclose(b.g_y, g.g_y, rtol=1e-8)
        np.testing.assert_array_equal(b.mask, g.mask)

    def test_depth_round_trip(self, tmp_path):
        d = DepthGrid(np.arange(12.0).reshape(3, 4), np.ones((3, 4), bool))
        io.save_depth_grid(tmp_path / "d.csv", d)
        np.testing.assert_array_equal(io.load_depth_grid(tmp_path / "d.csv").z, d.z)

    def test_grid_rejects(self, tmp_path):
        d = DepthGrid(np.zeros((2, 2)), np.ones((2, 2), bool))
        io.save_depth_grid(tmp_path / "d.csv", d)
        lines = (tmp_path / "d.csv").read_text().splitlines()
        (tmp_path / "short.csv").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(io.FormatError, match="3 cells, expected 4"):
            io.load_depth_grid(tmp_path / "short.csv")
        lines[4] = "0,0,0,1"
        (tmp_path / "order.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(io.FormatError, match=":5:"):
            io.load_depth_grid(tmp_path / "order.csv")

    def test_minutiae_csv(self, tmp_path):
        rows = np.array([[1.5, 2.0, 0.25], [3.0, -4.0, 6.0]])
        io.save_minutiae_csv(tmp_path / "m.csv", rows)
        np.testing.assert_array_equal(io.load_minutiae_csv(tmp_path / "m.csv"), rows)
        (tmp_path / "b.csv").write_text("x,y,theta\n1,2\n")
        with pytest.raises(io.FormatError, match=":2:"):
            io.load_minutiae_csv(tmp_path / "b.csv")


class TestManifest:
    def make(self, tmp_path):
        for f in ("m.csv", "g.csv"):
            (tmp_path / f).write_text("")
        rec = io.ManifestRecord("t1", "f1", "front", 0.0, "m.csv", "g.csv", 2.0, (1.0, -1.0))
        return io.DatasetManifest("demo", [rec], {"note": "x"})

    def test_round_trip(self, tmp_path):
        m = self.make(tmp_path)
        io.save_manifest(tmp_path / "man.json", m)
        b = io.load_manifest(tmp_path / "man.json")
        assert b.records == m.records and b.name == "demo" and b.meta == {"note": "x"}
        assert b.root == tmp_path

    def test_missing_file(self, tmp_path):
        m = self.make(tmp_path)
        io.save_manifest(tmp_path / "man.json", m)
        (tmp_path / "g.csv").unlink()
        with pytest.raises(io.FormatError, match="missing file g.csv"):
            io.load_manifest(tmp_path / "man.json")
        assert len(io.load_manifest(tmp_path / "man.json", check_files=False).records) == 1

    def test_duplicate_ids(self, tmp_path):
        m = self.make(tmp_path)
        m.records.append(m.records[0])
        io.save_manifest(tmp_path / "man.json", m)
        with pytest.raises(io.FormatError, match="duplicate"):
            io.load_manifest(tmp_path / "man.json")
