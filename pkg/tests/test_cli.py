import csv
import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from posediff.cli import main, run_estimate, run_eval, run_plot, run_synth, run_train
from posediff.config import config_hash, default_config, load_config, preset
from posediff.container import read_container, write_container
from posediff.data import load_dataset, save_dataset, synth_generate
from posediff.exceptions import ConfigError


def tiny_cfg(**model_flags):
    cfg = load_config(None, "tiny")
    cfg["data"]["n_frames"] = 8
    cfg["model"]["feature_dim"] = 32
    cfg["model"].update(model_flags)
    cfg["train"]["checkpoint_every"] = 1000
    return cfg


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One short train run shared by the estimate/eval/plot tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.ptc"
    run_synth(data, n_sequences=4, n_frames=8, n_joints=17, seed=1, motion="mixed")
    cfg = tiny_cfg()
    ckpt, trainer = run_train(cfg, data, root / "run", max_steps=8, epochs=10**6)
    pred = run_estimate(ckpt, data, root / "pred.ptc", hypotheses=2, iterations=2, seed=4)
    return {"root": root, "data": data, "ckpt": ckpt, "pred": pred, "trainer": trainer}


class TestConfig:
    def test_defaults_match_published_settings(self):
        cfg = default_config()
        assert cfg["sample"]["hypotheses"] == 20
        assert cfg["sample"]["iterations"] == 10
        assert cfg["train"]["lr0"] == 6e-5
        assert cfg["train"]["lr_decay"] == 0.993
        assert cfg["train"]["weight_decay"] == 0.1
        assert cfg["train"]["batch_size"] == 4
        assert cfg["train"]["epochs"] == 100
        assert cfg["data"]["n_frames"] == 243
        assert cfg["model"]["feature_dim"] == 512
        assert (cfg["model"]["blocks_spatial"], cfg["model"]["blocks_temporal"],
                cfg["model"]["blocks_spatio_temporal"]) == (1, 1, 3)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"modle": {}}))
        with pytest.raises(ConfigError, match="modle"):
            load_config(path)

    def test_nested_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"lr": 1.0}}))
        with pytest.raises(ConfigError, match="train.lr"):
            load_config(path)

    def test_hash_stable_and_sensitive(self):
        a, b = default_config(), default_config()
        assert config_hash(a) == config_hash(b)
        b["seed"] = 1
        assert config_hash(a) != config_hash(b)

    def test_presets(self):
        tiny = preset("tiny")
        assert tiny["model"]["feature_dim"] == 64
        assert tiny["data"]["n_frames"] == 16
        paper = preset("paper")
        assert paper == default_config()
        with pytest.raises(ConfigError):
            preset("huge")

    def test_file_encoder_runtime(self, tmp_path):
        from posediff.config import build_runtime
        from posediff.prompts import PromptSpec

        spec = PromptSpec()
        rng = np.random.default_rng(0)
        tensors, texts = {}, {}
        for k, text in enumerate(spec.texts):
            tensors[f"prompt/{k}/frozen"] = rng.standard_normal((4, 32))
            texts[f"prompt/{k}"] = text
        emb = tmp_path / "emb.ptc"
        write_container(emb, tensors, meta={"texts": texts})

        cfg = tiny_cfg()
        cfg["prompt"]["encoder"] = "file"
        cfg["prompt"]["embeddings_file"] = str(emb)
        runtime = build_runtime(cfg)
        assert runtime.bank.assemble("motion").tokens.shape == (77, 32)

        cfg["model"]["feature_dim"] = 64  # mismatched embedding width
        with pytest.raises(ConfigError, match="dim"):
            build_runtime(cfg)


class TestSynthCommand:
    def test_writes_loadable_dataset(self, tmp_path):
        out = tmp_path / "d.ptc"
        rc = main(["synth", "--out", str(out), "--sequences", "2", "--frames", "6",
                   "--seed", "3", "--characters", "2"])
        assert rc == 0
        records = load_dataset(out)
        assert len(records) == 4  # 2 singles + 2-character scene
        assert sum(1 for r in records if r.scene) == 2

    def test_byte_identical_under_seed(self, tmp_path):
        a, b = tmp_path / "a.ptc", tmp_path / "b.ptc"
        run_synth(a, 2, 6, 17, seed=3, motion="mixed")
        run_synth(b, 2, 6, 17, seed=3, motion="mixed")
        assert a.read_bytes() == b.read_bytes()


class TestTrainCommand:
    def test_log_rows_equal_steps(self, workspace):
        log = os.path.join(workspace["root"], "run", "log.csv")
        with open(log) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == workspace["trainer"].opt.step_count == 8
        assert [r["step"] for r in rows] == [str(i) for i in range(1, 9)]

    def test_missing_dataset_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="synth"):
            run_train(tiny_cfg(), tmp_path / "none.ptc", tmp_path / "out")

    def test_frame_mismatch_is_actionable(self, tmp_path):
        data = tmp_path / "d.ptc"
        save_dataset(data, synth_generate(1, 12, 17, seed=0))
        with pytest.raises(ConfigError, match="data.n_frames"):
            run_train(tiny_cfg(), data, tmp_path / "out", max_steps=1)

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        data = tmp_path / "d.ptc"
        save_dataset(data, synth_generate(4, 8, 17, seed=2))
        cfg = tiny_cfg()
        cfg["train"]["checkpoint_every"] = 1

        run_train(cfg, data, tmp_path / "full", epochs=4)
        run_train(cfg, data, tmp_path / "split", epochs=2)
        run_train(cfg, data, tmp_path / "split", resume=True, epochs=4)

        a = (tmp_path / "full" / "ckpt_last.ptc").read_bytes()
        b = (tmp_path / "split" / "ckpt_last.ptc").read_bytes()
        assert a == b

    def test_resume_rejects_config_change(self, tmp_path):
        data = tmp_path / "d.ptc"
        save_dataset(data, synth_generate(2, 8, 17, seed=2))
        cfg = tiny_cfg()
        run_train(cfg, data, tmp_path / "out", epochs=1)
        changed = tiny_cfg()
        changed["train"]["lr0"] = 123e-5
        with pytest.raises(ConfigError, match="different config"):
            run_train(changed, data, tmp_path / "out", resume=True, epochs=2)


class TestEstimateCommand:
    def test_prediction_container_layout(self, workspace):
        tensors, meta = read_container(workspace["pred"])
        assert meta["kind"] == "predictions"
        assert meta["hypotheses"] == 2 and meta["iterations"] == 2
        assert meta["config_hash"] == config_hash(meta["config"])
        for rec in load_dataset(workspace["data"]):
            poses = tensors[f"pred/{rec.seq_id}/poses"]
            idx = tensors[f"pred/{rec.seq_id}/per_joint_hypothesis_index"]
            assert poses.shape == (8, 17, 3)
            assert idx.shape == (17,)
            assert np.all((idx >= 0) & (idx < 2))

    def test_same_seed_is_byte_identical(self, workspace, tmp_path):
        p1 = tmp_path / "p1.ptc"
        p2 = tmp_path / "p2.ptc"
        run_estimate(workspace["ckpt"], workspace["data"], p1, hypotheses=2, iterations=1, seed=9)
        run_estimate(workspace["ckpt"], workspace["data"], p2, hypotheses=2, iterations=1, seed=9)
        assert p1.read_bytes() == p2.read_bytes()
        p3 = tmp_path / "p3.ptc"
        run_estimate(workspace["ckpt"], workspace["data"], p3, hypotheses=2, iterations=1, seed=10)
        assert p1.read_bytes() != p3.read_bytes()

    def test_h1_m1_fast_mode(self, workspace, tmp_path):
        out = tmp_path / "fast.ptc"
        run_estimate(workspace["ckpt"], workspace["data"], out, hypotheses=1, iterations=1, seed=0)
        tensors, _ = read_container(out)
        idx = tensors["pred/seq000/per_joint_hypothesis_index"]
        assert np.all(idx == 0)

    def test_thread_env_does_not_change_output(self, workspace, tmp_path, monkeypatch):
        p1 = tmp_path / "p1.ptc"
        run_estimate(workspace["ckpt"], workspace["data"], p1, hypotheses=2, iterations=1, seed=5)
        monkeypatch.setenv("POSEDIFF_THREADS", "2")
        p2 = tmp_path / "p2.ptc"
        run_estimate(workspace["ckpt"], workspace["data"], p2, hypotheses=2, iterations=1, seed=5)
        assert p1.read_bytes() == p2.read_bytes()

    def test_checkpoint_dataset_mismatch(self, workspace, tmp_path):
        data = tmp_path / "other.ptc"
        save_dataset(data, synth_generate(1, 12, 17, seed=0))
        with pytest.raises(ConfigError, match="checkpoint"):
            run_estimate(workspace["ckpt"], data, tmp_path / "p.ptc", hypotheses=1, iterations=1)

    def test_default_camera_recorded_in_outputs(self, workspace, tmp_path):
        from dataclasses import replace

        records = [
            replace(rec, camera=None) for rec in load_dataset(workspace["data"])[:1]
        ]
        data = tmp_path / "nocam.ptc"
        save_dataset(data, records)
        out = tmp_path / "p.ptc"
        run_estimate(workspace["ckpt"], data, out, hypotheses=1, iterations=1, seed=0)
        _, meta = read_container(out)
        note = meta["cameras"][records[0].seq_id]
        assert note["default_camera"] is True
        assert note["camera"]["fx"] == 1000.0


class TestEvalCommand:
    def test_perfect_predictions_score_perfectly(self, workspace, tmp_path):
        records = load_dataset(workspace["data"])
        tensors = {}
        for rec in records:
            tensors[f"pred/{rec.seq_id}/poses"] = rec.gt_3d
        pred = tmp_path / "perfect.ptc"
        write_container(pred, tensors, meta={"kind": "predictions"})
        report, per_joint, rows = run_eval(pred, workspace["data"], tmp_path / "eval")
        overall = next(r for r in rows if r[0] == "overall")[5]
        assert overall["mpjpe_mm"] == 0.0
        assert overall["pck150_percent"] == 100.0
        assert overall["auc_percent"] == 100.0

    def test_pairing_error_lists_orphans(self, workspace, tmp_path):
        pred = tmp_path / "orphan.ptc"
        write_container(
            pred,
            {"pred/ghost/poses": np.zeros((8, 17, 3))},
            meta={"kind": "predictions"},
        )
        with pytest.raises(ConfigError, match="ghost"):
            run_eval(pred, workspace["data"], tmp_path / "eval")

    def test_report_structure(self, workspace, tmp_path):
        report, per_joint, rows = run_eval(
            workspace["pred"], workspace["data"], tmp_path / "eval"
        )
        with open(report) as f:
            lines = list(csv.reader(f))
        assert lines[0] == list(
            ("scope", "id", "action", "frames", "joints", "mpjpe_mm",
             "p_mpjpe_mm", "pck150_percent", "auc_percent")
        )
        scopes = [l[0] for l in lines[1:]]
        assert scopes.count("sequence") == 4
        assert "overall" in scopes and "overall_by_action" in scopes
        seq_ids = [l[1] for l in lines[1:] if l[0] == "sequence"]
        assert seq_ids == sorted(seq_ids)

    def test_deterministic_report(self, workspace, tmp_path):
        r1, _, _ = run_eval(workspace["pred"], workspace["data"], tmp_path / "e1")
        r2, _, _ = run_eval(workspace["pred"], workspace["data"], tmp_path / "e2")
        assert open(r1).read() == open(r2).read()


class TestPlotCommand:
    def test_svg_wellformed_and_joint_count(self, workspace, tmp_path):
        svg_path, csv_path = run_plot(
            workspace["pred"], workspace["data"], "seq000", tmp_path / "plots"
        )
        tree = ET.parse(svg_path)
        ns = {"svg": "http://www.w3.org/2000/svg"}
        joints = tree.getroot().findall(".//svg:circle[@class='joint']", ns)
        # 8 frames x 17 joints x (pred + gt)
        assert len(joints) == 8 * 17 * 2

    def test_error_csv_matches_eval(self, workspace, tmp_path):
        _, plot_csv = run_plot(workspace["pred"], workspace["data"], "seq001", tmp_path / "plots")
        _, per_joint, _ = run_eval(workspace["pred"], workspace["data"], tmp_path / "eval")
        with open(plot_csv) as f:
            plot_rows = {
                (r["sequence_id"], r["joint"]): float(r["mpjpe_mm"])
                for r in csv.DictReader(f)
            }
        with open(per_joint) as f:
            eval_rows = {
                (r["sequence_id"], r["joint"]): float(r["mpjpe_mm"])
                for r in csv.DictReader(f)
                if r["sequence_id"] == "seq001"
            }
        assert plot_rows.keys() == eval_rows.keys()
        for key in plot_rows:
            assert abs(plot_rows[key] - eval_rows[key]) <= 1e-9

    def test_unknown_sequence(self, workspace, tmp_path):
        with pytest.raises(ConfigError, match="nope"):
            run_plot(workspace["pred"], workspace["data"], "nope", tmp_path / "plots")


class TestExitCodes:
    def test_success_is_zero(self, tmp_path):
        rc = main(["synth", "--out", str(tmp_path / "d.ptc"), "--sequences", "1",
                   "--frames", "4"])
        assert rc == 0

    def test_user_error_is_one(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "missing.ptc"),
                   "--out", str(tmp_path / "o"), "--preset", "tiny"])
        assert rc == 1

    def test_bad_flag_is_one(self):
        assert main(["synth", "--nonsense"]) == 1

    def test_missing_input_file_is_one(self, tmp_path):
        rc = main(["eval", "--predictions", str(tmp_path / "missing.ptc"),
                   "--data", str(tmp_path / "missing.ptc"),
                   "--out", str(tmp_path / "e")])
        assert rc == 1

    def test_internal_error_is_two(self, monkeypatch, tmp_path):
        from posediff import cli
        from posediff.exceptions import NumericsError

        def boom(*a, **k):
            raise NumericsError("invariant violated")

        monkeypatch.setattr(cli, "run_synth", boom)
        rc = main(["synth", "--out", str(tmp_path / "d.ptc")])
        assert rc == 2


class TestAblationPlumbing:
    @pytest.mark.parametrize(
        "flags",
        [
            {"use_fpp": False, "use_fpc": False, "use_pts": False},  # w/o Prompt
            {"use_fpc": False},  # w/o FPC
            {"use_pts": False},  # w/o PTS
        ],
    )
    def test_variant_trains_and_evaluates(self, flags, tmp_path):
        data = tmp_path / "d.ptc"
        save_dataset(data, synth_generate(2, 8, 17, seed=5))
        cfg = tiny_cfg(**flags)
        ckpt, _ = run_train(cfg, data, tmp_path / "run", max_steps=3, epochs=10**6)
        pred = run_estimate(ckpt, data, tmp_path / "p.ptc", hypotheses=1, iterations=1, seed=0)
        report, _, rows = run_eval(pred, data, tmp_path / "eval")
        assert os.path.exists(report)
        assert np.isfinite(next(r for r in rows if r[0] == "overall")[5]["mpjpe_mm"])


class TestPipelineDeterminism:
    def test_train_estimate_eval_byte_identical(self, tmp_path):
        data = tmp_path / "d.ptc"
        save_dataset(data, synth_generate(3, 8, 17, seed=6))

        def pipeline(tag):
            cfg = tiny_cfg()
            ckpt, _ = run_train(cfg, data, tmp_path / f"{tag}_run", max_steps=6, epochs=10**6)
            pred = run_estimate(ckpt, data, tmp_path / f"{tag}.ptc",
                                hypotheses=2, iterations=2, seed=3)
            report, per_joint, _ = run_eval(pred, data, tmp_path / f"{tag}_eval")
            return (tmp_path / f"{tag}.ptc").read_bytes(), open(report).read()

        pred_a, rep_a = pipeline("a")
        pred_b, rep_b = pipeline("b")
        assert pred_a == pred_b
        assert rep_a == rep_b
