"""Exit codes, clobber refusals, config handling, and command flows."""

import json
import os
import shutil

import numpy as np
import pytest

from flow2flow.cli import main
from flow2flow.data import load_dataset, split_by_modality, to_normalized
from flow2flow.training import METRICS_HEADER

_TRAIN_SETS = ["--set", "train.epochs=2", "--set", "train.blocks=3",
               "--set", "train.coupling_hidden=8", "--set", "train.encoder_dim=8",
               "--set", "train.height=8", "--set", "train.width=8",
               "--set", "train.checkpoint_every=2"]


def _synth(out, ids=4, per=3, extra=()):
    return main(["synth", "--out", str(out), "--ids", str(ids), "--per", str(per),
                 "--height", "8", "--width", "8", "--seed", "5", *extra])


def _train(data, out, extra=()):
    return main(["train", "--data", str(data), "--out", str(out),
                 "--seed", "5", *_TRAIN_SETS, *extra])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert _synth(data) == 0
    assert _train(data, run) == 0
    return {"root": root, "data": data, "run": run,
            "ckpt": str(run / "final.f2f")}


class TestParsing:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_unknown_command(self, capsys):
        assert main(["transmogrify"]) == 2
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out

    @pytest.mark.parametrize("item", ["noequals", "nodot=3", ".k=1", "s.=1"])
    def test_malformed_set_flag(self, tmp_path, item):
        assert main(["synth", "--out", str(tmp_path / "d"),
                     "--set", item]) == 2

    @pytest.mark.parametrize("value,code", [("0", 2), ("-3", 2), ("x", 2), ("2", 0)])
    def test_thread_cap_env(self, tmp_path, monkeypatch, value, code):
        monkeypatch.setenv("F2F_THREADS", value)
        assert _synth(tmp_path / "d") == code


class TestSynth:
    def test_file_counts(self, workspace):
        dataset = load_dataset(workspace["data"])
        assert len(dataset) == 4 * 3 * 2
        by_mod = split_by_modality(dataset)
        assert len(by_mod["visible"]) == len(by_mod["infrared"]) == 12

    def test_larger_draw_count(self, tmp_path):
        assert _synth(tmp_path / "d", ids=8, per=4) == 0
        pngs = [p for p, _, files in os.walk(tmp_path / "d") for p in files
                if p.endswith(".png")]
        assert len(pngs) == 64

    def test_invalid_spec_leaves_no_files(self, tmp_path):
        out = tmp_path / "d"
        assert _synth(out, ids=1) == 2
        assert not out.exists()

    def test_clobber_refusal_and_overwrite(self, tmp_path):
        out = tmp_path / "d"
        assert _synth(out) == 0
        before = (out / "manifest.json").read_bytes()
        assert _synth(out) == 2
        assert _synth(out, extra=("--overwrite",)) == 0
        assert (out / "manifest.json").read_bytes() == before

    def test_config_file_drives_synth(self, tmp_path):
        out = tmp_path / "d"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "synth": {"identities": 4, "images_per_id": 2,
                      "height": 8, "width": 8, "seed": 1},
            "paths": {"out": str(out)},
        }))
        assert main(["synth", "--config", str(cfg)]) == 0
        assert len(load_dataset(out)) == 16

    def test_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"synth": {"identities": 2, "height": 8,
                                             "width": 8, "images_per_id": 2}}))
        out = tmp_path / "d"
        assert main(["synth", "--config", str(cfg), "--out", str(out),
                     "--ids", "3"]) == 0
        dataset = load_dataset(out)
        assert len({s.identity for s in dataset}) == 3

    @pytest.mark.parametrize("doc", [
        {"synth": {"bogus": 1}},
        {"mystery": {}},
        {"synth": {"identities": 4}, "paths": {"elsewhere": "x"}},
        {"synth": 7},
        [1, 2],
    ])
    def test_bad_config_documents(self, tmp_path, doc):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(doc))
        out = tmp_path / "d"
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 2
        assert not out.exists()

    def test_malformed_json_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        assert main(["synth", "--config", str(cfg), "--out",
                     str(tmp_path / "d")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "d")]) == 3

    def test_missing_out(self, tmp_path):
        assert main(["synth", "--ids", "4"]) == 2


class TestTrain:
    def test_products(self, workspace):
        run = workspace["run"]
        lines = (run / "metrics.csv").read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) == 1 + 4 * 3  # epochs=2, 2 iters/epoch, rows g,g,d
        assert (run / "final.f2f").exists()
        assert (run / "checkpoint_000002.f2f").exists()

    def test_clobber_refusal(self, workspace):
        assert _train(workspace["data"], workspace["run"]) == 2

    def test_deterministic_rerun(self, workspace, tmp_path):
        assert _train(workspace["data"], tmp_path / "run2") == 0
        assert (tmp_path / "run2" / "metrics.csv").read_bytes() == \
            (workspace["run"] / "metrics.csv").read_bytes()

    def test_resume_matches_uninterrupted(self, workspace, tmp_path):
        run2 = tmp_path / "resumed"
        shutil.copytree(workspace["run"], run2)
        code = main(["train", "--data", str(workspace["data"]),
                     "--out", str(run2),
                     "--resume", str(run2 / "checkpoint_000002.f2f")])
        assert code == 0
        for name in ("metrics.csv", "final.f2f"):
            assert (run2 / name).read_bytes() == \
                (workspace["run"] / name).read_bytes()

    def test_resume_rejects_overrides(self, workspace, tmp_path):
        code = main(["train", "--data", str(workspace["data"]),
                     "--out", str(tmp_path / "r"), "--epochs", "9",
                     "--resume", str(workspace["run"] / "final.f2f")])
        assert code == 2

    def test_missing_dataset(self, tmp_path):
        assert _train(tmp_path / "absent", tmp_path / "run") == 3


class TestTse:
    def test_multiple_one_doubles_both_modalities(self, workspace, tmp_path):
        out = tmp_path / "tse"
        code = main(["tse", "--data", str(workspace["data"]),
                     "--ckpt", workspace["ckpt"], "--out", str(out),
                     "--multiple", "1.0"])
        assert code == 0
        expanded = load_dataset(out)
        assert len(expanded) == 48
        generated = [s for s in expanded if s.generated]
        assert len(generated) == 24
        by_mod = split_by_modality(generated)
        assert len(by_mod["visible"]) == len(by_mod["infrared"]) == 12

    def test_fractional_single_modality(self, workspace, tmp_path):
        out = tmp_path / "tse"
        code = main(["tse", "--data", str(workspace["data"]),
                     "--ckpt", workspace["ckpt"], "--out", str(out),
                     "--multiple", "0.5", "--modality", "infrared"])
        assert code == 0
        expanded = load_dataset(out)
        generated = [s for s in expanded if s.generated]
        assert len(expanded) == 24 + 6
        assert all(s.modality == "infrared" for s in generated)

    def test_invalid_ratio_rejected(self, workspace, tmp_path):
        code = main(["tse", "--data", str(workspace["data"]),
                     "--ckpt", workspace["ckpt"], "--out", str(tmp_path / "t"),
                     "--p", "3", "--q", "2"])
        assert code == 2

    def test_missing_checkpoint(self, workspace, tmp_path):
        code = main(["tse", "--data", str(workspace["data"]),
                     "--ckpt", str(tmp_path / "nope.f2f"),
                     "--out", str(tmp_path / "t")])
        assert code == 3

    def test_clobber_refusal(self, workspace, tmp_path):
        out = tmp_path / "tse"
        args = ["tse", "--data", str(workspace["data"]),
                "--ckpt", workspace["ckpt"], "--out", str(out)]
        assert main(args) == 0
        assert main(args) == 2
        assert main(args + ["--overwrite"]) == 0


class TestCmg:
    def test_every_input_gains_one_counterpart(self, workspace, tmp_path):
        out = tmp_path / "v2r"
        code = main(["cmg", "--data", str(workspace["data"]),
                     "--ckpt", workspace["ckpt"], "--out", str(out),
                     "--direction", "v2r"])
        assert code == 0
        translated = load_dataset(out)
        visible = split_by_modality(load_dataset(workspace["data"]))["visible"]
        assert len(translated) == len(visible) == 12
        assert all(s.modality == "infrared" and s.generated for s in translated)
        want = {(s.identity, os.path.splitext(os.path.basename(s.path))[0])
                for s in visible}
        got = {(s.identity,
                os.path.splitext(os.path.basename(s.path))[0][:-len("_v2r")])
               for s in translated}
        assert got == want
        for s in translated:
            assert (out / (s.path + ".npy")).exists()

    def test_round_trip_reconstructs_inputs(self, workspace, tmp_path):
        mid, back = tmp_path / "mid", tmp_path / "back"
        base = ["--ckpt", workspace["ckpt"]]
        assert main(["cmg", "--data", str(workspace["data"]), "--out",
                     str(mid), "--direction", "v2r", *base]) == 0
        assert main(["cmg", "--data", str(mid), "--out", str(back),
                     "--direction", "r2v", *base]) == 0
        originals = split_by_modality(load_dataset(workspace["data"]))["visible"]
        worst = 0.0
        for s in originals:
            stem = os.path.splitext(os.path.basename(s.path))[0]
            cycled = np.load(back / "visible" / str(s.identity) /
                             f"{stem}_v2r_r2v.png.npy")
            worst = max(worst, float(np.max(np.abs(cycled - to_normalized(s.image)))))
        assert worst < 1e-6

    def test_missing_checkpoint(self, workspace, tmp_path):
        code = main(["cmg", "--data", str(workspace["data"]),
                     "--ckpt", str(tmp_path / "nope.f2f"),
                     "--out", str(tmp_path / "o"), "--direction", "v2r"])
        assert code == 3

    def test_direction_required(self, workspace, tmp_path):
        code = main(["cmg", "--data", str(workspace["data"]),
                     "--ckpt", workspace["ckpt"], "--out", str(tmp_path / "o")])
        assert code == 2


class TestEval:
    def test_prints_metrics(self, workspace, capsys):
        code = main(["eval", "--data", str(workspace["data"]),
                     "--ckpt", workspace["ckpt"], "--seed", "0"])
        assert code == 0
        out = capsys.readouterr().out
        assert out.startswith("rank1=")
        assert " map=" in out and " skipped=0" in out


class TestSweep:
    def test_small_grid(self, workspace, tmp_path, capsys):
        csv = tmp_path / "sweep.csv"
        args = ["sweep", "--data", str(workspace["data"]),
                "--ckpt", workspace["ckpt"], "--out", str(csv),
                "--multiples", "0.0,0.5", "--modes", "both",
                "--proxy-steps", "4"]
        assert main(args) == 0
        lines = csv.read_text().splitlines()
        assert lines[0] == "mode,multiple,rank1,map"
        assert len(lines) == 3
        assert all(line.startswith("both,") for line in lines[1:])
        assert main(args) == 2  # refuses to clobber
        assert main(args + ["--overwrite"]) == 0
        capsys.readouterr()

    def test_unknown_mode(self, workspace, tmp_path):
        code = main(["sweep", "--data", str(workspace["data"]),
                     "--ckpt", workspace["ckpt"],
                     "--out", str(tmp_path / "s.csv"),
                     "--multiples", "0.5", "--modes", "sideways"])
        assert code == 2


class TestVerify:
    def test_fresh_model_passes(self, capsys):
        code = main(["verify", "--fresh", "--probes", "4",
                     "--set", "train.blocks=2", "--set", "train.height=8",
                     "--set", "train.width=8", "--set", "train.coupling_hidden=4",
                     "--set", "train.encoder_dim=8"])
        out = capsys.readouterr().out
        assert code == 0
        assert "round-trip max error" in out
        assert "logdet max deviation" in out
        assert "gradient check max relative error" in out
        assert "verify: PASS" in out

    def test_trained_checkpoint_passes(self, workspace, capsys):
        assert main(["verify", "--ckpt", workspace["ckpt"],
                     "--probes", "4"]) == 0
        assert "verify: PASS" in capsys.readouterr().out

    def test_corrupted_checkpoint_rejected(self, workspace, tmp_path):
        blob = bytearray((workspace["run"] / "final.f2f").read_bytes())
        blob[len(blob) // 2] ^= 0x40
        bad = tmp_path / "bad.f2f"
        bad.write_bytes(bytes(blob))
        assert main(["verify", "--ckpt", str(bad)]) == 3

    def test_fresh_and_ckpt_conflict(self, workspace, capsys):
        assert main(["verify", "--fresh", "--ckpt", workspace["ckpt"]]) == 2
        capsys.readouterr()


class TestReport:
    def test_metrics_figures(self, workspace, tmp_path, capsys):
        out = tmp_path / "figs"
        code = main(["report", "--metrics",
                     str(workspace["run"] / "metrics.csv"), "--out", str(out)])
        assert code == 0
        assert len(list(out.glob("*.png"))) == 4
        capsys.readouterr()

    def test_requires_an_input(self):
        assert main(["report"]) == 2

    def test_missing_csv(self, tmp_path):
        assert main(["report", "--metrics", str(tmp_path / "nope.csv")]) == 3
