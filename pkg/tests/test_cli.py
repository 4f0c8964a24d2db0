import hashlib
import json
import shutil
import subprocess
import textwrap

import numpy as np
import pytest

from waveflow.checkpoint import load_checkpoint
from waveflow.cli import main
from waveflow.data import load_image, read_manifest
from waveflow.flows import FlowModel
from waveflow.waveletflow import WaveletFlowModel

SYNTH_CFG = """
    [run]
    out = {out}
    [synth]
    image_size = 16
    train_in_dist = 30
    test_in_dist = 12
    test_ood = 12
    seed = 3
"""

TRAIN_CFG = """
    [run]
    out = {out}
    [train]
    dataset = {dataset}
    family = waveletflow
    K = 1
    hidden = 6
    [training]
    learning_rate = 1e-3
    batch_size = 16
    max_epochs = 1
    augment = false
    seed = 0
"""


def run_cli(*argv):
    return main(list(argv))


def write_cfg(path, template, **kw):
    path.write_text(textwrap.dedent(template.format(**kw)))
    return str(path)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> score, shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    cfg = write_cfg(root / "synth.ini", SYNTH_CFG, out=data)
    assert run_cli("synth", "--config", cfg) == 0

    run = root / "run"
    cfg = write_cfg(root / "train.ini", TRAIN_CFG, out=run, dataset=data)
    assert run_cli("train", "--config", cfg) == 0

    scores = root / "scores"
    cfg = write_cfg(
        root / "score.ini",
        "[run]\nout = {out}\n[score]\ndataset = {dataset}\ncheckpoint = {ckpt}\n",
        out=scores,
        dataset=data,
        ckpt=run / "checkpoint.json",
    )
    assert run_cli("score", "--config", cfg) == 0
    return {"root": root, "data": data, "run": run, "scores": scores}


class TestSynth:
    def test_writes_dataset_and_resolved_config(self, tmp_path):
        out = tmp_path / "d"
        cfg = write_cfg(tmp_path / "s.ini", SYNTH_CFG, out=out)
        assert run_cli("synth", "--config", cfg) == 0
        manifest = read_manifest(out / "manifest.csv")
        assert len(manifest.select(split="train")) == 30
        assert len(manifest.select(split="test")) == 24
        assert (out / "config.resolved.ini").exists()
        img = load_image(manifest.image_path(manifest.records[0]))
        assert img.shape == (1, 16, 16)

    def test_seed_override_changes_data(self, tmp_path):
        cfg_a = write_cfg(tmp_path / "a.ini", SYNTH_CFG, out=tmp_path / "a")
        cfg_b = write_cfg(tmp_path / "b.ini", SYNTH_CFG, out=tmp_path / "b")
        assert run_cli("synth", "--config", cfg_a) == 0
        assert run_cli("synth", "--config", cfg_b, "--seed", "9") == 0
        first = sorted((tmp_path / "a" / "images").iterdir())[0]
        second = tmp_path / "b" / "images" / first.name
        assert digest(first) != digest(second)

    def test_byte_identical_across_runs_and_threads(self, tmp_path):
        cfg_a = write_cfg(tmp_path / "a.ini", SYNTH_CFG, out=tmp_path / "a")
        cfg_b = write_cfg(tmp_path / "b.ini", SYNTH_CFG, out=tmp_path / "b")
        assert run_cli("synth", "--config", cfg_a) == 0
        assert run_cli("synth", "--config", cfg_b, "--threads", "3") == 0
        for name in ["manifest.csv"] + sorted(
            p.name for p in (tmp_path / "a" / "images").iterdir()
        ):
            rel = name if name == "manifest.csv" else f"images/{name}"
            assert digest(tmp_path / "a" / rel) == digest(tmp_path / "b" / rel)


class TestTrain:
    def test_outputs(self, pipeline):
        run = pipeline["run"]
        assert (run / "checkpoint.json").exists()
        assert (run / "config.resolved.ini").exists()
        model = load_checkpoint(run / "checkpoint.json")
        assert isinstance(model, WaveletFlowModel)
        history = (run / "history.csv").read_text().splitlines()
        assert history[0] == "component,epoch,nll,bpd,seconds"
        components = {line.split(",")[0] for line in history[1:]}
        assert components == {"base", "level1", "level2", "level3", "level4"}
        summary = json.loads((run / "training.json").read_text())
        assert set(summary) == components
        assert not any(entry["aborted"] for entry in summary.values())

    def test_glow_family(self, pipeline, tmp_path):
        out = tmp_path / "glow_run"
        cfg = write_cfg(
            tmp_path / "g.ini",
            """
            [run]
            out = {out}
            [train]
            dataset = {dataset}
            family = glow
            K = 1
            L = 2
            hidden = 4
            [training]
            batch_size = 16
            max_epochs = 1
            augment = false
            """,
            out=out,
            dataset=pipeline["data"],
        )
        assert run_cli("train", "--config", cfg) == 0
        assert isinstance(load_checkpoint(out / "checkpoint.json"), FlowModel)

    def test_ood_in_train_manifest_fails(self, tmp_path):
        data = tmp_path / "bad"
        (data / "images").mkdir(parents=True)
        (data / "manifest.csv").write_text(
            "path,label,split\nimages/x.pgm,ood,train\n"
        )
        cfg = write_cfg(tmp_path / "t.ini", TRAIN_CFG, out=tmp_path / "o", dataset=data)
        assert run_cli("train", "--config", cfg) == 1


class TestScore:
    def test_scores_csv_shape(self, pipeline):
        lines = (pipeline["scores"] / "scores.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header[:3] == ["path", "label", "score"]
        assert header[3:] == [f"level_{i}" for i in range(5)]  # base + levels 1..4
        assert len(lines) == 1 + 24
        labels = {line.split(",")[1] for line in lines[1:]}
        assert labels == {"in_dist", "ood"}

    def test_scoring_is_reproducible(self, pipeline, tmp_path):
        again = tmp_path / "again"
        cfg = write_cfg(
            tmp_path / "s.ini",
            "[run]\nout = {out}\n[score]\ndataset = {dataset}\ncheckpoint = {ckpt}\n",
            out=again,
            dataset=pipeline["data"],
            ckpt=pipeline["run"] / "checkpoint.json",
        )
        assert run_cli("score", "--config", cfg, "--threads", "3") == 0
        assert digest(again / "scores.csv") == digest(pipeline["scores"] / "scores.csv")

    def test_checkpoint_data_mismatch(self, pipeline, tmp_path):
        other = tmp_path / "tiny"
        cfg = write_cfg(
            tmp_path / "mini.ini",
            "[run]\nout = {out}\n[synth]\nimage_size = 8\ntrain_in_dist = 2\n"
            "test_in_dist = 2\ntest_ood = 2\n",
            out=other,
        )
        assert run_cli("synth", "--config", cfg) == 0
        cfg = write_cfg(
            tmp_path / "s.ini",
            "[run]\nout = {out}\n[score]\ndataset = {dataset}\ncheckpoint = {ckpt}\n",
            out=tmp_path / "o",
            dataset=other,
            ckpt=pipeline["run"] / "checkpoint.json",
        )
        assert run_cli("score", "--config", cfg) == 1


class TestEval:
    def test_metrics_from_scores(self, pipeline, tmp_path, capsys):
        out = tmp_path / "metrics"
        cfg = write_cfg(
            tmp_path / "e.ini",
            "[run]\nout = {out}\n[eval]\nscores = {scores}\n",
            out=out,
            scores=pipeline["scores"] / "scores.csv",
        )
        assert run_cli("eval", "--config", cfg) == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= payload["auc"] <= 1.0
        assert payload["n_in_dist"] == 12 and payload["n_ood"] == 12
        assert payload["roc"][0] == [0.0, 0.0]
        assert set(payload["per_level_auc"]) == {f"level_{i}" for i in range(5)}

    def test_eval_reproducible(self, pipeline, tmp_path):
        outs = []
        for name in ("m1", "m2"):
            out = tmp_path / name
            cfg = write_cfg(
                tmp_path / f"{name}.ini",
                "[run]\nout = {out}\n[eval]\nscores = {scores}\n",
                out=out,
                scores=pipeline["scores"] / "scores.csv",
            )
            assert run_cli("eval", "--config", cfg) == 0
            outs.append(digest(out / "metrics.json"))
        assert outs[0] == outs[1]

    def test_empty_scores_diagnostic(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("path,label,score\n")
        cfg = write_cfg(
            tmp_path / "e.ini",
            "[run]\nout = {out}\n[eval]\nscores = {scores}\n",
            out=tmp_path / "o",
            scores=empty,
        )
        assert run_cli("eval", "--config", cfg) == 1
        err = capsys.readouterr().err
        assert "no scores" in err and err.count("\n") == 1

    def test_missing_scores_file(self, tmp_path, capsys):
        cfg = write_cfg(
            tmp_path / "e.ini",
            "[run]\nout = {out}\n[eval]\nscores = {scores}\n",
            out=tmp_path / "o",
            scores=tmp_path / "absent.csv",
        )
        assert run_cli("eval", "--config", cfg) == 1
        assert "error:" in capsys.readouterr().err


class TestBaseline:
    def test_scores_and_metrics(self, pipeline, tmp_path):
        out = tmp_path / "baseline"
        cfg = write_cfg(
            tmp_path / "b.ini",
            "[run]\nout = {out}\n[baseline]\ndataset = {dataset}\n",
            out=out,
            dataset=pipeline["data"],
        )
        assert run_cli("baseline", "--config", cfg) == 0
        lines = (out / "scores.csv").read_text().splitlines()
        assert lines[0].split(",")[3:] == [f"level_{i}" for i in range(1, 5)]
        payload = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= payload["auc"] <= 1.0
        assert set(payload["per_level_auc"]) == {f"level_{i}" for i in range(1, 5)}


class TestSample:
    def test_samples_are_valid_and_deterministic(self, pipeline, tmp_path):
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            cfg = write_cfg(
                tmp_path / f"{name}.ini",
                "[run]\nout = {out}\n[sample]\ncheckpoint = {ckpt}\ncount = 2\ntemperature = 0.7\n",
                out=out,
                ckpt=pipeline["run"] / "checkpoint.json",
            )
            assert run_cli("sample", "--config", cfg) == 0
            images = sorted(out.glob("sample_*.pgm"))
            assert len(images) == 2
            assert load_image(images[0]).shape == (1, 16, 16)
            outs.append([digest(p) for p in images])
        assert outs[0] == outs[1]


class TestErrors:
    def test_config_error_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[run]\nout = o\n[synth]\nnot_a_knob = 1\n")
        assert run_cli("synth", "--config", str(cfg)) == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_dataset_exits_1(self, tmp_path, capsys):
        cfg = write_cfg(
            tmp_path / "t.ini", TRAIN_CFG, out=tmp_path / "o", dataset=tmp_path / "nope"
        )
        assert run_cli("train", "--config", cfg) == 1
        assert "error:" in capsys.readouterr().err

    def test_console_script_runs(self, tmp_path):
        exe = shutil.which("waveflow")
        if exe is None:
            pytest.skip("console script not on PATH")
        cfg = write_cfg(
            tmp_path / "s.ini",
            "[run]\nout = {out}\n[synth]\nimage_size = 8\ntrain_in_dist = 2\n"
            "test_in_dist = 1\ntest_ood = 1\n",
            out=tmp_path / "d",
        )
        proc = subprocess.run([exe, "synth", "--config", cfg], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "d" / "manifest.csv").exists()
