import json

import numpy as np
import pytest

from enftamper.cli import STUDY_SECONDS_PER_POINT, main
from enftamper.signal_io import AudioClip, save_wav

CORPUS = ["--edited", "10", "--original", "10", "--duration-min", "9", "--duration-max", "10",
          "--seed", "4"]
TINY = ["--conv-channels", "2,3,4", "--cnn-fc", "12,8", "--lstm-units", "4", "--rnn-fc", "12,8",
        "--mlp", "8,4", "--epochs", "2", "--batch-size", "8"]


def run(run_dir, *args):
    return main([args[0], "--run-dir", str(run_dir), *args[1:]])


def tree_bytes(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert run(root, "synth", *CORPUS) == 0
    assert run(root, "extract", "--pn", "15") == 0
    assert run(root, "train", *TINY) == 0
    return root


def test_synth_creates_corpus(pipeline):
    man = json.loads((pipeline / "corpus" / "manifest.json").read_text())
    assert len(man["clips"]) == 20
    assert len(list((pipeline / "corpus").glob("*.wav"))) == 20
    assert (pipeline / "corpus" / "synth_config.ini").is_file()


def test_extract_outputs(pipeline):
    fm = json.loads((pipeline / "features" / "manifest.json").read_text())
    assert fm["p_n"] == 15 and fm["n"] ** 2 >= fm["max_len"]
    assert len(fm["clips"]) == 20
    assert len(list((pipeline / "features" / "phase").glob("*.csv"))) == 20


def test_extract_is_idempotent(pipeline):
    before = tree_bytes(pipeline / "features")
    assert run(pipeline, "extract", "--pn", "15") == 0
    assert tree_bytes(pipeline / "features") == before


def test_train_is_deterministic(pipeline, tmp_path):
    assert run(pipeline, "train", "--model-dir", str(tmp_path / "again"), *TINY) == 0
    for name in ("model.enfw", "model.enfw.json", "history.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "model" / name).read_bytes()
    assert len((pipeline / "model" / "history.csv").read_text().splitlines()) == 3


def test_eval_trained_model(pipeline):
    assert run(pipeline, "eval") == 0
    m = json.loads((pipeline / "model" / "metrics.json").read_text())
    assert m["split"] == "test" and m["tp"] + m["fp"] + m["tn"] + m["fn"] == m["count"]


def test_eval_variant_trains_from_scratch(pipeline, tmp_path):
    code = run(pipeline, "eval", "--variant", "cnn", "--model-dir", str(tmp_path), *TINY)
    assert code == 0
    m = json.loads((tmp_path / "metrics_cnn_only.json").read_text())
    assert m["variant"] == "cnn_only" and 0.0 <= m["accuracy"] <= 1.0
    assert (tmp_path / "history_cnn_only.csv").is_file()


def test_detect(pipeline, tmp_path):
    wav = next(iter(sorted((pipeline / "corpus").glob("*.wav"))))
    assert run(pipeline, "detect", str(wav), "--out-dir", str(tmp_path)) == 0
    out = json.loads((tmp_path / f"{wav.stem}.json").read_text())
    assert out["verdict"] in ("original", "edited")
    assert abs(out["p_original"] + out["p_edited"] - 1) < 1e-9


def test_detect_one_second_clip_is_data_error(pipeline, tmp_path):
    t = np.arange(8000) / 8000
    save_wav(AudioClip(0.5 * np.sin(2 * np.pi * 60 * t), 8000), tmp_path / "short.wav")
    assert run(pipeline, "detect", str(tmp_path / "short.wav"), "--out-dir", str(tmp_path)) == 3


def test_study_rows(pipeline, tmp_path):
    assert run(pipeline, "study", "--out-dir", str(tmp_path), *TINY, "--epochs", "1") == 0
    lines = (tmp_path / "study.csv").read_text().splitlines()
    assert lines[0] == "frame_length_s,p_n,f_n,accuracy"
    rows = [line.split(",") for line in lines[1:]]
    assert [int(r[1]) for r in rows] == [15, 25, 35, 45, 55, 65, 75, 85, 95]
    for r in rows:
        assert float(r[0]) == pytest.approx(int(r[1]) * STUDY_SECONDS_PER_POINT)
        assert 0.0 <= float(r[3]) <= 1.0


# ---------------------------------------------------------------- failures

def test_invalid_snr_is_usage_error(tmp_path):
    assert run(tmp_path, "synth", *CORPUS, "--snr-max", "80") == 2
    assert not (tmp_path / "corpus" / "manifest.json").exists()


def test_missing_features_is_usage_error(tmp_path):
    assert run(tmp_path, "train") == 2


def test_unknown_config_key(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[enftamper]\nwarp_factor = 9\n")
    assert run(tmp_path, "synth", "--config", str(ini)) == 2


def test_config_file_then_flags(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[enftamper]\nn_edited = 10\nn_original = 10\nduration_min = 9\n"
                   "duration_max = 9.5\nseed = 1\n")
    assert run(tmp_path, "synth", "--config", str(ini), "--original", "11") == 0
    man = json.loads((tmp_path / "corpus" / "manifest.json").read_text())
    assert len(man["clips"]) == 21
    assert "n_original = 11" in (tmp_path / "corpus" / "synth_config.ini").read_text()


def test_run_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ENFF_RUN_DIR", str(tmp_path / "env"))
    assert main(["train"]) == 2
    assert main(["synth", *CORPUS]) == 0
    assert (tmp_path / "env" / "corpus" / "manifest.json").is_file()
