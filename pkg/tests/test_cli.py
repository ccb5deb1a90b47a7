import json
import re

import numpy as np
import pytest

from coughscope import cli, synthetic
from coughscope.audio_io import write_wav
from coughscope.dsp import AudioBuffer
from coughscope.records import COUGH_PROMPT, parse_record


def model_args(bundle):
    m = bundle["models"]
    return ["--detector", str(m / "detector"), "--fewshot", str(m / "fewshot"), "--bank", str(bundle["bank"])]


@pytest.fixture
def silence(tmp_path):
    path = tmp_path / "silence.wav"
    write_wav(path, AudioBuffer(np.zeros(16000 * 2), 16000))
    return path


@pytest.fixture
def burst_wav(tmp_path):
    buf, bursts = synthetic.session_recording(3.0, [1.2], np.random.default_rng(8))
    path = tmp_path / "burst.wav"
    write_wav(path, buf)
    return path, [(a / 16000, b / 16000) for a, b in bursts]


# -- features --------------------------------------------------------------------------------------

def test_features_rows_and_repeatability(tmp_path, rng):
    wav = tmp_path / "two.wav"
    write_wav(wav, AudioBuffer(rng.uniform(-0.5, 0.5, 32000), 16000))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["features", str(wav), str(a)]) == 0
    assert cli.main(["features", str(wav), str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = [ln for ln in a.read_text().splitlines() if ln and not ln.startswith("#")]
    assert len(rows) - 1 == 61  # one header line


def test_corrupt_wav_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFF\x00\x00garbage")
    assert cli.main(["features", str(bad), str(tmp_path / "o.csv")]) == 2
    assert "bad.wav" in capsys.readouterr().err


def test_unknown_subcommand_and_help():
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["--help"]) == 0


# -- detect ------------------------------------------------------------------------------------------

def test_detect_silence(trained_bundle, silence, tmp_path):
    out = tmp_path / "ev.json"
    argv = ["detect", str(silence), "--detector", str(trained_bundle["models"] / "detector"), "--out", str(out)]
    assert cli.main(argv) == 0
    assert json.loads(out.read_text())["events"] == []


def test_detect_burst_overlaps_and_ms_precision(trained_bundle, burst_wav, tmp_path, capsys):
    burst_wav, planted = burst_wav
    out = tmp_path / "ev.json"
    argv = ["detect", str(burst_wav), "--detector", str(trained_bundle["models"] / "detector"), "--out", str(out)]
    assert cli.main(argv) == 0
    printed = capsys.readouterr().out
    assert re.search(r"^\d+\.\d{3}\t\d+\.\d{3}\t", printed, re.M)
    events = json.loads(out.read_text())["events"]
    (lo, hi), = planted
    assert any(e["start_s"] < hi and e["end_s"] > lo for e in events)


def test_detect_stream_with_timing(trained_bundle, burst_wav, capsys):
    burst_wav, _ = burst_wav
    argv = ["detect", str(burst_wav), "--detector", str(trained_bundle["models"] / "detector"),
            "--stream", "--timing"]
    assert cli.main(argv) == 0
    assert "per-frame latency" in capsys.readouterr().err


def test_detect_missing_model(silence, tmp_path):
    assert cli.main(["detect", str(silence), "--detector", str(tmp_path / "nope")]) == 2


def test_env_var_sets_model_dir(trained_bundle, silence, monkeypatch):
    monkeypatch.setenv(cli.MODEL_DIR_ENV, str(trained_bundle["models"]))
    assert cli.main(["detect", str(silence)]) == 0


# -- session -----------------------------------------------------------------------------------------

def test_session_silence_fever(trained_bundle, silence, tmp_path, capsys):
    store = tmp_path / "store"
    argv = ["session", str(silence), "--temperature", "38.0", "--out-dir", str(store)] + model_args(trained_bundle)
    assert cli.main(argv) == 0
    out = capsys.readouterr().out
    assert f"PROMPT: {COUGH_PROMPT}" in out and "AbnormalTemperature" in out
    files = [p for p in store.glob("*.json")]
    assert len(files) == 1
    rec = parse_record(files[0].read_text())
    assert {a.kind.value for a in rec.alerts} == {"AbnormalTemperature", "NoCoughCaptured"}
    assert rec.prompts_issued == (COUGH_PROMPT,)


def test_session_burst_one_file_per_run(trained_bundle, burst_wav, tmp_path):
    burst_wav, _ = burst_wav
    store = tmp_path / "store"
    for n, stamp in enumerate(["2024-01-01T09:00:00Z", "2024-01-01T09:05:00Z"], start=1):
        argv = ["session", str(burst_wav), "--temperature", "36.5", "--out-dir", str(store),
                "--timestamp", stamp] + model_args(trained_bundle)
        assert cli.main(argv) == 0
        assert len(list(store.glob("*.json"))) == n
    rec = parse_record(sorted(store.glob("*.json"))[0].read_text())
    assert rec.events and 0.0 <= rec.risk_score <= 1.0
    for e in rec.events:
        assert sum(s.probability for s in e.scores) == pytest.approx(1.0, abs=1e-6)


def test_session_duplicate_id_exit_2(trained_bundle, silence, tmp_path):
    argv = ["session", str(silence), "--out-dir", str(tmp_path / "s"), "--session-id", "fixed"]
    argv += model_args(trained_bundle)
    assert cli.main(argv) == 0
    assert cli.main(argv) == 2


def test_records_query(trained_bundle, silence, tmp_path, capsys):
    store = tmp_path / "store"
    for sid, temp in (("warm", "38.4"), ("cool", "36.6")):
        argv = ["session", str(silence), "--temperature", temp, "--out-dir", str(store), "--session-id", sid]
        assert cli.main(argv + model_args(trained_bundle)) == 0
    capsys.readouterr()
    assert cli.main(["records", "query", "--store", str(store), "--min-temperature", "37.3"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["session_id"] for r in rows] == ["warm"]
    assert cli.main(["records", "query", "--store", str(tmp_path / "missing")]) == 2


# -- training and evaluation -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    return synthetic.write_detection_corpus(tmp_path_factory.mktemp("tiny"), 30, seed=9)


def test_eval_is_deterministic(tiny_corpus, tmp_path, capsys):
    tables = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.csv"
        argv = ["eval", str(tiny_corpus), "--task", "detector", "--folds", "2", "--epochs", "1",
                "--channels", "4,4,8,8", "--seed", "7", "--out", str(out)]
        assert cli.main(argv) == 0
        tables.append(out.read_text())
    assert tables[0] == tables[1]
    assert tables[0].splitlines()[0] == "name,tpr,fpr,accuracy"


def test_sixty_epochs_log_three_rates(tmp_path, capsys):
    manifest = synthetic.write_detection_corpus(tmp_path / "c", 6, seed=2)
    argv = ["train-detector", str(manifest), "--epochs", "60", "--channels", "2,2,2,2", "--batch-size", "64",
            "--out", str(tmp_path / "det")]
    assert cli.main(argv) == 0
    rates = re.findall(r"lr=([0-9.e-]+)", capsys.readouterr().err)
    assert [float(r) for r in rates] == pytest.approx([0.01, 0.001, 0.0001])


def test_manifest_error_names_line(tmp_path, capsys):
    manifest = synthetic.write_detection_corpus(tmp_path / "c", 3, seed=2)
    lines = manifest.read_text().splitlines()
    lines[2] = "missing.wav,missing.labels"
    manifest.write_text("\n".join(lines) + "\n")
    assert cli.main(["train-detector", str(manifest), "--epochs", "1", "--out", str(tmp_path / "d")]) == 2
    assert re.search(r"corpus\.csv:3:", capsys.readouterr().err)


def test_config_file_layering(tmp_path, tiny_corpus, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 11, "eval": {"folds": 3}}))
    ns = cli.parse(["eval", str(tiny_corpus), "--task", "detector", "--config", str(cfg)])
    assert (ns.seed, ns.folds) == (11, 3)
    ns = cli.parse(["eval", str(tiny_corpus), "--task", "detector", "--config", str(cfg), "--folds", "4"])
    assert ns.folds == 4
    cfg.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["eval", str(tiny_corpus), "--task", "detector", "--config", str(cfg)]) == 2
