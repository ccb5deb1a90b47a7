"""Acceptance gate: one test per headline criterion, each printing a PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest
from conftest import record_criterion
from oracles import grad_check, gradient_cases, mfcc_oracle, naive_dft_magnitude, similarity_oracle
from strategies import random_record

from coughscope import cli, dsp, synthetic
from coughscope.evaluation import make_folds, run_cv
from coughscope.experiments import run_detector_experiment, run_fewshot_experiment
from coughscope.fewshot import EpisodeError, attentional_similarity, sample_episode
from coughscope.nn.optim import OptimizerState
from coughscope.records import (COUGH_PROMPT, SCHEMA_VERSION, AlertKind, EncounterRecord, EventEntry, ScoreEntry,
                                apply_rules, emit_record, parse_record, risk_score)
from coughscope.svm import kkt_violations, smo_train


def test_dsp_oracle_suite():
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    fft_err = 0.0
    for i in range(200):
        n = (8, 64, 1024)[i % 3]
        x = rng.standard_normal(n)
        ref = naive_dft_magnitude(x)
        fft_err = max(fft_err, float(np.max(np.abs(dsp.fft_magnitude(x) - ref) / np.maximum(ref, 1e-12))))
    mfcc_err = 0.0
    for _ in range(20):
        x = rng.standard_normal(1024) * rng.uniform(0.01, 1.0)
        mfcc_err = max(mfcc_err, float(np.max(np.abs(dsp.mfcc(x) - mfcc_oracle(x)))))
    n = 1024
    sine = np.sin(2 * np.pi * np.arange(n) / n)
    identities = [
        dsp.zero_crossing_rate(np.tile([1.0, -1.0], 8)) == 1.0,
        dsp.zero_crossing_rate(np.ones(10)) == 0.0,
        math.isclose(dsp.crest_factor(sine), math.sqrt(2), rel_tol=1e-6),
        math.isclose(dsp.crest_factor(np.full(7, -0.3)), 1.0, rel_tol=1e-12),
        math.isclose(dsp.energy(np.array([3.0, 4.0])), math.sqrt(12.5), rel_tol=1e-12),
        dsp.energy(np.zeros(5)) == 0.0,
    ]
    elapsed = time.perf_counter() - t0
    ok = fft_err < 1e-6 and mfcc_err < 1e-8 and all(identities) and elapsed < 10
    record_criterion("dsp oracles", ok, f"fft rel err {fft_err:.1e}, mfcc abs err {mfcc_err:.1e}, "
                     f"identities {sum(identities)}/{len(identities)}, {elapsed:.1f}s")
    assert ok


def test_gradient_checks():
    t0 = time.perf_counter()
    errors = {name: grad_check(fn, inputs) for name, (fn, inputs) in gradient_cases(np.random.default_rng(5)).items()}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 30
    record_criterion("autodiff gradients", ok, f"{len(errors)} cases, worst {worst} {errors[worst]:.1e}, {elapsed:.1f}s")
    assert ok


def test_smo_correctness():
    rng = np.random.default_rng(42)
    t0 = time.perf_counter()
    y = np.where(np.arange(200) < 100, 1.0, -1.0)
    x = rng.standard_normal((200, 2)) + 3.0 * y[:, None] * np.array([1.0, 0.0])
    model = smo_train(x, y, C=1.0, gamma=0.5)
    acc = float(np.mean(model.predict(x) == y))
    violations = int(kkt_violations(model, x, y, tol=1e-3).sum())
    xor_x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    xor_y = np.array([1.0, 1.0, -1.0, -1.0])
    xor = smo_train(xor_x, xor_y, C=10.0, gamma=1.0)
    violations += int(kkt_violations(xor, xor_x, xor_y, tol=1e-3).sum())
    for seed in range(10):
        r = np.random.default_rng(seed)
        yy = np.where(np.arange(40) < 20, 1.0, -1.0)
        xx = r.standard_normal((40, 2)) + 3.0 * yy[:, None] * np.array([1.0, 0.0])
        violations += int(kkt_violations(smo_train(xx, yy), xx, yy, tol=1e-3).sum())
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.99 and violations == 0 and bool(np.all(xor.predict(xor_x) == xor_y)) and elapsed < 10
    record_criterion("smo", ok, f"blob accuracy {acc:.3f}, KKT violations {violations}, {elapsed:.1f}s")
    assert ok


def test_attentional_similarity_cases():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst_oracle = worst_sym = worst_lin = worst_hot = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 12))
        ti, tj = rng.integers(1, 10, size=2)
        xi, xj = rng.standard_normal((d, ti)), rng.standard_normal((d, tj))
        ai, aj = rng.dirichlet(np.ones(ti)), rng.dirichlet(np.ones(tj))
        s = attentional_similarity(xi, ai, xj, aj)
        worst_oracle = max(worst_oracle, abs(s - similarity_oracle(xi, ai, xj, aj)))
        worst_sym = max(worst_sym, abs(s - attentional_similarity(xj, aj, xi, ai)))
        c = rng.uniform(-3, 3)
        worst_lin = max(worst_lin, abs(attentional_similarity(c * xi, ai, xj, aj) - c * s))
        p, q = int(rng.integers(ti)), int(rng.integers(tj))
        hot = attentional_similarity(xi, np.eye(ti)[p], xj, np.eye(tj)[q])
        worst_hot = max(worst_hot, abs(hot - float(xi[:, p] @ xj[:, q])))
    elapsed = time.perf_counter() - t0
    ok = worst_oracle <= 1e-10 and worst_sym <= 1e-12 and worst_lin <= 1e-10 and worst_hot <= 1e-12 and elapsed < 5
    record_criterion("attentional similarity", ok, f"oracle {worst_oracle:.1e}, symmetry {worst_sym:.1e}, "
                     f"scaling {worst_lin:.1e}, one-hot {worst_hot:.1e}, {elapsed:.2f}s")
    assert ok


def test_episode_sampler_fuzz():
    rng = np.random.default_rng(2024)
    data = {f"class{i}": list(range(int(n))) for i, n in enumerate(rng.integers(7, 15, size=8))}
    names = sorted(data)
    t0 = time.perf_counter()
    n_episodes, c, k = 10_000, 5, 3
    counts = dict.fromkeys(names, 0)
    bad = 0
    for _ in range(n_episodes):
        ep = sample_episode(data, c, k, rng)
        try:
            ep.check()
        except EpisodeError:
            bad += 1
        if len(set(ep.classes)) != c or ep.query[1] >= len(data[ep.classes[ep.label]]):
            bad += 1
        counts[ep.classes[ep.label]] += 1
    elapsed = time.perf_counter() - t0
    p = 1 / len(names)
    sigma = math.sqrt(n_episodes * p * (1 - p))
    worst = max(abs(v - n_episodes * p) / sigma for v in counts.values())
    ok = bad == 0 and worst <= 3.0 and elapsed < 10
    record_criterion("episode sampler", ok, f"{n_episodes} episodes, {bad} invalid, "
                     f"max query-class deviation {worst:.2f} sigma, {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_detector_desk_experiment():
    t0 = time.perf_counter()
    result = run_detector_experiment()
    elapsed = time.perf_counter() - t0
    ok = result["accuracy"] >= 0.95 and result["tpr"] >= 0.95 and result["fpr"] <= 0.05 and elapsed < 300
    record_criterion("detector experiment", ok, f"accuracy {result['accuracy']:.3f}, TPR {result['tpr']:.3f}, "
                     f"FPR {result['fpr']:.4f} on {result['n_test']} held-out frames, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_fewshot_desk_experiment():
    t0 = time.perf_counter()
    result = run_fewshot_experiment()
    elapsed = time.perf_counter() - t0
    ok = result["top1"] >= 0.80 and elapsed < 600
    record_criterion("few-shot experiment", ok, f"5-way 5-shot top-1 {result['top1']:.3f} over 500 episodes, "
                     f"{elapsed:.0f}s")
    assert ok


def test_lr_schedule(caplog):
    import logging

    state = OptimizerState()
    with caplog.at_level(logging.INFO, logger="coughscope.nn.optim"):
        effective = [state.effective_lr for _ in state.epochs()]
    mismatched = [e for e, lr in enumerate(effective) if not math.isclose(lr, 0.01 * 0.1 ** (e // 20), rel_tol=1e-12)]
    logged = [float(r.getMessage().split("lr=")[1].split()[0]) for r in caplog.records if "lr=" in r.getMessage()]
    ok = len(effective) == 60 and not mismatched and logged == pytest.approx([0.01, 0.001, 0.0001])
    record_criterion("lr schedule", ok, f"{len(effective)} epochs, {len(mismatched)} mismatches, logged {logged}")
    assert ok


def test_cv_harness():
    rng = np.random.default_rng(9)
    problems = []
    for n, k in ((10, 10), (23, 10), (101, 7), (60, 10)):
        labels = list(rng.integers(0, 3, n))
        plan = make_folds(range(n), k, seed=int(rng.integers(1000)), labels=labels)
        tests = [set(plan.test_ids(f)) for f in range(k)]
        if set().union(*tests) != set(range(n)) or sum(map(len, tests)) != n:
            problems.append(f"{n}/{k} not a partition")
        if max(plan.sizes()) - min(plan.sizes()) > 1:
            problems.append(f"{n}/{k} unbalanced")
    ids = list(range(120))
    labels = list(rng.integers(0, 3, 120))
    noisy = {i: (lab if rng.random() < 0.75 else int(rng.integers(0, 3))) for i, lab in zip(ids, labels)}
    result = run_cv(ids, labels, lambda tr: noisy, lambda m, te: [m[i] for i in te], [0, 1, 2], seed=1)
    worst = 0.0
    for cls in (0, 1, 2):
        for name in ("sensitivity", "specificity", "ppv", "npv", "top1"):
            vals = [getattr(f[cls], name) for f in result.folds if getattr(f[cls], name) is not None]
            worst = max(worst, abs(result.metric(cls, name) - sum(vals) / len(vals)))
    ok = not problems and worst <= 1e-12 and len(result.folds) == 10
    record_criterion("cv harness", ok, f"partition issues {problems or 'none'}, mean identity err {worst:.1e}")
    assert ok


def _event(p_covid):
    rest = (1 - p_covid) / 2
    return EventEntry(0.5, 0.8, 3, 5, 1.0, "covid19", (ScoreEntry("covid19", 0.0, p_covid),
                                                      ScoreEntry("pertussis", 0.0, rest), ScoreEntry("healthy", 0.0, rest)))


def test_rules_engine_and_round_trip():
    def run(temp, events):
        r = EncounterRecord("s", "2024-01-01T00:00:00Z", temp, events=tuple(events), risk_score=risk_score(events))
        return apply_rules(r)

    fever = run(38.0, [])
    high = run(36.5, [_event(0.9)])
    quiet = run(36.5, [_event(0.1)])
    scenarios = [
        fever.alert_kinds() == {AlertKind.ABNORMAL_TEMPERATURE, AlertKind.NO_COUGH_CAPTURED}
        and fever.prompts_issued == (COUGH_PROMPT,),
        high.alert_kinds() == {AlertKind.HIGH_COVID_RISK} and high.prompts_issued == (),
        quiet.alerts == () and quiet.prompts_issued == (),
    ]
    rng = np.random.default_rng(77)
    lossless = sum(parse_record(emit_record(r)) == r for r in (random_record(rng, i) for i in range(100)))
    ok = all(scenarios) and lossless == 100
    record_criterion("rules engine", ok, f"scenarios {sum(scenarios)}/3, lossless round-trips {lossless}/100")
    assert ok


def test_end_to_end_session(trained_bundle, tmp_path):
    buf, _ = synthetic.session_recording(4.0, [0.8, 2.5], np.random.default_rng(31))
    wav = tmp_path / "encounter.wav"
    from coughscope.audio_io import write_wav

    write_wav(wav, buf)
    models = trained_bundle["models"]
    docs = []
    for run in ("one", "two"):
        out = tmp_path / run
        argv = ["session", str(wav), "--temperature", "36.5", "--out-dir", str(out), "--seed", "7",
                "--timestamp", "2024-03-01T08:30:00Z", "--session-id", "enc001",
                "--detector", str(models / "detector"), "--fewshot", str(models / "fewshot"),
                "--bank", str(trained_bundle["bank"])]
        assert cli.main(argv) == 0
        docs.append((out / "enc001.json").read_text())
    record = parse_record(docs[0])
    sums = [sum(s.probability for s in e.scores) for e in record.events]
    ok = (json.loads(docs[0])["schema_version"] == SCHEMA_VERSION and len(record.events) >= 1
          and all(abs(s - 1) <= 1e-6 for s in sums) and 0.0 <= record.risk_score <= 1.0 and docs[0] == docs[1])
    record_criterion("end-to-end session", ok, f"{len(record.events)} event(s), risk {record.risk_score:.3f}, "
                     f"identical records {docs[0] == docs[1]}")
    assert ok
