from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((name, passed, detail))
    print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_bundle(tmp_path_factory):
    """Small detector + few-shot bundles and a support bank, built through the CLI."""
    from coughscope import cli, synthetic

    root = tmp_path_factory.mktemp("bundle")
    det_manifest = synthetic.write_detection_corpus(root / "det", 80, seed=5)
    cls_manifest = synthetic.write_class_corpus(root / "cls", 8, seed=6)
    models = root / "models"
    assert cli.main(["train-detector", str(det_manifest), "--out", str(models / "detector"),
                     "--epochs", "3", "--seed", "3"]) == 0
    assert cli.main(["train-fewshot", str(cls_manifest), "--out", str(models / "fewshot"), "--epochs", "2",
                     "--episodes-per-epoch", "8", "--c", "3", "--k", "2", "--channels", "8,16,16,32"]) == 0
    return {"root": root, "models": models, "bank": cls_manifest, "det_manifest": det_manifest}
