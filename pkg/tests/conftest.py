from __future__ import annotations

import json

import pytest

from ceph3d.cli import main

# Small enough to run in seconds; exercises every stage of the pipeline.
TINY_CONFIG = {
    "base": "desk",
    "n_paired": 3,
    "n_anonymized": 24,
    "n_test": 2,
    "full": {"vae_epochs": 60, "phi_epochs": 40},
    "cranial": {"vae_epochs": 60, "phi_epochs": 40},
    "reference": {"epochs": 4, "batch_size": 16},
    "mandible": {"epochs": 3, "batch_size": 8},
    "midsagittal": {"epochs": 4, "batch_size": 16},
}


def run_tiny_pipeline(root, seed: int = 3) -> dict:
    """synth -> train -> infer through the CLI; returns the paths involved."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    paths = {"config": cfg, "data": root / "data", "bundle": root / "bundle", "pred": root / "pred"}
    common = ["--config", str(cfg), "--seed", str(seed)]
    assert main(["synth", *common, "--out", str(paths["data"])]) == 0
    assert main(["train", *common, "--data", str(paths["data"]), "--out", str(paths["bundle"])]) == 0
    assert main(["infer", *common, "--bundle", str(paths["bundle"]), "--data", str(paths["data"]),
                 "--out", str(paths["pred"])]) == 0
    return paths


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    """Two independent runs with the same seed."""
    base = tmp_path_factory.mktemp("tiny")
    return run_tiny_pipeline(base / "run1"), run_tiny_pipeline(base / "run2")


# --- acceptance summary -------------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str]] = {}
ACCEPTANCE_DETAILS: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = getattr(item.function, "criterion", None)
    if crit is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.outcome == "passed" else ("SKIP" if rep.outcome == "skipped" else "FAIL")
        ACCEPTANCE[crit[0]] = (status, crit[1])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
    for n in sorted(ACCEPTANCE_DETAILS):
        terminalreporter.write_line("")
        terminalreporter.write_line(f"criterion {n} details: {ACCEPTANCE_DETAILS[n]}")
