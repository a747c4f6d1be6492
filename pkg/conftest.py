"""Shared pytest wiring: per-criterion PASS/FAIL lines for the release gate."""

import pytest

FEATURIZER_CONTRACT = ("featurizer/tests/test_featurizer.py::TestContract::"
             "test_ten_images_pass_validate_and_rerun_is_byte_identical")
FEATURIZER_LABEL = ("featurizer contract: 10 images pass validate with "
                   "P, R=C=14, D=384; re-run byte-identical")

_gate_results = {}


def _watched(nodeid: str) -> str | None:
    if "test_acceptance.py" in nodeid:
        return nodeid.split("::")[-1]
    if nodeid.replace("\\", "/").endswith(FEATURIZER_CONTRACT.split("/")[-1]):
        return "secondary"
    return None


def pytest_runtest_logreport(report):
    key = _watched(report.nodeid)
    if key is None:
        return
    if report.when == "call":
        _gate_results[key] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        # setup errors and skips never reach the call phase
        _gate_results[key] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _gate_results:
        return
    try:
        import sys
        from pathlib import Path
        sys.path.insert(0, str(Path(__file__).parent / "tests"))
        from test_acceptance import CRITERIA
    except ImportError:
        CRITERIA = {}
    labels = dict(CRITERIA)
    labels["secondary"] = FEATURIZER_LABEL
    terminalreporter.section("release gate")
    ordered = sorted(_gate_results, key=lambda k: (k == "secondary", k))
    for name in ordered:
        label = labels.get(name, name)
        word = "PASS" if _gate_results[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"[{word}] {label}")
