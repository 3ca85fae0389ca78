from __future__ import annotations

import hashlib
import re
from pathlib import Path

import pytest

from foveascan.cli import _calibrate, main
from foveascan.scenario import load_scenario

_RESULTS = pytest.StashKey[dict]()
_CRITERION = re.compile(r"test_criterion_(\d+)")


@pytest.fixture(scope="session")
def calibrated():
    """Preset name -> (scenario, homography) with the calibration fitted once per session."""
    cache = {}

    def get(name: str):
        if name not in cache:
            scenario = load_scenario(name)
            cache[name] = (scenario, _calibrate(scenario, 0).homography)
        return cache[name]
    return get


def _digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def run_all(monkeypatch):
    """Run every subcommand into ``out`` with a fixed seed and return file digests."""
    def run(out: Path, threads: str) -> dict[str, str]:
        monkeypatch.setenv("FOVEASCAN_THREADS", threads)
        assert main(["calibrate", "--scenario", "structured", "--seed", "3", "--out", str(out / "cal")]) == 0
        assert main(["mission", "--scenario", "structured", "--seed", "3", "--n-runs", "2",
                     "--calibration", str(out / "cal" / "calibration.json"), "--out", str(out / "mission")]) == 0
        run_dir = out / "mission" / "run_001"
        assert main(["extract", str(run_dir / "acq00_raw"), str(run_dir / "acq00_white"),
                     str(run_dir / "acq00_dark"), "--out", str(out / "extract")]) == 0
        assert main(["render-scene", "--scenario", "structured", "--seed", "3", "--tilt-x-range=-0.3,0.3",
                     "--step", "0.1", "--columns=-2,2", "--noise", "--halogen", "--out", str(out / "render")]) == 0
        return _digest(out)
    return run


# --- acceptance reporting --------------------------------------------------------------


def _results(config) -> dict:
    if _RESULTS not in config.stash:
        config.stash[_RESULTS] = {}
    return config.stash[_RESULTS]


@pytest.fixture
def criterion(request):
    """Record ``(number, passed, detail)`` for the end-of-session acceptance summary."""
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}  {detail}"
        _results(request.config)[number] = line
        print(line)
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = _CRITERION.search(item.name)
    if m and report.failed:
        results = _results(item.config)
        number = int(m.group(1))
        if number not in results or results[number].startswith("PASS"):
            msg = str(call.excinfo.value).splitlines()[0] if call.excinfo and str(call.excinfo.value) else ""
            results[number] = f"FAIL criterion {number:2d}  {item.name}: {report.when} error {msg}".rstrip()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = _results(config)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
