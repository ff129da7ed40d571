import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Small enough that every CLI command finishes in seconds.
TINY_RUN = {
    "model": {
        "stages": [
            {"convs": 1, "width": 4, "pool": True},
            {"convs": 1, "width": 6, "pool": True},
            {"convs": 1, "width": 8, "pool": True},
            {"convs": 1, "width": 8, "pool": False},
        ],
        "context_width": 8,
        "refine_width": 6,
        "dtype": "float64",
    },
    "train": {"epochs": 4, "steps_per_epoch": 2, "batch_size": 2, "save_every": 2, "lr_drop_every": 3},
    "data": {"scene_size": 32, "train_scenes": 2, "val_scenes": 1, "test_scenes": 2, "patch_size": 16, "overlap": 4},
    "infer": {"patch_size": 16, "scales": [0.5, 1.0]},
}


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    import json

    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    from scasnet.cli import main

    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


VERDICTS = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def record(number, title, ok, detail=""):
        line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        VERDICTS.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
