import json
import os
import sys
import time
from types import SimpleNamespace

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sodgan import config, pipeline  # noqa: E402

VERDICTS = []


def verdict(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
    VERDICTS.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)


def acceptance_config():
    """Library defaults, except the downstream pool size, which is trimmed to fit the time budget."""
    return config.apply_overrides(config.RunConfig(), ["synth.n_keep=300"])


def _build(cfg, ws):
    t0 = time.time()
    pipeline.stage_corpus(cfg, ws)
    pipeline.stage_train_gan(cfg, ws)
    pipeline.stage_train_den(cfg, ws)
    pipeline.stage_train_maskgen(cfg, ws)
    seconds = time.time() - t0
    pipeline.stage_train_dq(cfg, ws)
    with open(ws.path("maskgen", "run.json"), encoding="utf-8") as fh:
        iou = json.load(fh)["heldout_mean_iou"]
    pipeline.write_json(ws.path("fixture.json"), {"config": cfg.to_dict(), "fewshot_seconds": seconds,
                                                  "heldout_mean_iou": iou})


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Generator, DEN, mask branch and D_q trained once at default settings.

    Set SODGAN_TEST_HOME to keep the artifacts between sessions; they are
    reused only when the stored configuration matches.
    """
    cfg = acceptance_config()
    home = os.environ.get("SODGAN_TEST_HOME") or str(tmp_path_factory.mktemp("pipeline"))
    ws = pipeline.Workspace(home)
    marker = ws.path("fixture.json")
    stored = None
    if os.path.exists(marker):
        with open(marker, encoding="utf-8") as fh:
            stored = json.load(fh)
    if stored is None or stored["config"] != cfg.to_dict():
        _build(cfg, ws)
        with open(marker, encoding="utf-8") as fh:
            stored = json.load(fh)
    return SimpleNamespace(cfg=cfg, ws=ws, iou=stored["heldout_mean_iou"], seconds=stored["fewshot_seconds"])
