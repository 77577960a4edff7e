import numpy as np
import pytest
import torch

from ditracker.dit import DiTConfig, VideoDiT
from ditracker.refiner import TrackerConfig, build_tracker

MICRO_DIT = DiTConfig(layers=2, heads=2, d_head=4, d_video=8, extract_layer=2, extract_head=1, lora_rank=2)


def micro_tracker_config(**kw) -> TrackerConfig:
    base = dict(num_scales=2, radius=1, iters=2, fusion="cost_concat", use_lora=True, lora_rank=2,
                chunk_len=16, d_embed=8, mlp_hidden=16, width=16, heads=2, blocks=1, conv_dim=8)
    base.update(kw)
    return TrackerConfig(**base)


def micro_tracker(seed=0, **kw):
    torch.manual_seed(seed)
    return build_tracker(VideoDiT(MICRO_DIT), micro_tracker_config(**kw), seed=seed)


def randomise(module, seed=0, scale=0.1):
    """Give every trainable tensor (including zero-initialised ones) random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad:
                p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


@pytest.fixture
def micro_video():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, size=(3, 16, 24, 3)).astype(np.float32)


# --- acceptance reporting: one PASS/FAIL line per criterion ---------------------

CRITERIA: dict[int, list] = {}
NOTES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = CRITERIA.setdefault(number, [title, None])
    if rep.failed or rep.skipped:
        entry[1] = False
    elif rep.when == "call" and entry[1] is None:
        entry[1] = True


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(CRITERIA):
        title, ok = CRITERIA[number]
        note = f"  [{NOTES[number]}]" if number in NOTES else ""
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}{note}")
