import sys

import numpy as np
import pytest

from degradasr.degrade import save_image


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-criteria verdicts after the test summary."""
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(verdicts,
                           key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def synthetic_image(seed: int, size: int = 256) -> np.ndarray:
    """Procedural natural-looking test image: smooth field + shapes + texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    # low-frequency base
    for c in range(3):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        img[:, :, c] = 0.5 + 0.25 * np.sin(2 * np.pi * fx * xx + ph[0]) \
            * np.cos(2 * np.pi * fy * yy + ph[1])
    # random rectangles and disks
    for _ in range(12):
        cx, cy = rng.uniform(0, 1, 2)
        r = rng.uniform(0.03, 0.2)
        col = rng.uniform(0.05, 0.95, 3)
        if rng.random() < 0.5:
            mask = ((xx - cx) ** 2 + (yy - cy) ** 2) < r ** 2
        else:
            mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r)
        img[mask] = col
    # fine texture so blur levels are distinguishable
    tex = rng.standard_normal((size, size, 1)) * 0.06
    img = img + tex
    return np.clip(img, 0.0, 1.0)


@pytest.fixture(scope="session")
def hr_corpus_dir(tmp_path_factory):
    """32 synthetic 320x320 HR images saved as PNG."""
    root = tmp_path_factory.mktemp("hr_corpus")
    for i in range(32):
        save_image(root / f"img_{i:03d}.png", synthetic_image(1000 + i, 320))
    return root


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    """3 tiny images for fast manifest/IO tests."""
    root = tmp_path_factory.mktemp("small_corpus")
    for i in range(3):
        save_image(root / f"pic_{i}.png", synthetic_image(2000 + i, 96))
    return root
