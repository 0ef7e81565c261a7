from pathlib import Path

import numpy as np
import pytest
import torch

from ocgan.config import TrainConfig
from ocgan.data import SplitManifest
from ocgan.networks import ArchitectureConfig
from ocgan.synthetic import SyntheticSpec, generate_synthetic_dataset


def tiny_arch(**kw) -> ArchitectureConfig:
    """3-level 16x16 network with few channels; fast enough for unit tests."""
    defaults = dict(image_size=16, n_levels=3, base_channels=4, latent_dim=8)
    defaults.update(kw)
    return ArchitectureConfig(**defaults)


def tiny_config(**kw) -> TrainConfig:
    defaults = dict(arch=tiny_arch(), epochs=1, batch_size=8, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> tuple[Path, SplitManifest]:
    """32x32 synthetic set (images are resized to 16x16 on load)."""
    out = tmp_path_factory.mktemp("tiny_data")
    spec = SyntheticSpec(
        image_size=32, n_train_normal=24, n_val_normal=4, n_val_abnormal=4,
        n_test_normal=6, n_test_abnormal=6, seed=3,
    )
    return out, generate_synthetic_dataset(spec, out)


def write_png(path: Path, array: np.ndarray, mode: str | None = None) -> Path:
    from PIL import Image

    Image.fromarray(array, mode=mode).save(path)
    return path


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


_ACCEPTANCE = pytest.StashKey[dict]()


class AcceptanceReport:
    """Collects one verdict line per acceptance criterion."""

    def __init__(self, lines: dict[str, str]):
        self.lines = lines

    def check(self, criterion: str, ok: bool, detail: str) -> bool:
        self.lines[criterion] = f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}"
        return ok


@pytest.fixture(scope="session")
def acceptance(request) -> AcceptanceReport:
    return AcceptanceReport(request.config.stash.setdefault(_ACCEPTANCE, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=lambda k: int(k[2:])):
            terminalreporter.write_line(lines[key])
