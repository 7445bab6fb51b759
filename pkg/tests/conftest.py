import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from msenet import synth  # noqa: E402
from msenet.config import desk_config  # noqa: E402

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        assert ok, line
    return record


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def write_images(root: Path, counts: dict[str, int], size=(20, 16), seed=0):
    rng = np.random.default_rng(seed)
    for c, n in counts.items():
        d = root / c
        d.mkdir(parents=True, exist_ok=True)
        for j in range(n):
            arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{j:03d}.png")
    return root


@pytest.fixture
def image_tree(tmp_path):
    """Factory writing root/<class>/<nnn>.png with random pixels."""
    def make(counts, **kw):
        return write_images(tmp_path / "ds", counts, **kw)
    return make


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """12 synthetic classes x 12 images, shared read-only across tests."""
    root = tmp_path_factory.mktemp("synth") / "data"
    synth.generate(root, classes=12, images_per_class=12, seed=3)
    return root


@pytest.fixture
def small_config(small_synth):
    """Seconds-scale training config on ``small_synth``."""
    return desk_config(
        small_synth,
        **{"data.split_counts": [6, 3, 3], "train_task.n_way": 3, "train_task.k_shot": 2,
           "train_task.n_query": 2, "eval_task.n_way": 3, "eval_task.k_shot": 1, "eval_task.n_query": 3,
           "total_episodes": 4, "eval_interval": 2, "val_episodes": 2, "test_episodes": 3},
    )


@pytest.fixture(scope="session")
def resnet_weights(tmp_path_factory):
    """Stock torchvision residual-18 state dict (random init, fc included)."""
    from torchvision.models import resnet18

    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("weights") / "resnet18.pth"
    torch.save(resnet18().state_dict(), path)
    return path
