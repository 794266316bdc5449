import time

import pytest
import torch

from pestlpn.backbone import LPN, BackboneConfig
from pestlpn.datapipe import ImageStore, generate_fixture, scan_dataset
from pestlpn.metatrain import TrainingConfig, meta_train

MINI_SIZE = 16


def mini_config(**overrides) -> BackboneConfig:
    params = dict(input_size=MINI_SIZE, stage_channel_widths=(4, 8, 8), fc_hidden_dim=16,
                  stage_feature_dim=16, embedding_dim=16, groups_branch_b=4,
                  dilation_branch_c=2, dropout_rate=0.0)
    params.update(overrides)
    return BackboneConfig(**params)


@pytest.fixture
def mini_lpn():
    torch.manual_seed(0)
    return LPN(mini_config())


@pytest.fixture(scope="session")
def fixture_train(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_fixture")
    return generate_fixture(root, classes=5, per_class=30, image_size=32, seed=1)


@pytest.fixture(scope="session")
def fixture_test(tmp_path_factory):
    root = tmp_path_factory.mktemp("test_fixture")
    return generate_fixture(root, classes=5, per_class=30, image_size=32, seed=2)


@pytest.fixture(scope="session")
def trained_mini(fixture_train):
    """Miniature LPN meta-trained for 50 episodes x 10 epochs on the separable fixture."""
    torch.manual_seed(0)
    model = LPN(BackboneConfig(input_size=MINI_SIZE, stage_channel_widths=(8, 16, 16),
                               fc_hidden_dim=32, stage_feature_dim=16, embedding_dim=16))
    store = ImageStore(MINI_SIZE)
    groups = scan_dataset(fixture_train).groups("fixture")
    config = TrainingConfig(meta_episodes=50, epochs_per_episode=10, k_range=(5, 5),
                            seed=0, augment=False)
    start = time.perf_counter()
    result = meta_train(model, groups, config, store=store)
    return {"result": result, "store": store, "seconds": time.perf_counter() - start}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    def record(number: int, title: str, passed: bool, detail: str = ""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
