import numpy as np
import pytest

from solarseg import (
    ArchConfig,
    DomainSpec,
    SceneSpec,
    TrainConfig,
    materialize_dataset,
)

#: smallest arch that exercises every layer kind; used for gradient checks
TINY_ARCH = ArchConfig(in_channels=3, base_width=2, depth=1, embed_dim=4, tile=8)

#: arch sized for second-scale training tests on 16 px tiles
MICRO_ARCH = ArchConfig(in_channels=3, base_width=4, depth=2, embed_dim=8, tile=16)

MICRO_DOMAIN = DomainSpec(
    name="rooftop",
    scene=SceneSpec(tile_size=16, panel_rows=(1, 2), panel_cols=(1, 2)),
    n_train=10,
    n_val=3,
    n_test=3,
)


def micro_train_config(**overrides) -> TrainConfig:
    base = dict(batch_size=4, epochs=2, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """Tiny on-disk dataset shared by training/harness/CLI tests."""
    root = tmp_path_factory.mktemp("micro_data")
    return materialize_dataset(MICRO_DOMAIN, root, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
