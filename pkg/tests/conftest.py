import numpy as np
import pytest

from xraymtl.data import SyntheticConfig, generate_synthetic
from xraymtl.model import ArchConfig, init_params

# 16x16 input, two stride-2 blocks -> d=4, K=16; used by gradient checks
TINY_ARCH = ArchConfig(input_size=(16, 16), encoded_dim=4, enc_channels=(4, 4),
                       cls_hidden=6, det_hidden=8, seg_channels=(4, 4), max_gt_boxes=4)

# 32x32 input; big enough to train for real, small enough for test budgets
SMALL_ARCH = ArchConfig(input_size=(32, 32), encoded_dim=4, enc_channels=(8, 16, 32),
                        cls_hidden=16, det_hidden=32, seg_channels=(16, 8, 8))


@pytest.fixture(scope="session")
def tiny_arch():
    return TINY_ARCH


@pytest.fixture(scope="session")
def small_arch():
    return SMALL_ARCH


@pytest.fixture()
def tiny_params(tiny_arch):
    return init_params(tiny_arch, seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SyntheticConfig(image_size=(32, 32), num_samples=96, positive_fraction=0.5,
                          blob_radius_range=(0.10, 0.22), seed=11)
    return generate_synthetic(cfg)


def make_dataset(image_size=(16, 16), n=8, seed=0, positive_fraction=1.0, **kw):
    cfg = SyntheticConfig(image_size=image_size, num_samples=n,
                          positive_fraction=positive_fraction,
                          blob_radius_range=kw.pop("blob_radius_range", (0.12, 0.25)),
                          seed=seed, **kw)
    return generate_synthetic(cfg)
