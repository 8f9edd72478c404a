import numpy as np
import pytest
import torch

from opendg.encoders import Image, make_tiny_backbone

torch.set_num_threads(1)

TINY_DIMS = {"d_patch": 8, "d_tok": 8, "d_joint": 8}


@pytest.fixture(scope="session")
def tiny_backbone():
    return make_tiny_backbone(seed=7, dims=TINY_DIMS, depth=2,
                              image_size=16, patch_size=8, channels=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=16, channels=3, domain="src"):
    return Image(pixels=rng.uniform(0.0, 1.0, size=(size, size, channels)), domain_tag=domain)


@pytest.fixture()
def sample_image(rng):
    return random_image(rng)
