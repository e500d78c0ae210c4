import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_image(rng: np.random.Generator, h: int, w: int, range_tag: str = "unit"):
    from texterase.data import RANGE_BOUNDS, Image

    lo, hi = RANGE_BOUNDS[range_tag]
    v = rng.uniform(lo, hi, size=(h, w, 3)).astype(np.float32)
    return Image(v, range_tag)


def random_mask(rng: np.random.Generator, h: int, w: int, p: float = 0.3):
    return (rng.random((h, w)) < p).astype(np.float32)
