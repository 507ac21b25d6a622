import numpy as np
import pytest
import torch

from _util import smooth_image, write_images

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def image_dirs(tmp_path_factory):
    """Two small category directories of 96x96 PNGs (resized to 256 on load)."""
    base = tmp_path_factory.mktemp("images")
    g = np.random.default_rng(7)
    t_dir = write_images(base / "t", [smooth_image(g, 96) for _ in range(4)], "t")
    r_dir = write_images(base / "r", [smooth_image(g, 96) for _ in range(4)], "r")
    return t_dir, r_dir
