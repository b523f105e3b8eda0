import numpy as np
import pytest
import torch

import maskfuse as mf

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dims():
    # 16x16 images on a 4x4 grid: big enough to exercise everything, cheap
    # enough for gradient checks.
    return mf.EncoderDims(layers=3, extractor_layers=1, width=32, embed_dim=16,
                          heads=4, grid=(4, 4), patch=4)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "ds"
    spec = mf.SyntheticDatasetSpec(n_train=8, n_val=4, image_size=16,
                                   shapes=("disk", "square"),
                                   colors=("red", "blue"),
                                   shapes_per_image=(1, 2), seed=11)
    mf.generate_synthetic_dataset(spec, root)
    return root


@pytest.fixture(scope="session")
def tiny_samples(tiny_dataset):
    samples, vocab = mf.load_dataset(tiny_dataset, split="all")
    return samples, vocab


def random_unit_rows(rng, n, dim):
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)
