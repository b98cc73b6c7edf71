import os

# single-threaded BLAS: faster on the tiny matrices here and keeps
# reductions deterministic; must be set before numpy loads
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from qarv.data import ImageDataset, synthetic_textures, write_dataset  # noqa: E402
from qarv.model import QarvModel, preset  # noqa: E402
from qarv.training import TrainConfig, train  # noqa: E402

# acceptance training budget; override only to shorten local debug loops
TRAIN_STEPS = int(os.environ.get("QARV_TEST_TRAIN_STEPS", "6000"))
TRAIN_SEED = 0
MODEL_SEED = 1
DATASET_SEED = 7
DATASET_SIZE = 512
CROP = 32


@pytest.fixture(scope="session")
def texture_images():
    return synthetic_textures(DATASET_SIZE, CROP, seed=DATASET_SEED)


@pytest.fixture(scope="session")
def texture_dataset(texture_images):
    return ImageDataset(texture_images)


@pytest.fixture(scope="session")
def texture_dataset_dir(texture_images, tmp_path_factory):
    directory = tmp_path_factory.mktemp("textures")
    write_dataset(texture_images, str(directory))
    return str(directory)


@pytest.fixture(scope="session")
def eval_images():
    """Held-out textures from the same generator family."""
    imgs = synthetic_textures(8, CROP, seed=1234)
    return [(img.astype(np.float32) / 255.0).transpose(2, 0, 1) for img in imgs]


@pytest.fixture(scope="session")
def trained_setup(texture_dataset, tmp_path_factory):
    """One toy variable-rate training run shared by the heavy tests.

    Returns (model, train-output-dir, TrainConfig); the model carries the
    final (live) weights.
    """
    out_dir = str(tmp_path_factory.mktemp("trained"))
    model = QarvModel(preset("qarv-tiny"), seed=MODEL_SEED)
    config = TrainConfig(iterations=TRAIN_STEPS, batch_size=8, lr=1e-3,
                         crop=CROP, seed=TRAIN_SEED, loss_mode="variable",
                         checkpoint_every=0, ema_decay=0.999, log_every=10)
    result = train(model, texture_dataset, config, out_dir)
    return model, result, config
