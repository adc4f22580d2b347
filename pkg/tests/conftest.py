import numpy as np
import pytest

from esmlab import datasets, denoiser, schedule


@pytest.fixture(scope="session")
def sched():
    return schedule.build_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def random_model():
    """Untrained but nonzero MLP on 8x8 latents; nonlinear in x."""
    return denoiser.init_denoiser(3, 8, np.random.default_rng(7), hidden=32, depth=2, temb_dim=16, cemb_dim=8,
                                  zero_out=False)


@pytest.fixture(scope="session")
def shapes():
    return datasets.make_shapes(128, rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def trained_shapes_model(shapes, sched):
    """The 32x32 shape-class denoiser shared by the slower tests."""
    model = denoiser.init_denoiser(shapes.num_classes, shapes.side, np.random.default_rng(0))
    denoiser.train_denoiser(model, shapes, sched, steps=3000, lr=1e-3, seed=0)
    return model
