import numpy as np
import pytest

from glitchsim import presets
from glitchsim.engine import Dense, Model


@pytest.fixture(scope="session")
def tiny_model():
    return presets.tiny_oracle_model(seed=7)


@pytest.fixture(scope="session")
def mini_model():
    return presets.lenet5_mini(seed=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def identity_dense(logit_values) -> Model:
    """A Dense model whose logits equal the given values for input 1.0."""
    vals = np.asarray(logit_values, dtype=np.float32)
    return Model(
        input_shape=(1,),
        layers=(
            Dense(
                in_features=1,
                out_features=len(vals),
                weights=vals.reshape(-1, 1),
                bias=np.zeros(len(vals), dtype=np.float32),
            ),
        ),
    )
