"""Architecture presets with seeded random weights.

These are untrained skeletons for shape arithmetic, schedules, and oracle
tests; trained weights ship as LSNM files produced by the exporter."""

from __future__ import annotations

import numpy as np

from .engine import AvgPool, Conv2D, Dense, Flatten, MaxPool, Model, ReLU


def _conv(rng, in_shape, out_c, k, stride=1, padding=0) -> Conv2D:
    c = in_shape[0]
    scale = np.sqrt(2.0 / (c * k * k))
    return Conv2D(
        in_shape=in_shape,
        out_channels=out_c,
        kernel=(k, k),
        stride=stride,
        padding=padding,
        weights=(rng.standard_normal((out_c, c, k, k)) * scale).astype(np.float32),
        bias=np.zeros(out_c, dtype=np.float32),
    )


def _dense(rng, n_in, n_out) -> Dense:
    scale = np.sqrt(2.0 / n_in)
    return Dense(
        in_features=n_in,
        out_features=n_out,
        weights=(rng.standard_normal((n_out, n_in)) * scale).astype(np.float32),
        bias=np.zeros(n_out, dtype=np.float32),
    )


def dense_model(in_features: int, classes: int, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    return Model(
        input_shape=(in_features,), layers=(_dense(rng, in_features, classes),)
    )


def tiny_oracle_model(seed: int = 0) -> Model:
    """100 feature-map elements: small enough for the exhaustive
    flip-every-bit sensitivity oracle."""
    rng = np.random.default_rng(seed)
    conv = _conv(rng, (1, 4, 4), 2, 3, padding=1)
    return Model(
        input_shape=(1, 4, 4),
        layers=(
            conv,
            ReLU(in_shape=(2, 4, 4)),
            Flatten(in_shape=(2, 4, 4)),
            _dense(rng, 32, 4),
        ),
    )


def lenet5_mini(seed: int = 0) -> Model:
    """Desk-scale LeNet-5 shape on 14x14 inputs: conv/relu/maxpool/conv/relu/
    avgpool/flatten/dense/relu/dense, 2766 elements."""
    rng = np.random.default_rng(seed)
    return Model(
        input_shape=(1, 14, 14),
        layers=(
            _conv(rng, (1, 14, 14), 4, 3, padding=1),
            ReLU(in_shape=(4, 14, 14)),
            MaxPool(in_shape=(4, 14, 14), window=2, stride=2),
            _conv(rng, (4, 7, 7), 8, 3, padding=1),
            ReLU(in_shape=(8, 7, 7)),
            AvgPool(in_shape=(8, 7, 7), window=2, stride=2),
            Flatten(in_shape=(8, 3, 3)),
            _dense(rng, 72, 32),
            ReLU(in_shape=(32,)),
            _dense(rng, 32, 10),
        ),
    )


def lenet5(seed: int = 0) -> Model:
    """Classic LeNet-5 shape on 28x28 inputs."""
    rng = np.random.default_rng(seed)
    return Model(
        input_shape=(1, 28, 28),
        layers=(
            _conv(rng, (1, 28, 28), 6, 5, padding=2),
            ReLU(in_shape=(6, 28, 28)),
            MaxPool(in_shape=(6, 28, 28), window=2, stride=2),
            _conv(rng, (6, 14, 14), 16, 5),
            ReLU(in_shape=(16, 10, 10)),
            MaxPool(in_shape=(16, 10, 10), window=2, stride=2),
            Flatten(in_shape=(16, 5, 5)),
            _dense(rng, 400, 120),
            ReLU(in_shape=(120,)),
            _dense(rng, 120, 84),
            ReLU(in_shape=(84,)),
            _dense(rng, 84, 10),
        ),
    )
