import math

import numpy as np
import pytest

from glitchsim.bits import flip_bit
from glitchsim.engine import (
    Dense,
    ElementAddr,
    Model,
    PlanError,
    ShapeError,
    enumerate_elements,
    forward,
    loss,
    make_plan,
    predict,
)
from glitchsim.presets import dense_model, lenet5

from conftest import identity_dense


def test_forward_purity_is_bit_identical(mini_model):
    x = np.random.default_rng(5).random(196, dtype=np.float32)
    a = forward(mini_model, x, 3, keep_feature_maps=True)
    b = forward(mini_model, x, 3, keep_feature_maps=True)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert a.loss_value == b.loss_value
    for fa, fb in zip(a.feature_maps, b.feature_maps):
        assert fa.tobytes() == fb.tobytes()


def test_softmax_of_clean_logits_normalizes(mini_model):
    x = np.random.default_rng(6).random(196, dtype=np.float32)
    z = forward(mini_model, x, 0).logits.astype(np.float64)
    p = np.exp(z - z.max())
    p /= p.sum()
    assert abs(p.sum() - 1.0) < 1e-6


def test_injection_locality(mini_model):
    x = np.random.default_rng(7).random(196, dtype=np.float32)
    base = forward(mini_model, x, 0, keep_feature_maps=True)
    j = 3  # flip inside the second conv's output
    inj = forward(
        mini_model, x, 0, plan=[(ElementAddr(j, 11), 30)], keep_feature_maps=True
    )
    for layer in range(j):
        assert base.feature_maps[layer].tobytes() == inj.feature_maps[layer].tobytes()
    assert base.feature_maps[j].tobytes() != inj.feature_maps[j].tobytes()


def test_flip_applied_before_consumer(mini_model):
    x = np.random.default_rng(8).random(196, dtype=np.float32)
    addr = ElementAddr(0, 40)
    inj = forward(mini_model, x, 0, plan=[(addr, 31)], keep_feature_maps=True)
    base = forward(mini_model, x, 0, keep_feature_maps=True)
    expected = flip_bit(base.feature_maps[0].reshape(-1)[40], 31)
    assert inj.feature_maps[0].reshape(-1)[40] == expected
    # downstream actually consumed the faulted value
    assert inj.logits.tobytes() != base.logits.tobytes()


def test_duplicate_plan_entry_rejected(mini_model):
    with pytest.raises(PlanError):
        make_plan(mini_model, [(ElementAddr(0, 1), 4), (ElementAddr(0, 1), 4)])


def test_plan_address_validation(mini_model):
    with pytest.raises(PlanError):
        make_plan(mini_model, [(ElementAddr(99, 0), 0)])
    with pytest.raises(PlanError):
        make_plan(mini_model, [(ElementAddr(0, 10_000), 0)])


def test_input_shape_mismatch(mini_model):
    with pytest.raises(ShapeError):
        forward(mini_model, np.zeros(5, dtype=np.float32), 0)


def test_sign_flip_of_max_logit_changes_argmax_iff_dethroned():
    model = identity_dense([2.0, 1.5, -1.0])
    x = np.ones(1, dtype=np.float32)
    base = forward(model, x, 0)
    assert base.predicted_class == 0
    flipped = forward(model, x, 0, plan=[(ElementAddr(0, 0), 31)])
    # logit 0 becomes -2.0: by-hand argmax of [-2.0, 1.5, -1.0] is 1
    assert flipped.logits[0] == np.float32(-2.0)
    assert flipped.predicted_class == 1
    # sign flip of a non-max negative logit cannot dethrone the leader
    flipped2 = forward(model, x, 0, plan=[(ElementAddr(0, 2), 31)])
    assert flipped2.predicted_class == 0


def test_enumerate_single_dense_layer():
    model = dense_model(4, 10, seed=0)
    addrs = enumerate_elements(model)
    assert addrs == [ElementAddr(0, k) for k in range(10)]


def test_enumerate_lenet5_matches_shape_arithmetic():
    model = lenet5(seed=0)
    # independent shape oracle: conv/pool output formulas per layer
    def conv_out(h, k, s, p):
        return (h + 2 * p - k) // s + 1

    h1 = conv_out(28, 5, 1, 2)
    p1 = conv_out(h1, 2, 2, 0)
    h2 = conv_out(p1, 5, 1, 0)
    p2 = conv_out(h2, 2, 2, 0)
    expected = (
        6 * h1 * h1 + 6 * h1 * h1 + 6 * p1 * p1
        + 16 * h2 * h2 + 16 * h2 * h2 + 16 * p2 * p2
        + 16 * p2 * p2 + 120 + 120 + 84 + 84 + 10
    )
    assert model.element_count == expected == len(enumerate_elements(model))


def test_enumerate_is_deterministic(mini_model):
    assert enumerate_elements(mini_model) == enumerate_elements(mini_model)


def test_loss_uniform_logits_is_log_classcount():
    assert loss(np.zeros(10, dtype=np.float32), 4) == pytest.approx(
        math.log(10), abs=1e-12
    )


def test_loss_one_hot_with_large_margin_vanishes():
    z = np.full(10, -100.0, dtype=np.float32)
    z[2] = 100.0
    assert loss(z, 2) < 1e-12


def test_loss_caps_on_nonlabel_infinity():
    z = np.zeros(10, dtype=np.float32)
    z[5] = np.float32(np.inf)
    assert loss(z, 0) == 1.0e6


def test_loss_special_cases():
    z = np.zeros(4, dtype=np.float32)
    z[1] = np.float32(np.inf)
    assert loss(z, 1) == 0.0  # unique +inf at the label: the limit is 0
    z[2] = np.float32(np.inf)
    assert loss(z, 1) == 1.0e6  # ambiguous double infinity
    z = np.zeros(4, dtype=np.float32)
    z[0] = np.float32(np.nan)
    assert loss(z, 1) == 1.0e6
    z = np.zeros(4, dtype=np.float32)
    z[3] = np.float32(-np.inf)
    assert loss(z, 3) == 1.0e6
    assert loss(z, 0) == pytest.approx(math.log(3), abs=1e-12)


def test_loss_label_bounds():
    with pytest.raises(ValueError):
        loss(np.zeros(3, dtype=np.float32), 3)


def test_predict_tie_break_and_nan():
    assert predict(np.array([1.0, 1.0, 0.5], dtype=np.float32)) == 0
    assert predict(np.array([np.nan, 0.1, 0.1], dtype=np.float32)) == 1
    # no comparable logit at all: invalid class, never "correct"
    assert predict(np.array([np.nan, np.nan], dtype=np.float32)) == -1
    assert predict(np.array([-np.inf, np.nan], dtype=np.float32)) == -1


def test_hand_computed_dense_gradient():
    model = Model(
        input_shape=(2,),
        layers=(
            Dense(
                in_features=2,
                out_features=2,
                weights=np.eye(2, dtype=np.float32),
                bias=np.zeros(2, dtype=np.float32),
            ),
        ),
    )
    x = np.array([1.0, 0.0], dtype=np.float32)
    base = forward(model, x, 0)
    assert base.loss_value == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    inj = forward(model, x, 0, plan=[(ElementAddr(0, 0), 31)])
    assert inj.loss_value == pytest.approx(math.log(1 + math.exp(1)), abs=1e-12)
    # the flip moves the logit from +1 to -1: loss delta is exactly 1 nat
    assert inj.loss_value - base.loss_value == pytest.approx(1.0, abs=1e-9)


def test_model_rejects_incompatible_layers():
    with pytest.raises(ShapeError):
        Model(
            input_shape=(4,),
            layers=(
                Dense(
                    in_features=3,
                    out_features=2,
                    weights=np.zeros((2, 3), dtype=np.float32),
                    bias=np.zeros(2, dtype=np.float32),
                ),
            ),
        )
