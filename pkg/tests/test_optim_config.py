import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssdas import config as cf
from ssdas import optim
from ssdas.config import ConfigError, ExperimentConfig
from ssdas.numerics import Tensor


def test_poly_lr_start_and_end():
    assert optim.poly_lr(2.5e-4, 0, 1000, 0.9) == 2.5e-4
    assert optim.poly_lr(2.5e-4, 1000, 1000, 0.9) == 0.0


def test_poly_lr_half():
    assert optim.poly_lr(2.5e-4, 500, 1000, 0.9) == pytest.approx(1.3397e-4, rel=1e-4)


def test_reference_defaults():
    assert (optim.REFERENCE_BASE_LR, optim.REFERENCE_MOMENTUM, optim.REFERENCE_WEIGHT_DECAY, optim.REFERENCE_LR_POWER) == \
        (2.5e-4, 0.9, 1e-4, 0.9)


def test_poly_lr_out_of_range():
    with pytest.raises(ValueError):
        optim.poly_lr(1.0, 11, 10)
    with pytest.raises(ValueError):
        optim.poly_lr(1.0, 0, 0)


@given(st.integers(1, 500))
def test_poly_lr_monotone(max_iter):
    lrs = [optim.poly_lr(0.1, i, max_iter) for i in range(max_iter + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_lr_zero_unchanged():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    optim.sgd_step(optim.OptimizerState(), [p], [np.array([3.0, 4.0])], 0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_plain_descent():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    optim.sgd_step(optim.OptimizerState(0.0, 0.0), [p], [np.array([3.0, 4.0])], 0.1)
    np.testing.assert_allclose(p.data, [0.7, -2.4], atol=1e-15)


def test_sgd_two_step_momentum():
    lr, g = 0.01, np.array([2.0, -1.0])
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = optim.OptimizerState(0.9, 0.0)
    optim.sgd_step(opt, [p], [g], lr)
    first = p.data.copy()
    optim.sgd_step(opt, [p], [g], lr)
    np.testing.assert_allclose(first - p.data, 1.9 * lr * g, atol=1e-12, rtol=0)


def test_sgd_weight_decay_term():
    p = Tensor(np.array([2.0]), requires_grad=True)
    optim.sgd_step(optim.OptimizerState(0.9, 0.5), [p], [np.array([1.0])], 0.1)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * (1.0 + 0.5 * 2.0))


def test_sgd_shape_mismatch_and_skip():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError):
        optim.sgd_step(optim.OptimizerState(), [p], [np.zeros(3)], 0.1)
    opt = optim.OptimizerState()
    optim.sgd_step(opt, [p], [None], 0.1)
    assert opt.buffers == {}


# --- config ---------------------------------------------------------------------------
def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.lambda_j == 0.1
    assert cfg.momentum == 0.9 and cfg.weight_decay == 1e-4 and cfg.lr_power == 0.9
    assert cfg.max_epoch >= cfg.epochs_pre


@pytest.mark.parametrize("field,value", [("lambda_j", -0.1), ("N", 0), ("k", 0), ("epochs_pre", -1),
                                         ("n_image", 3), ("r", 3), ("momentum", 1.0)])
def test_invalid_fields_named(field, value):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig(**{field: value}).validate()
    assert exc.value.field in (field, "n_image", "r")


def test_epochs_pre_cannot_exceed_max():
    with pytest.raises(ConfigError, match="epochs_pre"):
        ExperimentConfig(max_epoch=3, epochs_pre=4).validate()


def test_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=5, k=3, acda_region=False)
    path = cfg.dump(tmp_path / "c.json")
    assert ExperimentConfig.load(path) == cfg


def test_from_dict_type_checks():
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="acda_image"):
        ExperimentConfig.from_dict({"acda_image": 1})
    with pytest.raises(ConfigError, match="k"):
        ExperimentConfig.from_dict({"k": 1.5})
    assert ExperimentConfig.from_dict({"k": 3.0}).k == 3


def test_load_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    p.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_presets():
    base = ExperimentConfig()
    st_cfg = cf.s_plus_t(base)
    assert not st_cfg.any_alignment
    a = cf.acda_image_only(base)
    assert (a.acda_image, a.pida_image, a.acda_region, a.pida_region) == (True, False, False, False)
    assert len(cf.LAMBDA_GRID) == 5 and len(cf.N_GRID) == 5 and cf.K_GRID == (1, 3, 5, 10, 20)


def test_target_batch_defaults_to_shots():
    assert ExperimentConfig(k=1).tgt_batch == 1
    assert ExperimentConfig(k=20, batch_size=8).tgt_batch == 8
