"""AdamW and warm-restart schedule behavior."""

import numpy as np
import pytest

from cpep.autodiff import NonFiniteError, Parameter
from cpep.optim import AdamW, CosineWarmRestarts


def make_param(value, name="p"):
    return Parameter(np.array(value, dtype=np.float64), name=name)


def test_zero_gradient_zero_decay_leaves_params_unchanged():
    p = make_param([1.0, -2.0, 3.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(3)
    for _ in range(5):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_single_step_matches_hand_evaluation():
    # g=1, lr=0.1, fresh moments, no decay: bias-corrected m/sqrt(v) = 1
    p = make_param([0.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.ones(1)
    opt.step()
    assert abs(p.data[0] + 0.1) < 1e-6


def test_weight_decay_is_multiplicative_and_decoupled():
    p = make_param([2.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    opt.step()
    # zero gradient leaves the Adam update at zero; only the decay acts
    np.testing.assert_allclose(p.data, [2.0 * (1.0 - 0.1 * 0.5)], rtol=1e-12)


def test_nan_gradient_raises_with_parameter_name():
    p = make_param([1.0], name="enc0.wq")
    opt = AdamW([p], lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError, match="enc0.wq"):
        opt.step()


def test_frozen_parameters_never_update():
    frozen = Parameter(np.ones(2), name="frozen", trainable=False)
    live = make_param([1.0], name="live")
    opt = AdamW([frozen, live], lr=0.1)
    before = frozen.data.copy()
    live.grad = np.ones(1)
    frozen.grad = np.ones(2)  # even a stray grad must be ignored
    opt.step()
    np.testing.assert_array_equal(frozen.data, before)
    assert live.data[0] != 1.0


def test_schedule_restart_boundaries_hit_base_lr():
    sched = CosineWarmRestarts(lr_base=1e-4, period=10, period_mult=2, lr_min=1e-6)
    # cycles: [0,10), [10,30), [30,70)
    for boundary in (0, 10, 30, 70):
        assert sched.lr_at(boundary) == pytest.approx(1e-4, rel=1e-12)


def test_schedule_half_period_is_midpoint():
    sched = CosineWarmRestarts(lr_base=1e-4, period=10, period_mult=2, lr_min=1e-6)
    mid = (1e-4 + 1e-6) / 2.0
    assert sched.lr_at(5) == pytest.approx(mid, rel=1e-12)
    # second cycle has length 20, so its midpoint is at 10 + 10
    assert sched.lr_at(20) == pytest.approx(mid, rel=1e-12)


def test_schedule_stays_within_bounds():
    sched = CosineWarmRestarts(lr_base=1e-4, period=7, period_mult=3, lr_min=1e-6)
    for step in range(500):
        lr = sched.lr_at(step)
        assert 1e-6 <= lr <= 1e-4


def test_schedule_period_mult_one_is_periodic():
    sched = CosineWarmRestarts(lr_base=1.0, period=4, period_mult=1, lr_min=0.0)
    for step in range(40):
        assert sched.lr_at(step) == pytest.approx(sched.lr_at(step % 4), rel=1e-12)


def test_optimizer_follows_schedule():
    p = make_param([0.0])
    sched = CosineWarmRestarts(lr_base=0.1, period=4, period_mult=1, lr_min=0.0)
    opt = AdamW([p], lr=0.1, weight_decay=0.0, schedule=sched)
    used = []
    for _ in range(6):
        p.grad = np.ones(1)
        used.append(opt.step())
    expected = [sched.lr_at(t) for t in range(6)]
    np.testing.assert_allclose(used, expected, rtol=1e-12)
