import numpy as np
import pytest

from aqrnn.autodiff import AdamState, backward
from aqrnn.config import NetworkConfig, RunConfig, SplitConfig, TrainConfig
from aqrnn.dataset import Windows, chrono_split, synth_panel
from aqrnn.errors import ConfigError
from aqrnn.network import QuantileModel
from aqrnn.training import (LOG_FIELDS, ControllerState, TrainState, batch_sizes, close_window, fit,
                            format_log_line, learning_rates, member_loss, pinball, pinball_tensor,
                            rank_members, select_members, train_update, unrolled_loss, update_gamma1,
                            update_gamma2, updates_per_epoch)

NET = NetworkConfig(dilations=[[1], [2]], patch_hidden=2)


@pytest.fixture(scope="module")
def panel():
    return synth_panel(3, 1, seed=5)


def tiny_train(**kw):
    base = dict(epochs=1, updates_per_epoch=[6], training_steps=3, controller_every=2)
    return TrainConfig(**(base | kw))


def test_pinball_examples():
    assert pinball(1.0, 0.4, 0.9) == pytest.approx(0.54)
    assert pinball(0.3, 0.3, 0.2) == 0.0
    assert pinball(0.0, 1.0, 0.9) == pytest.approx(0.1)


def test_pinball_tensor_matches_scalar_formula():
    rng = np.random.default_rng(0)
    y = rng.random((2, 5, 48))
    f = rng.random((2, 5, 48))
    q = rng.random((2, 5))
    from aqrnn.autodiff import Tensor
    got = pinball_tensor(y, Tensor(f), q).data
    ref = np.array([[np.mean([pinball(y[a, b, k], f[a, b, k], q[a, b]) for k in range(48)])
                     for b in range(5)] for a in range(2)])
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-15)


def test_rank_examples():
    t = rank_members([0.9, 0.2, 0.5], [0.1, 0.3, 0.2])
    np.testing.assert_array_equal(t.rank_p, [1, 3, 2])
    np.testing.assert_array_equal(t.rank_L, [1, 3, 2])
    assert not np.any(t.classification)
    np.testing.assert_array_equal(rank_members([0.9, 0.2], [0.3, 0.1]).classification, [1, -1])
    np.testing.assert_array_equal(rank_members([0.5, 0.5], [0.1, 0.2]).rank_p, [1, 2])


def test_member_loss_examples():
    assert member_loss(0.2, 2.0, 0, 0.05, 1.0) == pytest.approx(0.2)
    assert member_loss(0.2, 2.0, 1, 0.05, 1.0) == pytest.approx(0.3)
    assert member_loss(0.2, 2.0, -1, 0.05, 1.0) == pytest.approx(0.1)


def test_matched_ranks_leave_pinball_untouched():
    rng = np.random.default_rng(1)
    pin = rng.random(4)
    conf = 5.0 - pin  # most accurate is most confident
    cls = rank_members(conf, pin).classification
    assert np.sum(member_loss(pin, conf, cls, 0.7, 1.3)) == np.sum(pin)


def test_select_members():
    rng = np.random.default_rng(0)
    # the spec's members {4,1,3} and {2,3,1} in 0-based numbering
    assert set(select_members([3, 1, 2, 4], [0, 0, 0, 0], 3, rng, crit_prob=1.0)) == {3, 0, 2}
    assert set(select_members([0, 0, 0, 0], [0.3, 0.1, 0.2, 0.4], 3, rng, crit_prob=1e-12)) == {1, 2, 0}
    assert set(select_members([1, 2, 3, 4], [4, 3, 2, 1], 4, rng, crit_prob=0.5)) == {0, 1, 2, 3}
    for _ in range(20):  # evaluation ignores the criterion draw
        assert set(select_members([3, 1, 2, 4], [0.1, 0.2, 0.3, 0.4], 1, rng, 1e-12, training=False)) == {3}


def test_gamma1_examples():
    s = ControllerState(pinball_sum=0.5, pinball_count=10, over_conf_sum=0.4, over_count=2)
    assert update_gamma1(s, 5.0) == pytest.approx(0.05)
    assert update_gamma1(ControllerState(pinball_count=3, over_conf_sum=0.6, over_count=3), 5.0) == 0.0
    assert update_gamma1(ControllerState(gamma1=0.3, pinball_sum=1.0, pinball_count=1), 5.0) == 0.3
    assert update_gamma1(s, 1e12) < 1e-12


def test_gamma2_examples():
    s = ControllerState(gamma2=1.0, pinball_sum=0.5, pinball_count=10)
    assert update_gamma2(s) == pytest.approx(1.01)
    assert update_gamma2(ControllerState(gamma2=1.0, pinball_count=4)) == 1.0
    cfg = TrainConfig()
    for _ in range(10):
        s.pinball_sum, s.pinball_count = 0.5, 10
        close_window(s, cfg)
    assert s.gamma2 == pytest.approx(1.10)


def test_gamma2_ratio_rule():
    s = ControllerState(gamma1=1.0, gamma2=1.0, pinball_sum=1.0, pinball_count=1, over_conf_sum=0.1, over_count=1)
    assert update_gamma2(s, 0.01, "ratio", 5.0) == pytest.approx(1.01)  # ratio 10 above target
    s.over_conf_sum = 1.0
    assert update_gamma2(s, 0.01, "ratio", 5.0) == pytest.approx(0.99)


def test_schedules():
    cfg = TrainConfig()
    assert batch_sizes(cfg) == [2, 2, 5, 12, 25, 25, 25, 25]
    np.testing.assert_allclose(learning_rates(cfg), [1e-3] * 5 + [1e-3 / 3, 1.25e-4, 5e-5])
    u = updates_per_epoch(cfg)
    assert u[0] == 8320 and u[-1] == pytest.approx(3920, rel=0.01)
    assert updates_per_epoch(TrainConfig(epochs=2, updates_per_epoch=[7, 9])) == [7, 9]


def one_step_loss(panel, net, seed=0, B=1):
    model = QuantileModel(net, panel.n_series, seed=seed)
    cfg = TrainConfig(training_steps=1, warmup_steps=0)
    w = Windows(panel, 4, 2)
    q = np.full((model.n_teams, B), 0.5)
    return model, unrolled_loss(model, np.arange(B), w, 120, q, True, cfg, 0.1, 1.0)


def test_excluded_member_gets_zero_gradient(panel):
    model, run = one_step_loss(panel, NET)
    grads = backward(run.tape, run.loss, model.params)
    sel = run.selected[0][:, 0]
    assert sel.sum() == model.n_teams * 3
    for k, g in grads.items():
        if not k.startswith("pri."):
            continue
        for member in range(model.n_members):
            if sel[member]:
                assert np.any(g[member]), k
            else:
                assert not np.any(g[member]), k


def test_no_teams_is_plain_pinball(panel):
    net = NET.model_copy(update={"no_teams": True})
    model, run = one_step_loss(panel, net, B=2)
    assert run.confidence_sum == 0.0
    assert float(run.loss.data) == pytest.approx(run.pinball_sum / run.n_selected, abs=1e-15)


def test_loss_decomposes_into_pinball_and_confidence(panel):
    model, run = one_step_loss(panel, NET, B=3)
    total = float(run.loss.data) * run.n_selected
    assert total == pytest.approx(run.pinball_sum + run.confidence_sum, rel=1e-12)


def test_per_series_rows_frozen_when_absent(panel):
    model = QuantileModel(NET, panel.n_series, seed=1)
    before = {k: model.params[k].data.copy() for k in model.per_series_params()}
    state = TrainState(AdamState(model.params), ControllerState())
    w = Windows(panel, 4, 2)
    rng = np.random.default_rng(0)
    train_update(model, [0, 2], w, 60, rng, tiny_train(), state, 1e-2)
    for k, old in before.items():
        np.testing.assert_array_equal(model.params[k].data[1], old[1])
        assert np.any(model.params[k].data[[0, 2]] != old[[0, 2]])


def test_controller_timing_and_gamma1_arithmetic(panel):
    model = QuantileModel(NET, panel.n_series, seed=2)
    cfg = tiny_train(controller_every=3)
    state = TrainState(AdamState(model.params), ControllerState(gamma1=0.0, gamma2=1.0))
    w = Windows(panel, 4, 2)
    rng = np.random.default_rng(1)
    window = []
    for i in range(1, 7):
        before = (state.controller.gamma1, state.controller.gamma2)
        out = train_update(model, [0, 1], w, 50 + i, rng, cfg, state, 1e-3)
        window.append(out)
        after = (state.controller.gamma1, state.controller.gamma2)
        if i % 3:
            assert after == before
        else:
            lq = sum(o["pinball_sum"] for o in window) / sum(o["n_selected"] for o in window)
            p_over = sum(o["over_conf_sum"] for o in window) / sum(o["over_count"] for o in window)
            assert abs(after[0] - lq / (cfg.losses_ratio * p_over)) < 1e-12
            assert after[1] == pytest.approx(before[1] + 0.01)
            window = []


def run_config(**train):
    return RunConfig(network=NET, training=tiny_train(**train),
                     split=SplitConfig(train_end="2001-09-01", valid_end="2001-11-01", test_end="2002-01-01"))


def test_fit_is_deterministic(panel):
    cfg = run_config()
    s = cfg.split
    split = chrono_split(panel, s.train_end, s.valid_end, s.test_end)
    m1, h1 = fit(panel, split, cfg, seed=3)
    m2, h2 = fit(panel, split, cfg, seed=3)
    assert h1 == h2 and len(h1) == 3
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()


def test_fit_needs_enough_days(panel):
    cfg = run_config(training_steps=60)
    split = chrono_split(panel, "2001-02-01", "2001-06-01", "2002-01-01")
    with pytest.raises(ConfigError):
        fit(panel, split, cfg)


def test_log_line():
    row = {"batch": 20, "pinball": 0.1, "confidence": 0.01, "gamma1": 0.2, "gamma2": 1.01, "lr": 1e-3,
           "batch_size": 2}
    line = format_log_line(row)
    assert line.split("\t") == ["20", "0.1", "0.01", "0.2", "1.01", "0.001", "2"]
    assert len(LOG_FIELDS) == 7
