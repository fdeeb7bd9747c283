import datetime as dt
import warnings

import numpy as np
import pytest

from aqrnn import autodiff as ad
from aqrnn.config import NetworkConfig
from aqrnn.dataset import Windows, synth_panel
from aqrnn.errors import DimensionError, FormatError
from aqrnn.network import (QuantileModel, Rollout, load_model, patchify, predict, save_model, sort_over_levels,
                           team_aggregate, week_embedding, week_index)

SMALL = dict(dilations=[[1], [2]], patch_hidden=2, team_size=2, team_top_k=1)


@pytest.fixture(scope="module")
def panel():
    return synth_panel(4, 1, seed=11)


def small_model(n_series=4, seed=0, **kw):
    return QuantileModel(NetworkConfig(**(SMALL | kw)), n_series, seed=seed)


def test_patchify():
    days = [np.full(24, i) for i in range(4)]
    np.testing.assert_array_equal(patchify(np.concatenate(days), 4), np.stack(days))
    x = np.arange(24.0)
    np.testing.assert_array_equal(patchify(x, 1)[0], x)
    with pytest.raises(DimensionError):
        patchify(np.zeros(50), 2)


def test_week_embedding():
    for year in (2001, 2004, 2010):
        assert week_index(dt.date(year, 1, 4)) == 1
    assert dt.date(2004, 12, 31).isocalendar()[1] == 53
    assert week_index(dt.date(2004, 12, 31)) == 52
    assert not np.any(week_embedding(dt.date(2004, 3, 1), np.zeros((52, 3))).data)
    w = np.arange(52 * 3, dtype=float).reshape(52, 3)
    np.testing.assert_array_equal(week_embedding(dt.date(2001, 1, 4), w).data[0], w[0])


def test_dimensional_contract():
    m = QuantileModel(NetworkConfig(), 7)
    assert m.params["pri.head_W"].shape[-1] == 49
    assert m.params["ctx.head_W"].shape[-1] == 2
    assert m.pad_primary.size == m.pad_context.size == 24
    # every base component appears once in order, padding draws from them
    assert list(m.pad_primary[:15]) == list(range(15)) and m.pad_primary.max() < 15
    assert list(m.pad_context[:4]) == list(range(4)) and m.pad_context.max() < 4
    assert m.params["adapt.global_W"].shape == (14, 10)
    assert m.n_members == 12


def test_context_lengths(panel):
    model = small_model()
    w = Windows(panel, 4, 2)
    x, mean = w.inputs(10)
    states = model.new_states("ctx.", 1, 4)
    flat = model.context_step(x, mean, model.date_vector(panel.dates[9]), states)
    assert flat.shape == (1, 8)
    assert model.adapt_context(flat, [0, 2]).shape == (2, 10)
    with pytest.raises(KeyError):
        model.adapt_context(flat, [4])


def test_adapter_variants():
    rng = np.random.default_rng(0)
    flat = ad.Tensor(rng.normal(size=(1, 8)))
    model = small_model()
    for k in ("adapt.global_W", "adapt.global_b", "adapt.series_W", "adapt.series_b"):
        model.params[k].data[:] = 0
    assert not np.any(model.adapt_context(flat, [1]).data)

    full = small_model(seed=1)
    only_series = small_model(seed=1, no_global_adapter=True)
    only_global = small_model(seed=1, no_per_series_adapter=True)
    total = full.adapt_context(flat, [1, 3]).data
    np.testing.assert_allclose(only_series.adapt_context(flat, [1, 3]).data
                               + only_global.adapt_context(flat, [1, 3]).data, total, rtol=0, atol=1e-15)

    seq = small_model(seed=2, sequential_adapters=True)
    p = seq.params
    glob = flat.data @ p["adapt.global_W"].data + p["adapt.global_b"].data
    expect = glob @ p["adapt.series_W"].data[3] + p["adapt.series_b"].data[3]
    np.testing.assert_allclose(seq.adapt_context(flat, [3]).data, expect, rtol=0, atol=1e-14)


def primary_outputs(model, panel, q, day=10, series=(0, 1)):
    rollout = Rollout(model, np.asarray(series))
    w = Windows(panel, 4, 2)
    qs = np.full((model.n_teams, len(series)), q)
    forecast, conf, _ = rollout.step(w, day, qs)
    return forecast.data, conf.data


def test_zero_head(panel):
    model = small_model()
    model.params["pri.head_W"].data[:] = 0
    model.params["pri.head_b"].data[:] = 0
    f, p = primary_outputs(model, panel, 0.3)
    assert not np.any(f)
    np.testing.assert_allclose(p, np.log(2.0))


def test_leaky_output(panel):
    model = small_model()
    model.params["pri.head_W"].data[:] = 0
    model.params["pri.head_b"].data[:] = -0.5
    f, _ = primary_outputs(model, panel, 0.3)
    np.testing.assert_allclose(f, -0.005)


def test_quantile_level_changes_output(panel):
    model = small_model()
    a, _ = primary_outputs(model, panel, 0.2)
    b, _ = primary_outputs(model, panel, 0.2 + 1e-3)
    assert np.abs(a - b).max() > 0


def test_members_independent_of_batched_layout(panel):
    """A team member evaluated inside the batched stack equals a stand-alone
    single-member model holding the same parameters."""
    teams = small_model(team_size=3, team_top_k=1)
    solo = small_model(no_teams=True)
    pick = [t * teams.team_size + 1 for t in range(teams.n_teams)]
    for k, v in teams.params.items():
        solo.params[k].data = v.data[pick].copy() if k.startswith("pri.") else v.data.copy()
    solo.pad_primary, solo.pad_context = teams.pad_primary, teams.pad_context
    ra, rb = Rollout(teams, np.arange(3)), Rollout(solo, np.arange(3))
    w = Windows(panel, 4, 2)
    q = np.array([[0.1, 0.2, 0.25], [0.4, 0.5, 0.6], [0.7, 0.9, 0.99]])
    for day in range(10, 16):
        fa, ca, _ = ra.step(w, day, q)
        fb, cb, _ = rb.step(w, day, q)
        np.testing.assert_allclose(fa.data[pick], fb.data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(ca.data[pick], cb.data, rtol=0, atol=1e-12)


def test_team_median():
    f = np.array([0.2, 0.5, 0.9, 7.0]).reshape(4, 1, 1)
    p = np.array([3.0, 2.0, 1.0, 0.5]).reshape(4, 1)
    assert team_aggregate(f, p, 1, 3)[0, 0, 0] == 0.5


def test_odd_median_is_a_member_value():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(8, 5, 48))
    agg = team_aggregate(f, rng.random((8, 5)), 2, 3)
    for t in range(2):
        members = f[4 * t:4 * t + 4]
        assert np.all(np.any(members == agg[t][None], axis=0))


def test_denormalize_and_clamp(panel):
    w = Windows(panel, 4, 2)
    model = small_model()
    model.params["pri.head_W"].data[:] = 0
    model.params["pri.head_b"].data[:] = 1.0
    out = predict(model, w, [20, 21], [0.1, 0.5])
    expect = np.stack([w.means[:, 20], w.means[:, 21]], axis=1)
    np.testing.assert_allclose(out, np.broadcast_to(expect[:, :, None, None], out.shape), rtol=1e-15)
    model.params["pri.head_b"].data[:] = -0.05
    assert not np.any(predict(model, w, [20], [0.5]))
    with pytest.raises(ValueError):
        predict(model, w, [20], [1.0])


def test_predictions_nonnegative(panel):
    w = Windows(panel, 4, 2)
    out = predict(small_model(seed=5), w, np.arange(30, 40), [0.01, 0.5, 0.99])
    assert out.shape == (4, 10, 3, 48)
    assert out.min() >= 0


def test_no_context_ignores_other_series(panel):
    model = small_model(no_context=True)
    w = Windows(panel, 4, 2)
    base = predict(model, w, [40], [0.5], series=[0])
    other = synth_panel(4, 1, seed=11)
    other.values[1:] = other.values[1:][:, ::-1]
    moved = predict(model, Windows(other, 4, 2), [40], [0.5], series=[0])
    np.testing.assert_array_equal(base, moved)
    with_ctx = small_model()
    a = predict(with_ctx, w, [40], [0.5], series=[0])
    b = predict(with_ctx, Windows(other, 4, 2), [40], [0.5], series=[0])
    assert np.abs(a - b).max() > 0


def test_no_teams_is_single_member():
    m = small_model(no_teams=True)
    assert (m.top_k, m.team_size) == (1, 1)
    assert m.params["pri.0.weight"].shape[0] == m.n_teams


def test_no_patches_single_wide_stream():
    m = small_model(no_patches=True)
    assert m.streams == 1 and m.stream_in == 5 * 24


def test_save_load_round_trip(tmp_path, panel):
    model = small_model(seed=3)
    path = tmp_path / "m.aqm"
    save_model(model, path)
    loaded = load_model(path)
    for k, t in model.params.items():
        np.testing.assert_array_equal(loaded.params[k].data, t.data.astype(np.float32).astype(np.float64))
    w = Windows(panel, 4, 2)
    a = predict(model, w, [30], [0.05, 0.5, 0.95])
    b = predict(loaded, w, [30], [0.05, 0.5, 0.95])
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-6)
    save_model(loaded, tmp_path / "again.aqm")
    assert (tmp_path / "again.aqm").read_bytes() == path.read_bytes()


def test_load_rejects_bad_files(tmp_path):
    path = tmp_path / "m.aqm"
    save_model(small_model(), path)
    blob = path.read_bytes()
    (tmp_path / "magic.aqm").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_model(tmp_path / "magic.aqm")
    (tmp_path / "version.aqm").write_bytes(blob[:4] + b"\x09\x00" + blob[6:])
    with pytest.raises(FormatError, match="version"):
        load_model(tmp_path / "version.aqm")
    (tmp_path / "short.aqm").write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_model(tmp_path / "short.aqm")
    (tmp_path / "long.aqm").write_bytes(blob + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_model(tmp_path / "long.aqm")


def test_stored_settings_win(tmp_path):
    path = tmp_path / "m.aqm"
    save_model(small_model(no_teams=True), path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loaded = load_model(path, expected=NetworkConfig(**SMALL))
    assert loaded.config.no_teams
    assert any("no_teams" in str(c.message) for c in caught)


def test_sort_over_levels_follows_level_order():
    # levels given out of order: 0.9, 0.1, 0.5
    pred = np.array([1.0, 3.0, 2.0, 5.0, 4.0, 6.0]).reshape(2, 1, 3, 1)
    out = sort_over_levels(pred, [0.9, 0.1, 0.5])
    # value at 0.1 <= value at 0.5 <= value at 0.9
    np.testing.assert_array_equal(out[0, 0, :, 0], [3.0, 1.0, 2.0])
    np.testing.assert_array_equal(out[1, 0, :, 0], [6.0, 4.0, 5.0])
    np.testing.assert_array_equal(np.sort(out, axis=2), np.sort(pred, axis=2))
