import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from planeagent.termination import (
    ATDataset,
    EmptyDataset,
    QTrajectory,
    TerminationConfig,
    TerminationModel,
    _prefix_loss_grad,
    baseline_stop,
    build_at_dataset,
    compute_adi,
    online_stop,
    optimal_stop,
    pad_sequences,
    predict_stop,
    stop_mae,
    threshold_rule_dataset,
    train_terminator,
)


def random_traj(rng, n=None) -> QTrajectory:
    n = n or int(rng.integers(1, 101))
    return QTrajectory(rng.normal(size=(n, 8)), rng.uniform(0, 40, n), rng.uniform(0, 15, n))


metric = arrays(float, st.integers(1, 60), elements=st.floats(0, 90, allow_nan=False))


def test_adi_examples():
    flat = QTrajectory(np.zeros((5, 8)), np.full(5, 7.0), np.full(5, 3.0))
    assert np.array_equal(compute_adi(flat), np.zeros(5))
    ang = np.array([10.0, 10.0, 10.0, 5.0, 5.0])
    dis = np.array([4.0, 4.0, 4.0, 2.0, 2.0])
    adi = compute_adi(QTrajectory(np.zeros((5, 8)), ang, dis))
    assert adi[0] == 0.0 and adi[3] == 7.0


@given(metric, st.data())
def test_adi_argmax_is_lowest_error(ang, data):
    dis = data.draw(arrays(float, len(ang), elements=st.floats(0, 30, allow_nan=False)))
    traj = QTrajectory(np.zeros((len(ang), 8)), ang, dis)
    assert len(compute_adi(traj)) == len(ang)
    s = optimal_stop(traj)
    adi = compute_adi(traj)
    assert ang[s] + dis[s] == np.min(ang + dis) and adi[s] == pytest.approx(adi.max(), abs=1e-9)
    # never worse than the max-step baseline
    last = baseline_stop(traj, "max_step")
    assert ang[s] + dis[s] <= ang[last] + dis[last]


def test_optimal_stop_examples():
    down = np.linspace(20, 0, 11)
    assert optimal_stop(QTrajectory(np.zeros((11, 8)), down, down / 2)) == 10
    vee = np.abs(np.arange(12) - 4.0)
    assert optimal_stop(QTrajectory(np.zeros((12, 8)), vee, vee)) == 4


def test_stops_match_brute_force(rng):
    for _ in range(100):
        tr = random_traj(rng)
        adi = compute_adi(tr)
        best = 0
        for t in range(len(tr)):
            if adi[t] > adi[best]:
                best = t
        assert optimal_stop(tr) == best
        lowest = 0
        for t in range(len(tr)):
            if max(tr.q[t]) < max(tr.q[lowest]):
                lowest = t
        assert baseline_stop(tr, "min_q") == lowest
        assert baseline_stop(tr, "max_step") == len(tr) - 1


def test_min_q_hand_scan():
    q = np.zeros((4, 8))
    q[:, 0] = [0.5, 0.2, 0.9, 0.3]
    q[2, 5] = -3.0  # a low non-max entry does not matter
    assert baseline_stop(QTrajectory(q, np.zeros(4), np.zeros(4)), "min_q") == 1
    with pytest.raises(ValueError):
        baseline_stop(QTrajectory(q, np.zeros(4), np.zeros(4)), "median")


def test_trajectory_validation():
    with pytest.raises(ValueError):
        QTrajectory(np.zeros((3, 8)), np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        QTrajectory(np.zeros((0, 8)), [], [])


def test_dataset_build_and_csv(rng, tmp_path):
    trajs = [random_traj(rng) for _ in range(7)]
    ds = build_at_dataset(trajs, [f"c{i}" for i in range(7)])
    assert len(ds) == 7 and ds.q.shape == (7, 100, 8)
    assert np.all(ds.labels < ds.lengths)
    assert np.array_equal(ds.lengths, [len(t) for t in trajs])
    ds.write_csv(tmp_path / "d.csv", tmp_path / "l.json", trajs)
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert len(rows) == 1 + sum(len(t) for t in trajs)
    assert json.loads((tmp_path / "l.json").read_text()) == {f"c{i}": int(l) for i, l in enumerate(ds.labels)}
    sub = ds.subset([2, 4])
    assert sub.ids == ["c2", "c4"] and np.array_equal(sub.labels, ds.labels[[2, 4]])


def test_pad_sequences_truncates():
    q, mask = pad_sequences([np.ones((3, 8)), np.ones((7, 8))], 5)
    assert q.shape == (2, 5, 8) and mask.sum(1).tolist() == [3, 5] and q[0, 3:].sum() == 0


def test_threshold_rule_labels():
    ds = threshold_rule_dataset(50, seed=3)
    qmax = ds.q.max(axis=2)
    for i, lab in enumerate(ds.labels):
        assert np.all(qmax[i, :lab] >= 0) and (qmax[i, lab] < 0 or lab == 99)
    assert np.array_equal(threshold_rule_dataset(5, 9).q, threshold_rule_dataset(5, 9).q)


def test_empty_dataset():
    empty = ATDataset(np.zeros((0, 100, 8)), np.zeros((0, 100), bool), np.zeros(0, int), [])
    with pytest.raises(EmptyDataset):
        train_terminator(empty)
    with pytest.raises(ValueError):
        TerminationConfig("gru")


def test_fc_prefix_path_matches_explicit_masking(rng):
    m = TerminationModel("fc", hidden=6, max_len=12, seed=3, q_mean=0.1, q_std=0.7)
    q, mask = pad_sequences([rng.normal(size=(9, 8))], 12)
    fast = m.prefix_outputs(q, mask)[0]
    for t in range(9):
        pm = mask.copy()
        pm[0, t + 1 :] = False
        flat = m.features(q, pm).reshape(1, -1)
        assert fast[t] == pytest.approx(m.net.forward(flat)[0, 0], abs=1e-12)


@pytest.mark.parametrize("variant", ["fc", "rnn", "lstm"])
def test_prefix_loss_gradient(variant, rng):
    m = TerminationModel(variant, hidden=5, max_len=10, seed=1)
    q, mask = pad_sequences([rng.normal(size=(n, 8)) for n in (10, 6, 3)], 10)
    feats = m.features(q, mask)
    labels = np.array([4, 2, 0])
    _prefix_loss_grad(m, feats, mask, labels)
    grads = [g.copy() for g in m.net.grads()]
    worst = 0.0
    for p, g in zip(m.net.params(), grads):
        for idx in list(np.ndindex(p.shape))[:: max(1, p.size // 15)]:
            old = p[idx]
            p[idx] = old + 1e-6
            up = _prefix_loss_grad(m, feats, mask, labels)
            p[idx] = old - 1e-6
            dn = _prefix_loss_grad(m, feats, mask, labels)
            p[idx] = old
            num = (up - dn) / 2e-6
            worst = max(worst, abs(num - g[idx]) / max(1e-6, abs(num) + abs(g[idx])))
    assert worst < 1e-4


@pytest.mark.parametrize("variant", ["fc", "lstm"])
def test_single_example_is_memorised(variant, rng):
    ds = build_at_dataset([random_traj(rng, 30)], max_len=30)
    _, hist = train_terminator(ds, TerminationConfig(variant, hidden=16, epochs=200, batch_size=1, lr=1e-2))
    # L1 under Adam reaches the optimum and then chatters around it
    assert min(hist) < 0.01
    assert np.isfinite(hist).all() and np.polyfit(np.arange(len(hist)), hist, 1)[0] <= 0


def test_stop_rules_clamp_and_are_deterministic(rng):
    m = TerminationModel("lstm", hidden=4, max_len=20, seed=0)
    m.net.layers[-1].params["W"][...] = 0.0
    m.net.layers[-1].params["b"][...] = -0.5
    seq = rng.normal(size=(15, 8))
    assert predict_stop(m, seq) == 0 and online_stop(m, seq) == 0
    m.net.layers[-1].params["b"][...] = 5.0
    assert predict_stop(m, seq) == 14 and online_stop(m, seq) == 14
    m2 = TerminationModel("lstm", hidden=4, max_len=20, seed=7)
    assert predict_stop(m2, seq) == predict_stop(m2, seq) and online_stop(m2, seq) == online_stop(m2, seq)


def test_online_stop_returns_prediction_at_trigger():
    m = TerminationModel("fc", hidden=2, max_len=10)
    m.predict_raw = lambda q: np.array([7, 6, 5, 1, 0, 0])
    # step 3 is the first whose prediction points at or before itself
    assert online_stop(m, np.zeros((6, 8))) == 1
    m.predict_raw = lambda q: np.array([9, 9, 9])
    assert online_stop(m, np.zeros((3, 8))) == 2


def test_model_round_trip(tmp_path, rng):
    m = TerminationModel("rnn", hidden=3, max_len=15, seed=4, q_mean=0.3, q_std=2.0)
    m.save(tmp_path / "m.ckpt")
    back = TerminationModel.load(tmp_path / "m.ckpt")
    seq = rng.normal(size=(11, 8))
    assert np.array_equal(back.predict_raw(seq), m.predict_raw(seq))
    assert (back.variant, back.q_mean, back.q_std) == ("rnn", 0.3, 2.0)


def test_rule_model_stops_near_rule_step(rule_models):
    val, model = rule_models["val"], rule_models["lstm"]
    stops = np.array([online_stop(model, val.q[i]) for i in range(len(val))])
    assert np.mean(np.abs(stops - val.labels) <= 2) >= 0.8
