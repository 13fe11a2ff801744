"""ADMM loop mechanics on small networks."""

import numpy as np
import pytest

from admmforge.admm import (AdmmState, RhoSchedule, augmented_loss,
                            dual_update, penalty_terms, run_admm,
                            solve_subproblem1, solve_subproblem2)
from admmforge.data import Dataset
from admmforge.errors import ConfigError
from admmforge.models import build_mlp
from admmforge.projections import Cardinality, LevelGrid
from admmforge.tensor import softmax_cross_entropy
from conftest import central_diff, rel_err


def blob_dataset(n=240, seed=0):
    """Three well-separated gaussian blobs in 4-D."""
    rng = np.random.default_rng(seed)
    centers = np.array([[2, 0, 0, 0], [0, 2, 0, 0], [0, 0, 2, 0]], dtype=np.float32)
    labels = rng.integers(0, 3, size=n)
    x = centers[labels] + rng.normal(0, 0.45, size=(n, 4)).astype(np.float32)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), classes=3)


@pytest.fixture
def small_net_state():
    net = build_mlp([4, 12, 3], seed=1)
    constraints = {"fc1": Cardinality(alpha=10), "fc2": Cardinality(alpha=9)}
    schedule = RhoSchedule(rho0=1e-2, growth=1.5, iterations=8)
    state = AdmmState.initialize(net, constraints, schedule)
    return net, state, constraints, schedule


def test_augmented_equals_task_when_w_is_z_and_u_zero(small_net_state):
    net, state, _, _ = small_net_state
    for name, st in state.layers.items():
        st.Z = net.weight(name).data.astype(np.float64).copy()
        st.U = np.zeros_like(st.Z)
    ds = blob_dataset(32)
    batch = (ds.images, ds.labels)
    aug = augmented_loss(net, batch, state).item()
    task = softmax_cross_entropy(net.forward(ds.images), ds.labels).item()
    assert aug == pytest.approx(task, abs=1e-12)


def test_penalty_gradient_matches_finite_differences():
    net = build_mlp([4, 6, 3], seed=2, dtype=np.float64)
    constraints = {"fc1": Cardinality(alpha=8), "fc2": Cardinality(alpha=6)}
    state = AdmmState.initialize(net, constraints, RhoSchedule(rho0=0.3))
    rng = np.random.default_rng(3)
    for st in state.layers.values():   # move off the projection point
        st.U = rng.standard_normal(st.U.shape) * 0.2
    loss = penalty_terms(net, state)
    loss.backward()
    for name, st in state.layers.items():
        w = net.weight(name)
        fd = central_diff(
            lambda: sum(0.5 * s.rho * ((net.weight(n).data - s.Z + s.U) ** 2).sum()
                        for n, s in state.layers.items()),
            w.data)
        assert rel_err(w.grad, fd) <= 1e-4
        # analytic form rho*(W - Z + U)
        assert np.allclose(w.grad, st.rho * (w.data - st.Z + st.U), atol=1e-9)


def test_doubling_rho_doubles_penalty(small_net_state):
    net, state, _, _ = small_net_state
    ds = blob_dataset(16)
    batch = (ds.images, ds.labels)
    task = softmax_cross_entropy(net.forward(ds.images), ds.labels).item()
    p1 = augmented_loss(net, batch, state).item() - task
    for st in state.layers.values():
        st.rho *= 2.0
    p2 = augmented_loss(net, batch, state).item() - task
    assert p2 == pytest.approx(2.0 * p1, rel=1e-5)


def test_subproblem1_zero_task_converges_to_z_minus_u():
    net = build_mlp([4, 8, 3], seed=5)
    constraints = {"fc1": Cardinality(alpha=6), "fc2": Cardinality(alpha=5)}
    state = AdmmState.initialize(net, constraints,
                                 RhoSchedule(rho0=100.0, rho_max=200.0))
    rng = np.random.default_rng(0)
    for st in state.layers.values():
        st.U = rng.standard_normal(st.U.shape) * 0.1
    solve_subproblem1(net, None, state, epochs_per_iter=8, lr=1e-3,
                      momentum=0.0, rng=rng)
    for name, st in state.layers.items():
        target = st.Z - st.U
        w = net.weight(name).data.astype(np.float64)
        gap = np.linalg.norm(w - target) / np.linalg.norm(target)
        assert gap < 0.01


def test_subproblem1_never_touches_z_u(small_net_state):
    net, state, _, _ = small_net_state
    z_before = {n: st.Z.copy() for n, st in state.layers.items()}
    u_before = {n: st.U.copy() for n, st in state.layers.items()}
    solve_subproblem1(net, blob_dataset(64), state, epochs_per_iter=1,
                      lr=0.05, batch_size=16,
                      rng=np.random.default_rng(0))
    for n in state.layers:
        assert np.array_equal(z_before[n], state.layers[n].Z)
        assert np.array_equal(u_before[n], state.layers[n].U)


def test_subproblem1_decreases_augmented_loss():
    net = build_mlp([4, 12, 3], seed=1)
    ds = blob_dataset(240, seed=1)
    constraints = {"fc1": Cardinality(alpha=12), "fc2": Cardinality(alpha=9)}
    state = AdmmState.initialize(net, constraints, RhoSchedule())
    trace = solve_subproblem1(net, ds, state, epochs_per_iter=3, lr=0.05,
                              batch_size=24, rng=np.random.default_rng(0))
    assert trace.train_loss[-1] < trace.train_loss[0]


def test_subproblem2_projection_and_feasibility():
    net = build_mlp([4, 8, 3], seed=7)
    constraints = {"fc1": Cardinality(alpha=5)}
    state = AdmmState.initialize(net, constraints, RhoSchedule())
    st = state.layers["fc1"]
    st.U = np.random.default_rng(1).standard_normal(st.U.shape) * 0.3
    solve_subproblem2(net, state)
    w = net.weight("fc1").data.astype(np.float64)
    expected_keep = np.argsort(-np.abs(w + st.U).ravel(), kind="stable")[:5]
    assert np.count_nonzero(st.Z) <= 5
    assert set(np.flatnonzero(st.Z.ravel())) <= set(expected_keep)


def test_subproblem2_feasible_w_with_zero_u_is_identity():
    net = build_mlp([4, 8, 3], seed=8)
    w = net.weight("fc1")
    w.data = np.where(np.abs(w.data) >= np.sort(np.abs(w.data.ravel()))[-4],
                      w.data, 0)
    alpha = int(np.count_nonzero(w.data))
    state = AdmmState.initialize(net, {"fc1": Cardinality(alpha=alpha)},
                                 RhoSchedule())
    solve_subproblem2(net, state)
    assert np.allclose(state.layers["fc1"].Z, w.data)


def test_quant_subproblem2_lands_on_levels():
    net = build_mlp([4, 8, 3], seed=9)
    state = AdmmState.initialize(net, {"fc1": LevelGrid(bit_width=2)},
                                 RhoSchedule())
    solve_subproblem2(net, state)
    st = state.layers["fc1"]
    assert np.isin(st.Z, np.asarray(st.levels.values)).all()


def test_dual_update_rules():
    net = build_mlp([3, 4, 2], seed=0)
    state = AdmmState.initialize(net, {"fc1": Cardinality(alpha=12)},
                                 RhoSchedule())
    st = state.layers["fc1"]
    # W == Z -> U unchanged
    st.Z = net.weight("fc1").data.astype(np.float64).copy()
    u0 = st.U.copy()
    dual_update(net, state)
    assert np.allclose(st.U, u0)
    # U = 0, W - Z = d -> U = d
    d = np.full_like(st.Z, 0.25)
    st.Z = net.weight("fc1").data.astype(np.float64) - d
    st.U = np.zeros_like(st.Z)
    dual_update(net, state)
    assert np.allclose(st.U, d)


def test_dual_update_three_scalar_steps():
    # hand recurrence U_k = U_{k-1} + W_k - Z_k on scalars
    ws = [1.0, 0.4, -0.2]
    zs = [0.8, 0.5, -0.1]
    u = 0.0
    expected = []
    for w_, z_ in zip(ws, zs):
        u = u + w_ - z_
        expected.append(u)
    net = build_mlp([1, 1], seed=0)
    state = AdmmState.initialize(net, {"fc1": Cardinality(alpha=1)},
                                 RhoSchedule())
    st = state.layers["fc1"]
    st.U = np.zeros((1, 1))
    got = []
    for w_, z_ in zip(ws, zs):
        net.weight("fc1").data = np.array([[w_]], dtype=np.float32)
        st.Z = np.array([[z_]])
        dual_update(net, state)
        got.append(float(st.U[0, 0]))
    assert got == pytest.approx(expected, abs=1e-6)


def test_run_admm_zero_iterations_is_noop():
    net = build_mlp([4, 8, 3], seed=3)
    before = {k: v.copy() for k, v in net.state_arrays().items()}
    trace = run_admm(net, blob_dataset(32), {"fc1": Cardinality(alpha=6)},
                     RhoSchedule(iterations=0), seed=0)
    assert trace.records == []
    for k, v in net.state_arrays().items():
        assert np.array_equal(before[k], v)


def test_run_admm_constraint_on_unknown_layer_rejected():
    net = build_mlp([4, 8, 3], seed=3)
    with pytest.raises(ConfigError):
        run_admm(net, blob_dataset(32), {"nope": Cardinality(alpha=6)},
                 RhoSchedule(iterations=1), epochs_per_iter=1, seed=0)


def test_run_admm_trace_complete_and_rho_monotone():
    net = build_mlp([4, 16, 3], seed=4)
    ds = blob_dataset(240, seed=2)
    constraints = {"fc1": Cardinality(alpha=16), "fc2": Cardinality(alpha=12)}
    sched = RhoSchedule(rho0=5e-3, growth=2.0, iterations=6)
    trace = run_admm(net, ds, constraints, sched, epochs_per_iter=1,
                     lr=0.05, batch_size=24, seed=0, tol=0.0)
    assert trace.iterations == 6
    rhos = [r.rho for r in trace.records]
    assert all(b >= a for a, b in zip(rhos, rhos[1:]))
    for rec in trace.records:
        assert set(rec.gaps) == set(constraints)
    assert trace.initial_gaps and set(trace.initial_gaps) == set(constraints)


def test_run_admm_gap_shrinks_and_converges():
    net = build_mlp([4, 16, 3], seed=4)
    ds = blob_dataset(300, seed=2)
    from admmforge.models import train
    train(net, ds, epochs=5, lr=0.05, batch_size=30, seed=0,
          lr_schedule=lambda e: 0.05)
    constraints = {"fc1": Cardinality(alpha=20), "fc2": Cardinality(alpha=15)}
    sched = RhoSchedule(rho0=5e-3, growth=2.0, iterations=40, rho_max=2.0)
    trace = run_admm(net, ds, constraints, sched, epochs_per_iter=2,
                     lr=0.05, batch_size=30, seed=0, tol=1e-2)
    final = trace.records[-1].max_gap
    assert final < max(trace.initial_gaps.values())
    assert trace.converged, f"gap stuck at {final}"
    # early stop: converged before exhausting the iteration budget
    assert trace.iterations < 40


def test_run_admm_determinism():
    def run():
        net = build_mlp([4, 12, 3], seed=6)
        trace = run_admm(net, blob_dataset(120, seed=5),
                         {"fc1": Cardinality(alpha=10)},
                         RhoSchedule(iterations=3), epochs_per_iter=1,
                         lr=0.05, batch_size=24, seed=9)
        return trace, net.state_arrays()
    t1, s1 = run()
    t2, s2 = run()
    assert [r.gaps for r in t1.records] == [r.gaps for r in t2.records]
    assert [r.train_loss for r in t1.records] == [r.train_loss for r in t2.records]
    for k in s1:
        assert np.array_equal(s1[k], s2[k])


def test_huge_rho_single_iteration_tracks_projection():
    # emulate the growth -> infinity limit: one iteration, big rho, no task
    net = build_mlp([4, 8, 3], seed=10)
    state = AdmmState.initialize(net, {"fc1": Cardinality(alpha=4)},
                                 RhoSchedule(rho0=100.0, iterations=1,
                                             rho_max=200.0))
    solve_subproblem1(net, None, state, epochs_per_iter=10, lr=1e-3,
                      momentum=0.0, rng=np.random.default_rng(0))
    target = state.layers["fc1"].Z - state.layers["fc1"].U
    w = net.weight("fc1").data.astype(np.float64)
    assert np.linalg.norm(w - target) / np.linalg.norm(target) < 0.01


def test_trace_csv_roundtrip(tmp_path):
    net = build_mlp([4, 12, 3], seed=6)
    trace = run_admm(net, blob_dataset(120, seed=5),
                     {"fc1": Cardinality(alpha=10)},
                     RhoSchedule(iterations=2), epochs_per_iter=1,
                     lr=0.05, batch_size=24, seed=9,
                     eval_dataset=blob_dataset(60, seed=6))
    path = tmp_path / "trace.csv"
    trace.save_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:4] == ["iteration", "layer", "r", "rho"]
    assert len(lines) == 1 + 1 + trace.iterations  # header + r0 + per-iter
