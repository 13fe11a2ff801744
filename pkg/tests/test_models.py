"""Architectures, init determinism, the optimizer, and the training loop."""

import numpy as np
import pytest

from admmforge.data import Dataset, xor_dataset
from admmforge.errors import InputError, NumericError
from admmforge.models import (build_lenet5, build_mlp, evaluate, step_decay,
                              train)
from admmforge.optim import SGD
from admmforge.tensor import Tensor


def test_lenet5_weight_count():
    net = build_lenet5()
    assert net.weight_count() == 430_500


def test_lenet5_forward_finite_on_zeros():
    net = build_lenet5()
    out = net.forward(np.zeros((1, 1, 28, 28), dtype=np.float32))
    assert out.data.shape == (1, 10)
    assert np.isfinite(out.data).all()


def test_mlp_shapes_and_param_count():
    net = build_mlp([4, 3])
    assert len([s for s in net.specs if s.kind == "dense"]) == 1
    params = net.parameters()
    assert sum(p.data.size for p in params.values()) == 15  # 4*3 weights + 3 biases

    net2 = build_mlp([2, 2, 2])
    assert len([s for s in net2.specs if s.kind == "dense"]) == 2


def test_mlp_needs_two_dims():
    with pytest.raises(InputError):
        build_mlp([5])


def test_rebuild_same_seed_bit_identical():
    a = build_lenet5(seed=11).state_arrays()
    b = build_lenet5(seed=11).state_arrays()
    assert set(a) == set(b)
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_rebuild_different_seed_differs():
    a = build_lenet5(seed=1).weight("conv1").data
    b = build_lenet5(seed=2).weight("conv1").data
    assert not np.array_equal(a, b)


def test_xor_trains_to_100_percent():
    net = build_mlp([2, 8, 2], seed=0)
    train(net, xor_dataset(), epochs=300, lr=0.5, momentum=0.9,
          batch_size=4, seed=0, lr_schedule=lambda e: 0.5)
    assert evaluate(net, xor_dataset()) == 1.0


def test_zero_epochs_leaves_net_unchanged():
    net = build_mlp([2, 4, 2], seed=0)
    before = {k: v.copy() for k, v in net.state_arrays().items()}
    trace = train(net, xor_dataset(), epochs=0)
    assert trace.test_accuracy == []
    after = net.state_arrays()
    for k in before:
        assert np.array_equal(before[k], after[k])


def test_empty_dataset_rejected():
    net = build_mlp([2, 2], seed=0)
    empty = Dataset(np.zeros((0, 2), dtype=np.float32),
                    np.zeros(0, dtype=np.int64), classes=2)
    with pytest.raises(InputError):
        train(net, empty, epochs=1)


def test_best_so_far_trace_monotone():
    net = build_mlp([2, 8, 2], seed=0)
    trace = train(net, xor_dataset(), epochs=40, lr=0.5, batch_size=4,
                  seed=0, eval_dataset=xor_dataset(), lr_schedule=lambda e: 0.5)
    best = trace.best_so_far()
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))


def test_eval_invariant_to_batch_size(rng):
    net = build_mlp([6, 12, 3], seed=4)
    x = rng.standard_normal((97, 6)).astype(np.float32)
    y = rng.integers(0, 3, size=97)
    ds = Dataset(x, y, classes=3)
    accs = {evaluate(net, ds, batch_size=b) for b in (1, 7, 32, 97, 500)}
    assert len(accs) == 1


def test_step_decay_schedule():
    lr_at = step_decay(0.1, 20)
    assert lr_at(0) == pytest.approx(0.1)
    assert lr_at(9) == pytest.approx(0.1)
    assert lr_at(10) == pytest.approx(0.01)
    assert lr_at(15) == pytest.approx(0.001)


def test_sgd_plain_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="w")
    p.grad = np.array([0.5, -0.5])
    SGD(lr=0.1).step({"w": p})
    assert np.allclose(p.data, [0.95, 2.05])


def test_sgd_zero_grad_no_change():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="w")
    p.grad = np.zeros(2)
    SGD(lr=0.1).step({"w": p})
    assert np.array_equal(p.data, [1.0, 2.0])


def test_sgd_momentum_matches_hand_recurrence():
    # v1 = g1; w1 = w0 - lr*v1 ; v2 = mu*v1 + g2; w2 = w1 - lr*v2
    w0, g1, g2, lr, mu = 1.0, 0.3, -0.2, 0.1, 0.9
    p = Tensor(np.array([w0]), requires_grad=True, name="w")
    opt = SGD(lr=lr, momentum=mu)
    p.grad = np.array([g1])
    opt.step({"w": p})
    p.grad = np.array([g2])
    opt.step({"w": p})
    v1 = g1
    w1 = w0 - lr * v1
    v2 = mu * v1 + g2
    w2 = w1 - lr * v2
    assert p.data[0] == pytest.approx(w2, rel=1e-6)


def test_sgd_weight_decay_term():
    # v = g + wd*w ; w' = w - lr*v
    p = Tensor(np.array([2.0]), requires_grad=True, name="w")
    p.grad = np.array([0.0])
    SGD(lr=0.1, weight_decay=0.01).step({"w": p})
    assert p.data[0] == pytest.approx(2.0 - 0.1 * (0.01 * 2.0))


def test_sgd_nan_gradient_names_layer():
    p = Tensor(np.array([1.0]), requires_grad=True, name="conv9.weight")
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="conv9.weight"):
        SGD(lr=0.1).step({"conv9.weight": p})


def test_train_divergence_reports_epoch():
    # lr*weight_decay >> 2 makes the weight recurrence explode to overflow
    net = build_mlp([2, 4, 2], seed=0)
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="epoch"):
        train(net, xor_dataset(), epochs=50, lr=1e4, momentum=0.0,
              weight_decay=1.0, batch_size=4, seed=0, lr_schedule=lambda e: 1e4)


def test_training_deterministic_given_seed():
    def run():
        net = build_mlp([2, 8, 2], seed=0)
        train(net, xor_dataset(), epochs=25, lr=0.5, batch_size=2, seed=7,
              lr_schedule=lambda e: 0.5)
        return net.state_arrays()
    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k])
