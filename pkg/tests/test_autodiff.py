import math

import numpy as np
import pytest

from sci_reid.autodiff import (
    Adam,
    AdamState,
    LrSchedule,
    Tensor,
    adam_step,
    check_gradients,
    concat,
    cosine_sim,
    cross_entropy,
    exp,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    quick_gelu,
    sigmoid,
    softmax,
    sqrt,
    stack,
    take_rows,
    tanh,
    transpose,
)
from sci_reid.errors import ContractError, DegenerateVectorError, DimensionError

from oracles import cross_entropy_rows

SEEDS = range(10)


def rand(rng, *shape, scale=1.0, grad=True):
    return Tensor(rng.normal(0.0, scale, shape).astype(np.float32), requires_grad=grad)


# -- matmul ------------------------------------------------------------------------------

def test_matmul_identity_and_zero():
    A = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(A)).data, A)
    assert not (Tensor(A) @ Tensor(np.zeros((3, 4)))).data.any()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    assert check_gradients(lambda: ((a @ b) * w).sum(), [a, b]) < 1e-3


def test_batched_matmul_broadcast_gradient():
    rng = np.random.default_rng(3)
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
    assert check_gradients(lambda: ((a @ b) ** 2).sum(), [a, b]) < 1e-3


# -- softmax -----------------------------------------------------------------------------

def test_softmax_uniform_and_stable():
    assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-30)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_rows_sum_to_one_and_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 3, (4, 7)).astype(np.float32)
    y = softmax(Tensor(x), axis=1).data
    assert np.abs(y.sum(axis=1) - 1).max() < 1e-6
    shifted = softmax(Tensor(x + np.float32(5.25)), axis=1).data
    assert np.abs(shifted - y).max() < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_and_log_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 5)
    w = rng.normal(size=(2, 5))
    assert check_gradients(lambda: (softmax(x, axis=1) * w).sum(), [x]) < 1e-3
    assert check_gradients(lambda: (log_softmax(x, axis=0) * w).sum(), [x]) < 1e-3


# -- layer norm ----------------------------------------------------------------------------

def test_layer_norm_constant_slice_is_zero():
    out = layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert not out.data.any()


def test_layer_norm_two_values():
    eps = 1e-5
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps).data
    expected = np.array([-1.0, 1.0]) / math.sqrt(1.0 + eps)
    assert np.allclose(out[0], expected, atol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_statistics_and_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 4, scale=2.0)
    gamma, beta = rand(rng, 4), rand(rng, 4)
    plain = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.abs(plain.mean(axis=-1)).max() < 1e-5
    assert np.abs(plain.var(axis=-1) - 1).max() < 1e-4
    w = rng.normal(size=(2, 4))
    assert check_gradients(lambda: (layer_norm(x, gamma, beta) * w).sum(), [x, gamma, beta]) < 1e-3


# -- cosine / normalise ----------------------------------------------------------------------

def test_cosine_sim_examples():
    assert cosine_sim(Tensor([0.3, -2.0]), Tensor([0.3, -2.0])).item() == pytest.approx(1.0, abs=1e-6)
    assert cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0, abs=1e-7)
    assert cosine_sim(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item() == pytest.approx(0.7071, abs=1e-4)


def test_cosine_sim_zero_vector_rejected():
    with pytest.raises(DegenerateVectorError):
        cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@pytest.mark.parametrize("seed", SEEDS)
def test_cosine_and_normalize_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 6), rand(rng, 3, 6)
    assert check_gradients(lambda: cosine_sim(a, b).sum(), [a, b]) < 1e-3
    w = rng.normal(size=(3, 6))
    assert check_gradients(lambda: (l2_normalize(a) * w).sum(), [a]) < 1e-3


# -- cross entropy ------------------------------------------------------------------------------

def test_cross_entropy_uniform_is_log_c():
    C = 5
    q = np.eye(C)[[2]]
    assert cross_entropy(Tensor(np.zeros((1, C))), q).item() == pytest.approx(math.log(C), abs=1e-6)


def test_cross_entropy_large_margin_is_zero():
    logits = np.eye(3) * 200.0
    assert cross_entropy(Tensor(logits), np.eye(3)).item() == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_matches_summation_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 2, (4, 3))
    q = rng.random((4, 3))
    q /= q.sum(axis=1, keepdims=True)
    got = cross_entropy(Tensor(logits), q).item()
    assert got == pytest.approx(cross_entropy_rows(logits.tolist(), q.tolist()), abs=1e-6)
    x = rand(rng, 4, 3)
    assert check_gradients(lambda: cross_entropy(x, q), [x]) < 1e-3


def test_cross_entropy_rejects_unnormalised_targets():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.ones((2, 3)))


# -- elementwise, shape ops -------------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    b = rand(rng, 4)
    for fn in (
        lambda: (exp(x) * 0.3).sum(),
        lambda: log(pos).sum(),
        lambda: sqrt(pos).sum(),
        lambda: (tanh(x) * sigmoid(x)).sum(),
        lambda: (quick_gelu(x) ** 2).sum(),
        lambda: ((x + b) / pos - b * x).sum(),
        lambda: (1.0 - x / 2.0 + 3.0 / pos).mean(),
    ):
        assert check_gradients(fn, [x, pos, b]) < 1e-3


def test_shape_op_gradients():
    rng = np.random.default_rng(1)
    x, y = rand(rng, 2, 3, 4), rand(rng, 2, 3, 4)
    w = rng.normal(size=(4, 3, 2))
    assert check_gradients(lambda: (transpose(x, (2, 1, 0)) * w).sum(), [x]) < 1e-3
    assert check_gradients(lambda: (concat([x, y], axis=1) ** 2).sum(), [x, y]) < 1e-3
    assert check_gradients(lambda: (stack([x, y], axis=2) ** 2).mean(), [x, y]) < 1e-3
    assert check_gradients(lambda: (take_rows(x, [1, 1, 0]) ** 2).sum(), [x]) < 1e-3
    assert check_gradients(lambda: (x[:, 1:, ::2] ** 3).sum(axis=(0, 2)).sum(), [x]) < 1e-3


# -- backward contract -------------------------------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(3))
    x.zero_grad()
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_accumulates_without_reset():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    assert np.allclose(x.grad, [6.0, 6.0])
    loss = (x * x).sum()
    x.zero_grad()
    loss.backward(retain_graph=True)
    loss.backward()
    assert np.allclose(x.grad, 4 * x.data)


def test_backward_populates_shared_leaf_fully():
    x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    y = x * x
    (y + y * x + x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data + 3 * x.data ** 2 + 1)


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        a, b = rand(rng, 8, 16), rand(rng, 16, 4)
        return layer_norm(softmax(a @ b), Tensor(np.ones(4)), Tensor(np.zeros(4))).data.tobytes()

    assert run() == run()


# -- optimiser and schedules ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    state = AdamState(lr=0.1)
    adam_step([p], [np.zeros(2, dtype=np.float32)], state)
    assert np.array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_descends_and_converges():
    x = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = Adam([x], lr=0.1)
    steps = []
    for i in range(200):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
        steps.append(opt.state.step)
        if i == 0:
            assert x.data[0] < 1.0
    assert steps == list(range(1, 201))
    assert abs(x.data[0]) < 1e-2


def test_adam_missing_grad_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        Adam([x], lr=0.1).step()


def test_lr_schedules():
    cos = LrSchedule("cosine", 3.5e-4, 30)
    assert cos(0) == pytest.approx(3.5e-4)
    assert cos(15) == pytest.approx(1.75e-4)
    assert cos(30) == pytest.approx(0.0, abs=1e-12)
    step = LrSchedule("step", 3.5e-4, 30, milestones=(10, 18), decay_factor=0.1)
    assert [step(e) for e in (0, 9, 10, 17, 18, 29)] == pytest.approx(
        [3.5e-4, 3.5e-4, 3.5e-5, 3.5e-5, 3.5e-6, 3.5e-6]
    )
    with pytest.raises(ContractError):
        LrSchedule("linear")
