import math

import numpy as np
import pytest

from bfftrack import tensor as T
from bfftrack.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from bfftrack.optim import Adam, TrainingError


def test_matmul_identity():
    a = T.Tensor(np.arange(12.0).reshape(3, 4))
    eye = T.Tensor(np.eye(3))
    assert np.array_equal(T.matmul(eye, a).values, a.values)


def test_matmul_hand_value():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[1.0], [1.0]])
    assert np.array_equal((a @ b).values, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    a = T.Tensor(np.zeros((3, 4)))
    b = T.Tensor(np.zeros((5, 2)))
    with pytest.raises(T.ShapeError) as ei:
        T.matmul(a, b)
    assert "(3, 4)" in str(ei.value) and "(5, 2)" in str(ei.value)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(7)
    b = T.Tensor(rng.normal(size=(4, 2)))

    def f(x):
        return T.tsum(T.matmul(x, b))

    err = T.grad_check(f, T.Tensor(rng.normal(size=(3, 4))))
    assert err < 1e-6


def test_matmul_batched_matches_per_slice():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 3, 4))
    w = rng.normal(size=(4, 2))
    out = T.matmul(T.Tensor(a), T.Tensor(w)).values
    for i in range(5):
        assert np.allclose(out[i], a[i] @ w, rtol=0, atol=1e-13)


def test_softmax_rows_symmetry():
    y = T.softmax_rows(T.Tensor([0.0, 0.0])).values
    assert np.array_equal(y, [0.5, 0.5])


def test_softmax_rows_hand_value():
    y = T.softmax_rows(T.Tensor([math.log(1.0), math.log(3.0)])).values
    assert np.allclose(y, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_rows_mask_semantics():
    y = T.softmax_rows(T.Tensor([5.0, -np.inf])).values
    assert y[0] == 1.0 and y[1] == 0.0


def test_softmax_rows_fully_masked_row_rejected():
    with pytest.raises(T.DomainError):
        T.softmax_rows(T.Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


def test_softmax_rows_sum_and_shift_invariance():
    rng = np.random.default_rng(11)
    for _ in range(50):
        x = rng.normal(size=(6, 9)) * rng.uniform(0.1, 30)
        y = T.softmax_rows(T.Tensor(x)).values
        assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)
        y2 = T.softmax_rows(T.Tensor(x + rng.normal())).values
        assert np.max(np.abs(y - y2)) <= 1e-12


def test_relu_values():
    y = T.relu(T.Tensor([-1.0, 2.0])).values
    assert np.array_equal(y, [0.0, 2.0])


def test_layer_norm_normalizes_last_axis():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 7)) * 3 + 5
    gain = T.Tensor(np.ones(7))
    bias = T.Tensor(np.zeros(7))
    y = T.layer_norm(T.Tensor(x), gain, bias).values
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) < 1e-4)


def test_layer_norm_constant_row_is_zero():
    x = T.Tensor(np.full((2, 5), 3.7))
    y = T.layer_norm(x, T.Tensor(np.ones(5)), T.Tensor(np.zeros(5))).values
    assert np.array_equal(y, np.zeros((2, 5)))


def test_dropout_p0_identity_and_eval_identity():
    x = T.Tensor(np.arange(6.0))
    assert T.dropout(x, 0.0, train=True) is x
    assert T.dropout(x, 0.5, train=False) is x


def test_dropout_scales_survivors():
    rng = np.random.default_rng(5)
    x = T.Tensor(np.ones(10000))
    y = T.dropout(x, 0.25, rng=rng, train=True).values
    kept = y != 0.0
    assert np.allclose(y[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.02


def test_gradient_accumulation_is_additive():
    x = T.Tensor(np.arange(3.0), requires_grad=True)
    for _ in range(2):
        T.tsum(x * x).backward()
    assert np.array_equal(x.grad, 2 * (2 * x.values))


def test_backward_through_shared_node_accumulates():
    x = T.Tensor([2.0], requires_grad=True)
    y = x * x  # x appears twice as a parent
    T.tsum(y).backward()
    assert np.allclose(x.grad, [4.0])


def test_forward_ops_finite_on_finite_inputs():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(4, 6)) * 50
    w = rng.normal(size=(6, 3))
    outs = [
        T.matmul(T.Tensor(x), T.Tensor(w)).values,
        T.softmax_rows(T.Tensor(x)).values,
        T.relu(T.Tensor(x)).values,
        T.tanh(T.Tensor(x)).values,
        T.sigmoid(T.Tensor(x * 100)).values,
        T.layer_norm(T.Tensor(x), T.Tensor(np.ones(6)), T.Tensor(np.zeros(6))).values,
    ]
    for o in outs:
        assert np.isfinite(o).all()


@pytest.mark.parametrize(
    "name,f,shape",
    [
        ("sum", lambda x: T.tsum(x), (3, 4)),
        ("mean", lambda x: T.tmean(x * x), (5,)),
        ("relu", lambda x: T.tsum(T.relu(x) * T.relu(x)), (4, 3)),
        ("tanh", lambda x: T.tsum(T.tanh(x)), (6,)),
        ("sigmoid", lambda x: T.tsum(T.sigmoid(x)), (6,)),
        ("softmax", lambda x: T.tsum(T.softmax_rows(x) * T.Tensor(np.arange(5.0))), (4, 5)),
        ("transpose", lambda x: T.tsum(T.transpose_last(x) * T.transpose_last(x)), (3, 4)),
        ("reshape", lambda x: T.tsum(T.reshape(x, (2, 6)) * 2.0), (3, 4)),
        ("getitem", lambda x: T.tsum(x[1:, :2] * x[1:, :2]), (4, 3)),
        ("concat", lambda x: T.tsum(T.concat([x, x * 2.0], axis=-1) * 0.5), (2, 3)),
    ],
)
def test_primitive_gradients(name, f, shape):
    rng = np.random.default_rng(hash(name) % 2**32)
    err = T.grad_check(f, T.Tensor(rng.normal(size=shape)))
    assert err < 1e-6, f"{name}: {err}"


def test_layer_norm_gradients_all_inputs():
    rng = np.random.default_rng(13)
    x0 = rng.normal(size=(3, 5))
    g0 = rng.normal(size=5)
    b0 = rng.normal(size=5)
    w = T.Tensor(rng.normal(size=(5, 1)))

    def fx(x):
        return T.tsum(T.matmul(T.layer_norm(x, T.Tensor(g0), T.Tensor(b0)), w))

    def fg(g):
        return T.tsum(T.matmul(T.layer_norm(T.Tensor(x0), g, T.Tensor(b0)), w))

    def fb(b):
        return T.tsum(T.matmul(T.layer_norm(T.Tensor(x0), T.Tensor(g0), b), w))

    assert T.grad_check(fx, T.Tensor(x0)) < 1e-6
    assert T.grad_check(fg, T.Tensor(g0)) < 1e-6
    assert T.grad_check(fb, T.Tensor(b0)) < 1e-6


def test_grad_check_sum_is_exact():
    x = T.Tensor(np.random.default_rng(2).normal(size=(3, 3)))
    assert T.grad_check(lambda t: T.tsum(t), x) < 1e-10


def test_grad_check_softmax_composite():
    rng = np.random.default_rng(9)
    w = T.Tensor(rng.normal(size=(4, 6)))

    def f(x):
        return T.tsum(T.softmax_rows(T.matmul(x, w)))

    assert T.grad_check(f, T.Tensor(rng.normal(size=(3, 4)))) < 1e-6


def test_grad_check_rejects_nonfinite():
    with pytest.raises(T.DomainError):
        T.grad_check(lambda t: T.tsum(t) * np.inf, T.Tensor([1.0]))


def test_no_grad_blocks_graph():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.tsum(x * x)
    assert not y.requires_grad and y._parents == ()


# --- Adam ---


def test_adam_zero_gradient_leaves_params():
    p = T.Tensor(np.arange(4.0), requires_grad=True)
    p.grad = np.zeros(4)
    opt = Adam([("p", p)], lr=1e-3)
    before = p.values.copy()
    opt.step()
    assert np.array_equal(p.values, before)


def test_adam_first_step_hand_value():
    # one scalar parameter, gradient 1: update is -lr / sqrt(1 + eps)
    p = T.Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    Adam([("p", p)], lr=1e-3).step()
    assert np.allclose(p.values, [-9.99999995e-4], rtol=0, atol=1e-15)


def test_adam_deterministic_runs():
    def run():
        rng = np.random.default_rng(42)
        p = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        opt = Adam([("p", p)], lr=1e-2)
        for _ in range(10):
            opt.zero_grad()
            T.tsum(p * p).backward()
            opt.step()
        return p.values.copy()

    assert np.array_equal(run(), run())


def test_adam_update_magnitude_bounded():
    rng = np.random.default_rng(8)
    p = T.Tensor(rng.normal(size=100), requires_grad=True)
    opt = Adam([("p", p)], lr=1e-3)
    for _ in range(5):
        opt.zero_grad()
        before = p.values.copy()
        p.grad = rng.normal(size=100) * 10
        opt.step()
        assert np.max(np.abs(p.values - before)) <= opt.lr * (1.0 + 1e-6) * 3


def test_adam_nan_gradient_names_parameter():
    p = T.Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingError, match="head_bias"):
        Adam([("head_bias", p)]).step()


# --- checkpoint ---


def test_checkpoint_roundtrip_byte_exact(tmp_path):
    rng = np.random.default_rng(1)
    params = {
        "emb.w": rng.normal(size=(4, 3)),
        "emb.b": rng.normal(size=3),
        "scalar": np.array(2.5),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, "abc123")
    digest, loaded = load_checkpoint(path)
    assert digest == "abc123"
    assert list(loaded) == list(params)
    for k in params:
        assert np.array_equal(loaded[k], np.asarray(params[k], dtype=np.float64))
    save_checkpoint(tmp_path / "model2.ckpt", loaded, digest)
    assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "model2.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
