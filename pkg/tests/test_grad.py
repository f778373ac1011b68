import numpy as np
import pytest

from clef import grad
from clef.grad import Tensor

from fdcheck import check_gradients


SEEDS = [11, 12, 13]


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_elementwise(seed):
    check_gradients(lambda ts: grad.sum_(grad.mul(ts[0], ts[1])),
                    [(3, 4), (3, 4)], seed)
    check_gradients(lambda ts: grad.sum_(grad.add(ts[0], ts[1])),
                    [(2, 5), (5,)], seed)  # broadcast
    check_gradients(lambda ts: grad.sum_(grad.div(ts[0], grad.add(grad.mul(ts[1], ts[1]), 1.0))),
                    [(4,), (4,)], seed)
    check_gradients(lambda ts: grad.sum_(grad.power(grad.add(grad.mul(ts[0], ts[0]), 0.5), 1.5)),
                    [(3, 3)], seed)
    check_gradients(lambda ts: grad.sum_(grad.exp(grad.mul(ts[0], 0.3))), [(6,)], seed)
    check_gradients(lambda ts: grad.sum_(grad.log(grad.add(grad.mul(ts[0], ts[0]), 1.0))),
                    [(5,)], seed)
    check_gradients(lambda ts: grad.sum_(grad.tanh(ts[0])), [(4, 2)], seed)
    check_gradients(lambda ts: grad.sum_(grad.gelu(ts[0])), [(4, 3)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_relu_abs_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    shift = Tensor(np.sign(rng.normal(size=(4, 4))) * 2.0)
    check_gradients(lambda ts: grad.sum_(grad.relu(grad.add(ts[0], shift))),
                    [(4, 4)], seed)
    check_gradients(lambda ts: grad.sum_(grad.abs_(grad.add(ts[0], shift))),
                    [(4, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_reductions_and_shapes(seed):
    check_gradients(lambda ts: grad.sum_(grad.mean(ts[0], axis=1)), [(3, 5)], seed)
    check_gradients(lambda ts: grad.sum_(grad.mul(grad.reshape(ts[0], (6, 2)), 1.5)),
                    [(3, 4)], seed)
    check_gradients(lambda ts: grad.sum_(grad.mul(grad.transpose(ts[0], (1, 0, 2)), ts[1])),
                    [(2, 3, 4), (3, 2, 4)], seed)
    check_gradients(lambda ts: grad.sum_(grad.mul(grad.concat([ts[0], ts[1]], axis=1), 2.0)),
                    [(2, 3), (2, 2)], seed)
    check_gradients(lambda ts: grad.sum_(grad.getitem(ts[0], (slice(None), slice(1, 3)))),
                    [(3, 5)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_matmul(seed):
    check_gradients(lambda ts: grad.sum_(grad.matmul(ts[0], ts[1])),
                    [(3, 4), (4, 2)], seed)
    check_gradients(lambda ts: grad.sum_(grad.matmul(ts[0], ts[1])),
                    [(2, 3, 4), (2, 4, 5)], seed)
    # broadcast batched against shared weight
    check_gradients(lambda ts: grad.sum_(grad.matmul(ts[0], ts[1])),
                    [(2, 3, 4), (4, 5)], seed)


def test_matmul_shape_error():
    with pytest.raises(grad.ShapeError) as exc:
        grad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_add_shape_error_mentions_both_shapes():
    with pytest.raises(grad.ShapeError) as exc:
        grad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_embedding(seed):
    ids = np.array([[0, 2, 1], [2, 2, 0]])
    check_gradients(lambda ts: grad.sum_(grad.mul(grad.embedding_lookup(ts[0], ids), 1.3)),
                    [(4, 5)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_softmax_layernorm(seed):
    check_gradients(
        lambda ts: grad.sum_(grad.mul(grad.softmax(ts[0], axis=-1), ts[1])),
        [(3, 5), (3, 5)], seed)
    check_gradients(
        lambda ts: grad.sum_(grad.mul(grad.layernorm(ts[0], ts[1], ts[2]), ts[3])),
        [(4, 6), (6,), (6,), (4, 6)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_attention_and_pooling(seed):
    bias = np.zeros((1, 1, 3, 3))
    bias[..., 2] = -1e9

    def attn(ts):
        out = grad.scaled_dot_attention(ts[0], ts[1], ts[2], Tensor(bias))
        return grad.sum_(grad.mul(out, 0.7))

    check_gradients(attn, [(2, 2, 3, 4), (2, 2, 3, 4), (2, 2, 3, 4)], seed)

    mask = Tensor(np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]]))
    check_gradients(
        lambda ts: grad.sum_(grad.mul(grad.mean_pool_masked(ts[0], mask), 1.1)),
        [(2, 3, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_losses(seed):
    targets = np.array([1, 0, 3])
    check_gradients(
        lambda ts: grad.cross_entropy_with_label_smoothing(ts[0], targets, 0.1),
        [(3, 4)], seed)
    shift = Tensor(np.full((3, 4), 2.0))
    check_gradients(lambda ts: grad.l1(grad.add(ts[0], shift), ts[1]),
                    [(3, 4), (3, 4)], seed)
    check_gradients(lambda ts: grad.l2(ts[0], ts[1]), [(3, 4), (3, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), ((2, 1), (1, 0))])
def test_fd_conv2d(seed, stride, padding):
    check_gradients(
        lambda ts: grad.sum_(grad.mul(
            grad.conv2d(ts[0], ts[1], ts[2], stride=stride, padding=padding), 0.9)),
        [(2, 3, 6, 5), (4, 3, 3, 3), (4,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), ((2, 1), (1, 1))])
def test_fd_transposed_conv2d(seed, stride, padding):
    check_gradients(
        lambda ts: grad.sum_(grad.mul(
            grad.transposed_conv2d(ts[0], ts[1], ts[2], stride=stride, padding=padding), 0.9)),
        [(2, 3, 4, 5), (3, 4, 3, 3), (4,)], seed)


def test_transposed_conv_is_adjoint_of_conv():
    # <conv(x), y> == <x, conv_T(y)> for matching geometry
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 8, 8)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    y_shape = grad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).shape
    y = rng.normal(size=y_shape).astype(np.float32)
    lhs = float(np.sum(grad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data * y))
    # transposed-conv weight layout is (Cin_t, Cout_t, kh, kw) == conv's (Cout, Cin, kh, kw)
    back = grad.transposed_conv2d(Tensor(y), Tensor(w),
                                  stride=2, padding=1, output_padding=1)
    rhs = float(np.sum(back.data * x))
    assert np.isclose(lhs, rhs, rtol=1e-4)


def test_sum_square_gradient_hand_case():
    x = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    loss = grad.sum_(grad.mul(x, x))
    loss.backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_softmax_rows_and_jacobian():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    s = grad.softmax(x, axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)
    # Jacobian rows sum to zero: grad of sum(softmax) wrt x is 0
    grad.sum_(s).backward()
    assert np.allclose(x.grad, 0.0, atol=1e-6)


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = Tensor(np.array([2.0]), requires_grad=True)
    loss = grad.sum_(grad.mul(grad.stop_gradient(x), y))
    loss.backward()
    assert x.grad is None
    assert np.allclose(y.grad, [3.0])


def test_uniform_ce_equals_log_k():
    logits = Tensor(np.zeros((5, 64)))
    loss = grad.cross_entropy_with_label_smoothing(logits, np.zeros(5, dtype=int), 0.1)
    assert np.isclose(loss.item(), np.log(64), atol=1e-6)


def test_ce_one_hot_no_smoothing_near_zero():
    logits = np.full((3, 4), -50.0)
    logits[np.arange(3), [0, 2, 1]] = 50.0
    loss = grad.cross_entropy_with_label_smoothing(Tensor(logits), np.array([0, 2, 1]), 0.0)
    assert loss.item() < 1e-6


def test_ce_smoothing_hand_case():
    # K=4, single row, logits [2, 0, 0, 0], target 0, smoothing 0.1
    logits = np.array([[2.0, 0.0, 0.0, 0.0]])
    x = logits[0]
    lse = np.log(np.exp(x).sum())
    soft = np.array([0.925, 0.025, 0.025, 0.025])
    expected = -(soft * (x - lse)).sum()
    loss = grad.cross_entropy_with_label_smoothing(Tensor(logits), np.array([0]), 0.1)
    assert np.isclose(loss.item(), expected, atol=1e-6)


def test_adam_descent_one_step():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = grad.AdamW([x], lr=0.1, weight_decay=0.0)
    loss = grad.sum_(grad.mul(x, x))
    loss.backward()
    opt.step()
    assert np.all(np.abs(x.data) < 1.0)


def test_adamw_wd_zero_equals_adam():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(5,)).astype(np.float32)
    paths = []
    for wd in (0.0, 0.0):
        x = Tensor(x0.copy(), requires_grad=True)
        opt = grad.AdamW([x], lr=0.05, beta1=0.9, beta2=0.999, weight_decay=wd)
        for _ in range(10):
            opt.zero_grad()
            grad.sum_(grad.mul(x, x)).backward()
            opt.step()
        paths.append(x.data.copy())
    assert np.array_equal(paths[0], paths[1])
    # and wd>0 actually changes the path
    x = Tensor(x0.copy(), requires_grad=True)
    opt = grad.AdamW([x], lr=0.05, beta1=0.9, beta2=0.999, weight_decay=0.5)
    for _ in range(10):
        opt.zero_grad()
        grad.sum_(grad.mul(x, x)).backward()
        opt.step()
    assert not np.array_equal(paths[0], x.data)


def test_quadratic_bowl_converges():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(8,)).astype(np.float32), requires_grad=True)
    opt = grad.AdamW([x], lr=0.1, beta1=0.9, beta2=0.95, weight_decay=0.0)
    for t in range(500):
        opt.zero_grad()
        grad.sum_(grad.mul(x, x)).backward()
        opt.step(lr=grad.cosine_lr(t, 500, 0.1))
    assert np.linalg.norm(x.data) < 1e-3


def test_ema_boundary_and_geometric():
    live = np.array([2.0])
    assert grad.ema_update(np.array([5.0]), live, 0.0) == pytest.approx(2.0)
    assert grad.ema_update(np.array([5.0]), live, 1.0) == pytest.approx(5.0)
    s0, d, n = 5.0, 0.9, 17
    s = np.array([s0])
    for _ in range(n):
        s = grad.ema_update(s, live, d)
    expected = s0 * d ** n + 2.0 * (1.0 - d ** n)
    assert np.isclose(s[0], expected, atol=1e-6)


def test_grad_norm_matches_two_pass_and_leaves_grads_untouched():
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
    loss = grad.l2(grad.matmul(x, w))
    norm = grad.grad_norm(loss, [w])
    assert w.grad is None
    loss2 = grad.l2(grad.matmul(x, w))
    loss2.backward()
    assert np.isclose(norm, np.linalg.norm(w.grad), rtol=1e-5)


def test_training_trajectory_deterministic():
    def run():
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        opt = grad.AdamW([w], lr=0.01)
        for _ in range(20):
            x = Tensor(rng.normal(size=(2, 4)).astype(np.float32))
            opt.zero_grad()
            grad.l2(grad.matmul(x, w)).backward()
            opt.step()
        return w.data.copy()

    assert np.array_equal(run(), run())


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    params = {"a": Tensor(rng.normal(size=(3, 2)).astype(np.float32), requires_grad=True),
              "b": Tensor(rng.normal(size=(4,)).astype(np.float32), requires_grad=True)}
    ema = grad.Ema(params, 0.999)
    opt = grad.AdamW(list(params.values()), lr=0.01)
    for p in params.values():
        p.grad = np.ones_like(p.data)
    opt.step()
    ema.update(params)
    path = tmp_path / "ckpt.npz"
    grad.save_checkpoint(path, params, ema=ema, optimizer=opt, meta={"stage": "test"})
    loaded = grad.load_checkpoint(path)
    assert loaded["meta"]["stage"] == "test"
    assert set(loaded["params"]) == {"a", "b"}
    assert np.array_equal(loaded["params"]["a"], params["a"].data)
    assert np.array_equal(loaded["ema"]["b"], ema.shadow["b"])
    assert loaded["optimizer"]["t"] == 1
    fresh = {k: Tensor(np.zeros_like(v.data), requires_grad=True) for k, v in params.items()}
    grad.assign_parameters(fresh, loaded["params"])
    assert np.array_equal(fresh["a"].data, params["a"].data)


def test_module_collects_nested_parameters():
    class Leaf(grad.Module):
        def __init__(self):
            self.w = Tensor(np.zeros((2, 2)), requires_grad=True)

    class Root(grad.Module):
        def __init__(self):
            self.bias = Tensor(np.zeros(3), requires_grad=True)
            self.leaf = Leaf()
            self.blocks = [Leaf(), Leaf()]

    names = set(Root().named_parameters())
    assert names == {"bias", "leaf.w", "blocks.0.w", "blocks.1.w"}
