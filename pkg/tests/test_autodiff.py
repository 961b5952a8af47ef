"""Tensor/tape tests: every op is checked against central finite differences."""

import numpy as np
import pytest

from mapgraph import autodiff as ad
from mapgraph.autodiff import Tape, Tensor, backward, grad_check
from mapgraph.errors import NumericError, ShapeError
from mapgraph.params import ParamStore, load_checkpoint, save_checkpoint

STEP = 1e-5
TOL = 1e-4


def fd_grads(build, arrays, step=STEP):
    """Central-difference gradients of the scalar build(*arrays)."""
    tensors = [Tensor(a) for a in arrays]  # share buffers so edits are visible
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = build(*tensors).item()
            flat[i] = orig - step
            fm = build(*tensors).item()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def check_op(build, arrays):
    """Tape gradients of scalar build(*tensors) must match FD on every input."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    got = backward(tape, loss)
    want = fd_grads(build, [np.array(a, dtype=np.float64) for a in arrays])
    for t, w in zip(tensors, want):
        g = got.get(t, np.zeros_like(w))
        err = np.abs(g - w) / np.maximum(1.0, np.abs(w))
        assert err.max() < TOL, f"max rel err {err.max():.3e}"


def _proj(t, rng):
    """Project a tensor to a scalar with fixed random weights."""
    w = rng.normal(size=t.shape)
    return ad.tsum(ad.mul(t, Tensor(w)))


# ---------------------------------------------------------------------------
# frozen forward values


def test_matmul_ones_value():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    out = ad.matmul(a, b)
    assert np.allclose(out.data, 3.0)


def test_relu_negative_is_zero():
    assert ad.relu(Tensor([-1.5])).data[0] == 0.0


def test_softmax_uniform_logits():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
    assert np.allclose(out.data, 1.0 / 3.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(17, 9)) * 10
    out = ad.softmax(Tensor(x), axis=1)
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12


def test_logsumexp_matches_dense():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 7))
    got = ad.logsumexp(Tensor(x), axis=1).data
    want = np.log(np.exp(x).sum(axis=1))
    assert np.allclose(got, want, atol=1e-12)


def test_clamp_values():
    out = ad.clamp(Tensor([-3.0, 0.5, 11.0]), 0.0, 10.0)
    assert np.allclose(out.data, [0.0, 0.5, 10.0])


# ---------------------------------------------------------------------------
# per-op gradient sweep against finite differences


OP_CASES = {}


def op_case(name):
    def deco(fn):
        OP_CASES[name] = fn
        return fn

    return deco


@op_case("add")
def _(rng):
    return lambda a, b: ad.tsum(ad.mul(ad.add(a, b), a)), [rng.normal(size=(4, 5)), rng.normal(size=(5,))]


@op_case("sub")
def _(rng):
    return lambda a, b: ad.tsum(ad.mul(ad.sub(a, b), b)), [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))]


@op_case("neg")
def _(rng):
    return lambda a: ad.tsum(ad.mul(ad.neg(a), a)), [rng.normal(size=(6,))]


@op_case("mul")
def _(rng):
    return lambda a, b: ad.tsum(ad.mul(a, b)), [rng.normal(size=(4, 1, 3)), rng.normal(size=(2, 3))]


@op_case("div")
def _(rng):
    return lambda a, b: ad.tsum(ad.div(a, b)), [rng.normal(size=(4, 3)), rng.uniform(1.0, 2.0, size=(3,))]


@op_case("matmul")
def _(rng):
    return lambda a, b: ad.tsum(ad.matmul(a, b)), [rng.normal(size=(4, 6)), rng.normal(size=(6, 3))]


@op_case("matmul_batched")
def _(rng):
    return lambda a, b: ad.tsum(ad.matmul(a, b)), [rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 5, 2))]


@op_case("relu")
def _(rng):
    x = rng.normal(size=(5, 5))
    x[np.abs(x) < 1e-3] += 0.1  # stay off the kink
    return lambda a: ad.tsum(ad.relu(a)), [x]


@op_case("exp")
def _(rng):
    return lambda a: ad.tsum(ad.exp(a)), [rng.normal(size=(4, 4))]


@op_case("log")
def _(rng):
    return lambda a: ad.tsum(ad.log(a)), [rng.uniform(0.5, 3.0, size=(4, 4))]


@op_case("sqrt")
def _(rng):
    return lambda a: ad.tsum(ad.sqrt(a)), [rng.uniform(0.5, 3.0, size=(7,))]


@op_case("sin")
def _(rng):
    return lambda a: ad.tsum(ad.sin(a)), [rng.normal(size=(3, 5))]


@op_case("cos")
def _(rng):
    return lambda a: ad.tsum(ad.cos(a)), [rng.normal(size=(3, 5))]


@op_case("clamp")
def _(rng):
    x = rng.uniform(-2.0, 12.0, size=(6, 6))
    x[np.abs(x) < 1e-3] += 0.1
    x[np.abs(x - 10.0) < 1e-3] += 0.1
    return lambda a: ad.tsum(ad.clamp(a, 0.0, 10.0)), [x]


@op_case("reshape")
def _(rng):
    w = rng.normal(size=(2, 6))
    return lambda a: ad.tsum(ad.mul(ad.reshape(a, (2, 6)), Tensor(w))), [rng.normal(size=(3, 4))]


@op_case("transpose")
def _(rng):
    w = rng.normal(size=(4, 2, 3))
    return (
        lambda a: ad.tsum(ad.mul(ad.transpose(a, (2, 0, 1)), Tensor(w))),
        [rng.normal(size=(2, 3, 4))],
    )


@op_case("concat")
def _(rng):
    w = rng.normal(size=(3, 7))
    return (
        lambda a, b: ad.tsum(ad.mul(ad.concat([a, b], axis=1), Tensor(w))),
        [rng.normal(size=(3, 4)), rng.normal(size=(3, 3))],
    )


@op_case("getitem")
def _(rng):
    w = rng.normal(size=(2, 3))
    return (
        lambda a: ad.tsum(ad.mul(a[1:3, ::2], Tensor(w))),
        [rng.normal(size=(5, 6))],
    )


@op_case("gather2d")
def _(rng):
    rows = np.array([0, 2, 2, 1])
    cols = np.array([1, 0, 0, 3])  # repeated entry exercises accumulation
    w = rng.normal(size=4)
    return (
        lambda a: ad.tsum(ad.mul(ad.gather2d(a, rows, cols), Tensor(w))),
        [rng.normal(size=(3, 4))],
    )


@op_case("sum_axis")
def _(rng):
    w = rng.normal(size=(5,))
    return lambda a: ad.tsum(ad.mul(ad.tsum(a, axis=0), Tensor(w))), [rng.normal(size=(4, 5))]


@op_case("sum_keepdims")
def _(rng):
    w = rng.normal(size=(4, 1))
    return (
        lambda a: ad.tsum(ad.mul(ad.tsum(a, axis=1, keepdims=True), Tensor(w))),
        [rng.normal(size=(4, 5))],
    )


@op_case("mean")
def _(rng):
    return lambda a: ad.tmean(a), [rng.normal(size=(3, 4, 2))]


@op_case("mean_axis")
def _(rng):
    w = rng.normal(size=(3, 2))
    return (
        lambda a: ad.tsum(ad.mul(ad.tmean(a, axis=1), Tensor(w))),
        [rng.normal(size=(3, 4, 2))],
    )


@op_case("softmax")
def _(rng):
    w = rng.normal(size=(4, 5))
    return lambda a: ad.tsum(ad.mul(ad.softmax(a, axis=1), Tensor(w))), [rng.normal(size=(4, 5)) * 3]


@op_case("log_softmax")
def _(rng):
    w = rng.normal(size=(4, 5))
    return (
        lambda a: ad.tsum(ad.mul(ad.log_softmax(a, axis=1), Tensor(w))),
        [rng.normal(size=(4, 5)) * 3],
    )


@op_case("logsumexp")
def _(rng):
    w = rng.normal(size=(6,))
    return (
        lambda a: ad.tsum(ad.mul(ad.logsumexp(a, axis=1), Tensor(w))),
        [rng.normal(size=(6, 4)) * 2],
    )


@op_case("logsumexp_keepdims")
def _(rng):
    w = rng.normal(size=(6, 1))
    return (
        lambda a: ad.tsum(ad.mul(ad.logsumexp(a, axis=1, keepdims=True), Tensor(w))),
        [rng.normal(size=(6, 4)) * 2],
    )


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_fd(name):
    rng = np.random.default_rng(hash(name) % (2**32))
    build, arrays = OP_CASES[name](rng)
    check_op(build, [np.asarray(a, dtype=np.float64) for a in arrays])


def test_op_gradients_random_shapes():
    # a second sweep at larger random shapes (up to 32x32)
    rng = np.random.default_rng(7)
    for _ in range(3):
        m, n, k = rng.integers(2, 33, size=3)
        check_op(
            lambda a, b: ad.tmean(ad.relu(ad.matmul(a, b))),
            [rng.normal(size=(m, n)), rng.normal(size=(n, k))],
        )


# ---------------------------------------------------------------------------
# tape mechanics


def test_fanout_accumulates():
    # y = w*w + 3w  =>  dy/dw = 2w + 3
    w = Tensor(np.array([1.7]), requires_grad=True)
    with Tape() as tape:
        y = ad.tsum(ad.add(ad.mul(w, w), ad.mul(w, Tensor([3.0]))))
    g = backward(tape, y)[w]
    assert np.allclose(g, 2 * 1.7 + 3)


def test_linear_loss_gradient_is_coefficient():
    x = np.array([2.0, -1.0, 0.5])
    w = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.mul(w, Tensor(x)))
    assert np.allclose(backward(tape, loss)[w], x)


def test_constant_zero_loss_gives_zero_grads():
    store = ParamStore()
    rng = np.random.default_rng(0)
    w = store.add("w", rng.normal(size=(3, 3)))
    with Tape() as tape:
        loss = ad.tsum(ad.mul(w, Tensor(np.zeros((3, 3)))))
    named = store.named_grads(backward(tape, loss))
    assert np.allclose(named["w"], 0.0)
    # a loss with no tape history at all: empty grads, zeros for every param
    with Tape() as tape2:
        const = Tensor(0.0)
    named2 = store.named_grads(backward(tape2, const))
    assert np.allclose(named2["w"], 0.0)


def test_unreachable_parameter_gets_zero_grad():
    store = ParamStore()
    rng = np.random.default_rng(1)
    a = store.add("a", rng.normal(size=(2,)))
    store.add("unused", rng.normal(size=(4,)))
    with Tape() as tape:
        loss = ad.tsum(ad.mul(a, a))
    named = store.named_grads(backward(tape, loss))
    assert np.allclose(named["unused"], 0.0)
    assert np.allclose(named["a"], 2 * a.data)


def test_backward_rejects_nonscalar_loss():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(w, w)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_backward_rejects_foreign_tape_loss():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as t1:
        y = ad.tsum(ad.mul(w, w))
    with Tape() as t2:
        ad.tsum(w)
        with pytest.raises(ShapeError):
            backward(t2, y)


def test_nonfinite_forward_raises():
    with pytest.raises(NumericError):
        ad.log(Tensor([0.0]))
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(NumericError):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_two_layer_mlp_matches_fd():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 6))
    t = rng.normal(size=(4, 2))

    def build(w1, b1, w2, b2):
        h = ad.relu(ad.add(ad.matmul(Tensor(x), w1), b1))
        out = ad.add(ad.matmul(h, w2), b2)
        d = ad.sub(out, Tensor(t))
        return ad.tmean(ad.mul(d, d))

    check_op(build, [rng.normal(size=(6, 5)), rng.normal(size=(5,)), rng.normal(size=(5, 2)), rng.normal(size=(2,))])


# ---------------------------------------------------------------------------
# grad_check harness


def test_grad_check_quadratic_tiny_error():
    store = ParamStore()
    store.add("w", np.array([3.0]))

    def f():
        w = store["w"]
        return ad.tsum(ad.mul(w, w))

    assert grad_check(f, store, step=1e-5) < 1e-8


def test_grad_check_dead_relu_agrees():
    store = ParamStore()
    store.add("w", np.array([-2.0]))

    def f():
        return ad.tsum(ad.relu(store["w"]))

    # both analytic and numeric are 0 on the dead side
    assert grad_check(f, store, step=1e-5) < 1e-12


def test_grad_check_samples_subset():
    store = ParamStore()
    rng = np.random.default_rng(5)
    store.add("w", rng.normal(size=(20, 20)))
    x = rng.normal(size=(3, 20))

    def f():
        return ad.tmean(ad.relu(ad.matmul(Tensor(x), store["w"])))

    err = grad_check(f, store, samples_per_param=16, rng=np.random.default_rng(9))
    assert err < TOL


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_matches_hand_formula():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0]))
    g = np.array([0.3, -0.7])
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    store.adam_step({"w": g}, lr=lr, betas=(b1, b2), eps=eps)
    # bias-corrected first step: mhat = g, vhat = g^2
    want = np.array([1.0, -2.0]) - lr * g / (np.abs(g) + eps)
    assert np.allclose(store["w"].data, want, atol=1e-12)
    # magnitude is lr*sign(g) up to the epsilon correction
    assert np.allclose(np.abs(np.array([1.0, -2.0]) - store["w"].data), lr, atol=1e-9)


def test_adam_zero_grad_no_motion():
    store = ParamStore()
    store.add("w", np.array([0.5, 1.5]))
    before = store["w"].data.copy()
    for _ in range(5):
        store.adam_step({"w": np.zeros(2)})
    assert np.array_equal(store["w"].data, before)


def test_adam_rejects_nonfinite_gradient():
    store = ParamStore()
    store.add("w", np.ones(2))
    with pytest.raises(NumericError):
        store.adam_step({"w": np.array([np.nan, 0.0])})


def test_adam_deterministic():
    def run():
        store = ParamStore()
        rng = np.random.default_rng(2)
        store.add("w", rng.normal(size=(4, 4)))
        x = np.random.default_rng(3).normal(size=(2, 4))
        for _ in range(10):
            with Tape() as tape:
                loss = ad.tmean(ad.mul(ad.matmul(Tensor(x), store["w"]), Tensor(x @ np.ones((4, 4)))))
            store.adam_step(store.named_grads(backward(tape, loss)))
        return store["w"].data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_quadratic_descends_under_adam():
    store = ParamStore()
    store.add("w", np.array([5.0]))
    losses = []
    for _ in range(200):
        with Tape() as tape:
            w = store["w"]
            loss = ad.tsum(ad.mul(w, w))
        losses.append(loss.item())
        store.adam_step(store.named_grads(backward(tape, loss)), lr=0.05)
    assert losses[-1] < losses[0] * 0.05


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = ParamStore()
    rng = np.random.default_rng(17)
    store.add("enc.w", rng.normal(size=(7, 3)) * 1e3)
    store.add("enc.b", rng.normal(size=(3,)) * 1e-7)
    store.add("alpha", np.array(1.0))  # 0-d scalar
    store.add("deep.block.0.w", rng.normal(size=(2, 3, 4)))
    path = tmp_path / "model.ckpt"
    save_checkpoint(store, path)
    state = load_checkpoint(path)
    assert set(state) == set(store.names())
    for name, t in store.items():
        assert state[name].shape == t.shape
        assert np.array_equal(state[name], t.data)

    fresh = ParamStore()
    for name, t in store.items():
        fresh.add(name, np.zeros(t.shape))
    fresh.load_state(state)
    for name, t in store.items():
        assert np.array_equal(fresh[name].data, t.data)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    from mapgraph.errors import CheckpointError

    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(store, path)
    other = ParamStore()
    other.add("w", np.ones((3, 2)))
    with pytest.raises(CheckpointError):
        other.load_state(load_checkpoint(path))
    third = ParamStore()
    third.add("different", np.ones((2, 2)))
    with pytest.raises(CheckpointError):
        third.load_state(load_checkpoint(path))


def test_checkpoint_rejects_garbage(tmp_path):
    from mapgraph.errors import CheckpointError

    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
