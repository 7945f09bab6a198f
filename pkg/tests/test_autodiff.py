import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcrnn import autodiff as ad
from dcrnn.sparse import SparseMatrix


def check_grads(build, params, h=1e-5, tol=1e-4):
    """Compare tape gradients of scalar ``build()`` against central differences."""
    ad.zero_grad(params)
    with ad.Tape() as tape:
        loss = build()
    tape.backward(loss)
    for p in params:
        num = ad.numerical_grad(lambda: build().value, p, h)
        err = ad.relative_error(p.grad, num).max()
        assert err < tol, f"{p.name}: relative error {err}"


def P(name, shape, rng, scale=1.0):
    return ad.ParamTensor(name, rng.standard_normal(shape) * scale)


def test_sum_of_param_gives_ones():
    p = ad.ParamTensor("p", np.arange(6.0).reshape(2, 3))
    with ad.Tape() as tape:
        loss = ad.sum(p)
    tape.backward(loss)
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_spmm_adjoint_by_hand():
    s = SparseMatrix.from_dense([[0, 1], [1, 0]])
    p = ad.ParamTensor("p", np.array([[1.0], [2.0]]))
    with ad.Tape() as tape:
        loss = ad.sum(ad.spmm(s, p))
    tape.backward(loss)
    np.testing.assert_array_equal(p.grad, np.ones((2, 1)))


def test_repeated_backward_accumulates():
    p = ad.ParamTensor("p", np.ones(3))
    for _ in range(2):
        with ad.Tape() as tape:
            loss = ad.sum(p * 2.0)
        tape.backward(loss)
    np.testing.assert_array_equal(p.grad, 4.0 * np.ones(3))
    ad.zero_grad([p])
    np.testing.assert_array_equal(p.grad, 0.0)


def test_backward_clears_tape():
    p = ad.ParamTensor("p", np.ones(3))
    with ad.Tape() as tape:
        loss = ad.sum(ad.tanh(p))
        assert len(tape) > 0
    tape.backward(loss)
    assert len(tape) == 0


def test_nonscalar_loss_rejected():
    p = ad.ParamTensor("p", np.ones(3))
    with ad.Tape() as tape:
        out = p * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)


def test_out_of_order_tape_detected():
    p = ad.ParamTensor("p", np.ones(2))
    with ad.Tape() as tape:
        a = p * 2.0
        b = ad.sum(a)
    # corrupt the ordering: pretend the parent was recorded after its consumer
    a.index = b.index + 1
    with pytest.raises(RuntimeError, match="cycle"):
        tape.backward(b)


def test_no_recording_outside_tape():
    p = ad.ParamTensor("p", np.ones(2))
    out = ad.sum(p * p)
    assert out.vjp is None and not out.requires_grad


@pytest.mark.parametrize(
    "name, fn, shapes",
    [
        ("add", lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
        ("add_broadcast", lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
        ("sub", lambda a, b: ad.sub(a, b), [(3, 4), (1, 4)]),
        ("mul", lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
        ("neg", lambda a: -a, [(5,)]),
        ("matmul", lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
        ("sigmoid", lambda a: ad.sigmoid(a), [(3, 4)]),
        ("tanh", lambda a: ad.tanh(a), [(3, 4)]),
        ("relu", lambda a: ad.relu(a), [(3, 4)]),
        ("abs", lambda a: ad.absolute(a), [(3, 4)]),
        ("square", lambda a: ad.square(a), [(3, 4)]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 5)]),
        ("concat0", lambda a, b: ad.concat([a, b], axis=0), [(2, 3), (1, 3)]),
        ("slice", lambda a: a[1:, ::2], [(4, 5)]),
        ("sum_axis", lambda a: ad.sum(a, axis=0), [(3, 4)]),
        ("mean", lambda a: ad.mean(a), [(3, 4)]),
        ("mean_axis", lambda a: ad.mean(a, axis=1), [(3, 4)]),
        ("reshape", lambda a: ad.reshape(a, (2, 6)), [(3, 4)]),
        ("transpose", lambda a: ad.transpose(a, (1, 0)), [(3, 4)]),
    ],
)
def test_primitive_gradients(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    params = [P(f"{name}{i}", s, rng) for i, s in enumerate(shapes)]
    weights = rng.standard_normal(fn(*[ad.Tensor(p.value) for p in params]).shape)
    if name in ("relu", "abs"):
        for p in params:  # keep away from the kink
            p.value[np.abs(p.value) < 1e-2] = 0.5
    check_grads(lambda: ad.sum(fn(*params) * weights), params)


def test_spmm_gradient_random(rng):
    a = rng.standard_normal((6, 5)) * (rng.random((6, 5)) < 0.5)
    s = SparseMatrix.from_dense(a)
    x = P("x", (5, 3), rng)
    w = rng.standard_normal((6, 3))
    check_grads(lambda: ad.sum(ad.spmm(s, x) * w), [x])


def test_composite_graph_gradients(rng):
    w1, w2, b = P("w1", (4, 3), rng), P("w2", (3, 1), rng), P("b", (3,), rng)
    x = rng.standard_normal((5, 4))

    def build():
        h = ad.tanh(x @ w1 + b)
        gate = ad.sigmoid(h)
        z = ad.concat([h * gate, h], axis=0)
        return ad.mean(ad.square(z @ w2))

    check_grads(build, [w1, w2, b])


def test_shared_subexpression_accumulates(rng):
    p = P("p", (3,), rng)

    def build():
        a = ad.tanh(p)
        return ad.sum(a * a + a)

    check_grads(build, [p])


# -- Adam ----------------------------------------------------------------------


def test_adam_zero_grad_leaves_value():
    p = ad.ParamTensor("p", np.array([1.0, -2.0]))
    ad.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert p.step_count == 1


@pytest.mark.parametrize("g", [0.001, 1.0, 1000.0, -1.0])
def test_adam_first_step_moves_by_lr(g):
    p = ad.ParamTensor("p", np.array([0.5]))
    p.grad[...] = g
    ad.adam_step([p], lr=0.01)
    assert abs(abs(0.5 - p.value[0]) - 0.01) < 1e-6
    assert np.sign(0.5 - p.value[0]) == np.sign(g)
    assert p.grad[0] == g  # untouched


def test_adam_lr_zero_leaves_value():
    p = ad.ParamTensor("p", np.array([0.5, 1.5]))
    p.grad[...] = 3.0
    ad.adam_step([p], lr=0.0)
    np.testing.assert_array_equal(p.value, [0.5, 1.5])


def test_adam_matches_reference_over_steps(rng):
    p = ad.ParamTensor("p", rng.standard_normal(4))
    x, m, v = p.value.copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p.grad[...] = g
        ad.adam_step([p], lr=0.05, beta1=0.8, beta2=0.99, eps=1e-6)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.05 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-6)
    np.testing.assert_allclose(p.value, x, rtol=1e-13)
    assert np.all(p.v >= 0)


def test_adam_rejects_nonfinite_grad_by_name():
    a, b = ad.ParamTensor("fine", np.ones(2)), ad.ParamTensor("broken", np.ones(2))
    b.grad[0] = np.nan
    with pytest.raises(FloatingPointError, match="broken"):
        ad.adam_step([a, b], lr=0.1)
    assert a.step_count == 0  # nothing applied


def test_clip_grad_norm():
    p = ad.ParamTensor("p", np.zeros(2))
    p.grad[...] = [3.0, 4.0]
    assert ad.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


# -- schedule and init ---------------------------------------------------------------


def test_lr_schedule_examples():
    kw = dict(base_lr=1e-2, start_epoch=20, period=10, factor=0.1)
    assert ad.lr_schedule(0, **kw) == 1e-2
    assert ad.lr_schedule(19, **kw) == 1e-2
    assert ad.lr_schedule(20, **kw) == pytest.approx(1e-3, rel=1e-12)
    assert ad.lr_schedule(29, **kw) == pytest.approx(1e-3, rel=1e-12)
    assert ad.lr_schedule(30, **kw) == pytest.approx(1e-4, rel=1e-12)
    assert all(ad.lr_schedule(e, 0.5, 3, 2, 1.0) == 0.5 for e in range(50))
    with pytest.raises(ValueError):
        ad.lr_schedule(0, 1.0, 0, 0, 0.1)


@given(st.integers(0, 500), st.integers(0, 50), st.integers(1, 20), st.floats(0.01, 1.0))
def test_lr_schedule_formula(epoch, start, period, factor):
    expected = 1.0 if epoch < start else factor ** (math.floor((epoch - start) / period) + 1)
    assert ad.lr_schedule(epoch, 1.0, start, period, factor) == pytest.approx(expected, rel=1e-12)


def test_init_params():
    a = ad.init_params((100, 100), 3)
    b = ad.init_params((100, 100), 3)
    np.testing.assert_array_equal(a.value, b.value)
    s = math.sqrt(6.0 / 200)
    assert np.abs(a.value).max() <= s
    assert np.abs(a.value).max() > 0.95 * s
    z = ad.init_params(7, 0, "zeros")
    np.testing.assert_array_equal(z.value, np.zeros(7))
    with pytest.raises(ValueError):
        ad.init_params((2, 2), 0, "orthogonal")


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    ps = [P("a/w", (3, 2), rng), P("b", (4,), rng)]
    for p in ps:
        p.grad[...] = rng.standard_normal(p.shape)
    ad.adam_step(ps, lr=0.1)
    path = tmp_path / "c.ckpt"
    ad.save_checkpoint(path, ps, {"note": "x", "k": [1, 2]})
    raw = path.read_bytes()
    assert raw[:8] == b"DCRNNCKP"
    assert struct.unpack_from("<I", raw, 8)[0] == 1
    loaded, meta = ad.load_checkpoint(path)
    assert meta == {"note": "x", "k": [1, 2]}
    for p in ps:
        q = loaded[p.name]
        assert q.step_count == 1
        for attr in ("value", "m", "v"):
            assert getattr(q, attr).tobytes() == getattr(p, attr).tobytes()


def test_checkpoint_corruption_detected(tmp_path, rng):
    path = tmp_path / "c.ckpt"
    ad.save_checkpoint(path, [P("w", (3, 3), rng)])
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    for blob, msg in [
        (b"NOTACKPT" + raw[8:], "not a checkpoint"),
        (raw[:8] + struct.pack("<I", 9) + raw[12:], "version"),
        (raw[:-8], "truncated"),
        (raw + b"\0" * 8, "trailing"),
        (raw[:21] + b"#" + raw[22:], "header"),
    ]:
        bad.write_bytes(blob)
        with pytest.raises(ad.CheckpointError, match=msg):
            ad.load_checkpoint(bad)
