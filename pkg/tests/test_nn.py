import numpy as np
import pytest

from vdnavpr import nn
from vdnavpr.errors import GraphError, ShapeError
from vdnavpr.nn import AdamW, Tensor, gradient_check, triplet_loss, triplet_loss_batch
from vdnavpr.nn.tensor import conv1d, l2_normalize, take_rows

GRAD_TOL = 1e-4


def conv1d_naive(x, w, b, stride, padding):
    """Nested-loop reference convolution (cross-correlation)."""
    batch, c_in, length = x.shape
    c_out, _, kernel = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    length_out = (length + 2 * padding - kernel) // stride + 1
    out = np.zeros((batch, c_out, length_out))
    for bi in range(batch):
        for co in range(c_out):
            for lo in range(length_out):
                acc = b[co]
                for ci in range(c_in):
                    for k in range(kernel):
                        acc += xp[bi, ci, lo * stride + k] * w[co, ci, k]
                out[bi, co, lo] = acc
    return out


# ---------------------------------------------------------------- forward


def test_conv1d_identity_kernel():
    x = Tensor(np.arange(12, dtype=float).reshape(1, 1, 12))
    w = Tensor(np.ones((1, 1, 1)))
    b = Tensor(np.zeros(1))
    out = conv1d(x, w, b, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv1d_ones_kernel_hand_case():
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    w = Tensor(np.ones((1, 1, 3)))
    b = Tensor(np.zeros(1))
    out = conv1d(x, w, b, stride=1, padding=1)
    np.testing.assert_array_equal(out.data, [[[3.0, 6.0, 5.0]]])


def test_conv1d_matches_naive_reference(rng):
    for _ in range(10):
        stride = int(rng.integers(1, 4))
        padding = int(rng.integers(0, 3))
        kernel = int(rng.integers(1, 5))
        length = int(rng.integers(kernel, 15))
        c_in, c_out, batch = (int(v) for v in rng.integers(1, 5, size=3))
        x = rng.normal(size=(batch, c_in, length))
        w = rng.normal(size=(c_out, c_in, kernel))
        b = rng.normal(size=c_out)
        got = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, conv1d_naive(x, w, b, stride, padding), atol=1e-6)


def test_conv1d_rejects_collapsed_output():
    with pytest.raises(ShapeError):
        conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 5))), stride=1, padding=0)


def test_conv1d_2d_input_keeps_shape_contract():
    out = conv1d(Tensor(np.zeros((3, 10))), Tensor(np.zeros((4, 3, 3))), stride=2, padding=1)
    assert out.shape == (4, 5)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 3, 9))
    w = rng.normal(size=(4, 3, 3))
    a = conv1d(Tensor(x), Tensor(w), stride=1, padding=1).data
    b = conv1d(Tensor(x), Tensor(w), stride=1, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_l2_normalize_unit_norm(rng):
    x = Tensor(rng.normal(size=(8, 5)))
    out = l2_normalize(x, axis=-1)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-9)


def test_l2_normalize_zero_rule():
    x = Tensor(np.array([[0.0, 0.0], [1e-13, 0.0], [3.0, 4.0]]))
    out = l2_normalize(x, axis=-1)
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
    np.testing.assert_array_equal(out.data[1], [0.0, 0.0])
    np.testing.assert_allclose(out.data[2], [0.6, 0.8], atol=1e-12)


# ---------------------------------------------------------------- backward


def test_backward_before_forward_raises():
    with pytest.raises(GraphError):
        Tensor(3.0).backward()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = nn.mul(x, 2.0)
    with pytest.raises(GraphError):
        y.backward()


def test_sum_of_params_has_unit_gradients(rng):
    params = {f"p{i}": Tensor(rng.normal(size=(3, 2)), requires_grad=True) for i in range(3)}
    loss = nn.tsum(nn.concat(list(params.values()), axis=0))
    loss.backward()
    for p in params.values():
        np.testing.assert_array_equal(p.grad, np.ones((3, 2)))


def test_quadratic_form_gradient_closed_form(rng):
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = rng.normal(size=(3, 1))
    y = nn.matmul(w, Tensor(x))  # (4, 1)
    loss = nn.tsum(y * y)
    loss.backward()
    expected = 2.0 * (w.data @ x) @ x.T
    np.testing.assert_allclose(w.grad, expected, atol=1e-12)


def scalarize(t):
    """Project any tensor to a scalar with a fixed random weighting."""
    c = np.random.default_rng(99).normal(size=t.shape)
    return nn.tsum(t * Tensor(c))


OP_CASES = {}


def op_case(name):
    def register(fn):
        OP_CASES[name] = fn
        return fn

    return register


@op_case("add")
def _(p):
    return scalarize(nn.add(p["a"], p["b"]))


@op_case("sub")
def _(p):
    return scalarize(nn.sub(p["a"], p["b"]))


@op_case("mul")
def _(p):
    return scalarize(nn.mul(p["a"], p["b"]))


@op_case("matmul")
def _(p):
    return scalarize(nn.matmul(p["a"], p["m"]))


@op_case("relu")
def _(p):
    return scalarize(nn.relu(p["a"]))


@op_case("reshape")
def _(p):
    return scalarize(nn.reshape(p["a"], (p["a"].size,)))


@op_case("concat")
def _(p):
    return scalarize(nn.concat([p["a"], p["b"]], axis=1))


@op_case("take_rows")
def _(p):
    return scalarize(take_rows(p["a"], np.array([2, 0, 2, 1])))


@op_case("sum_axis")
def _(p):
    return scalarize(nn.tsum(p["a"], axis=1))


@op_case("mean_axis")
def _(p):
    return scalarize(nn.tmean(p["a"], axis=0, keepdims=True))


@op_case("l2_normalize")
def _(p):
    return scalarize(l2_normalize(p["a"], axis=-1))


@op_case("conv1d")
def _(p):
    return scalarize(conv1d(p["x3"], p["w3"], p["b3"], stride=2, padding=1))


@op_case("linear")
def _(p):
    return scalarize(nn.linear(p["a"], p["m"], p["bias"]))


@op_case("broadcast_bias")
def _(p):
    return scalarize(nn.add(p["x3"], nn.reshape(p["b3"], (1, 2, 1))))


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, rng):
    # offsets keep ReLU pre-activations away from the kink
    params = {
        "a": Tensor(rng.normal(size=(3, 4)) + 0.7, requires_grad=True),
        "b": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
        "m": Tensor(rng.normal(size=(4, 5)), requires_grad=True),
        "bias": Tensor(rng.normal(size=5), requires_grad=True),
        "x3": Tensor(rng.normal(size=(2, 2, 7)), requires_grad=True),
        "w3": Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True),
        "b3": Tensor(rng.normal(size=2), requires_grad=True),
    }
    err = gradient_check(lambda: OP_CASES[name](params), params, probes=100, rng=rng)
    assert err <= GRAD_TOL, f"{name}: relative error {err:.2e}"


# ---------------------------------------------------------------- triplet loss


def test_triplet_loss_zero_when_separated():
    a = Tensor(np.array([1.0, 0.0]))
    negs = [Tensor(np.array([0.0, 2.0])), Tensor(np.array([-2.0, 0.0]))]
    loss = triplet_loss(a, Tensor(a.data.copy()), negs, margin=0.1)
    assert loss.item() == 0.0


def test_triplet_loss_anchor_equals_negative():
    a = Tensor(np.array([0.0, 0.0]))
    p = Tensor(np.array([1.0, 0.0]))  # squared distance 1
    n = Tensor(np.array([0.0, 0.0]))  # squared distance 0
    loss = triplet_loss(a, p, [n], margin=0.1)
    assert loss.item() == pytest.approx(1.1, abs=1e-12)


def test_triplet_loss_averages_over_negatives():
    a = Tensor(np.zeros(2))
    p = Tensor(np.array([1.0, 0.0]))
    hard = Tensor(np.zeros(2))  # hinge 1.1
    easy = Tensor(np.array([0.0, 5.0]))  # hinge 0
    loss = triplet_loss(a, p, [hard, easy], margin=0.1)
    assert loss.item() == pytest.approx(0.55, abs=1e-12)


def test_triplet_loss_dimension_mismatch():
    with pytest.raises(ShapeError):
        triplet_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)), [Tensor(np.zeros(2))], margin=0.1)


def test_triplet_loss_gradient(rng):
    params = {
        "a": Tensor(rng.normal(size=(4, 6)), requires_grad=True),
        "p": Tensor(rng.normal(size=(4, 6)), requires_grad=True),
        "n": Tensor(rng.normal(size=(4, 3, 6)), requires_grad=True),
    }

    def build():
        loss, _ = triplet_loss_batch(params["a"], params["p"], params["n"], margin=0.5)
        return loss

    err = gradient_check(build, params, probes=120, rng=rng)
    assert err <= GRAD_TOL


def test_triplet_loss_batch_reports_per_triplet(rng):
    a = Tensor(np.zeros((2, 2)))
    p = Tensor(np.stack([[1.0, 0.0], [0.0, 0.0]]))
    n = Tensor(np.zeros((2, 1, 2)))
    loss, per = triplet_loss_batch(a, p, n, margin=0.1)
    np.testing.assert_allclose(per, [1.1, 0.1], atol=1e-12)
    assert loss.item() == pytest.approx(0.6, abs=1e-12)


# ---------------------------------------------------------------- AdamW


def test_adamw_zero_gradients_leave_params_untouched():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_closed_form():
    theta0, g = 1.5, 0.5
    lr, wd, eps = 0.1, 0.01, 1e-8
    beta1, beta2 = 0.9, 0.999
    p = Tensor(np.array([theta0]), requires_grad=True)
    p.grad = np.array([g])
    opt = AdamW({"p": p}, lr=lr, betas=(beta1, beta2), eps=eps, weight_decay=wd)
    opt.step()
    m_hat = (1 - beta1) * g / (1 - beta1)
    v_hat = (1 - beta2) * g * g / (1 - beta2)
    expected = theta0 - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * theta0
    assert p.data[0] == pytest.approx(expected, abs=1e-15)


def test_adamw_descends_quadratic_monotonically():
    target = 10.0
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.05, weight_decay=0.0)
    losses = []
    for _ in range(100):
        opt.zero_grad()
        diff = nn.sub(p, target)
        loss = nn.tsum(diff * diff)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    warm = losses[10:]
    assert all(b < a for a, b in zip(warm, warm[1:]))


def test_adamw_gradient_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.zeros(4)
    with pytest.raises(ShapeError):
        AdamW({"p": p}).step()


def test_adamw_state_round_trip(tmp_path, rng):
    p = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.01)
    for _ in range(3):
        opt.zero_grad()
        loss = nn.tsum(p * p)
        loss.backward()
        opt.step()
    restored = AdamW.restore({"p": p}, opt.hyperparams(), opt.state_arrays())
    assert restored.step_count == 3
    np.testing.assert_array_equal(restored.m["p"], opt.m["p"])
    np.testing.assert_array_equal(restored.v["p"], opt.v["p"])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {
        "conv0.w": rng.normal(size=(4, 1, 3)),
        "lin0.b": rng.normal(size=7),
    }
    spec_id = bytes(range(16))
    config = {"bins": 64, "note": "x"}
    path = tmp_path / "model.vprw"
    nn.save_checkpoint(path, tensors, spec_id, config)
    loaded, sid, cfg, hyper, state = nn.load_checkpoint(path)
    assert sid == spec_id and cfg == config and hyper is None and state is None
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])
    nn.save_checkpoint(tmp_path / "again.vprw", loaded, sid, cfg)
    assert path.read_bytes() == (tmp_path / "again.vprw").read_bytes()


def test_checkpoint_with_optimizer_state(tmp_path, rng):
    p = Tensor(rng.normal(size=(3,)), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.02)
    p.grad = np.ones(3)
    opt.step()
    path = tmp_path / "mid.vprw"
    nn.save_checkpoint(
        path, {"p": p.data}, bytes(16), {"bins": 8}, opt.hyperparams(), opt.state_arrays()
    )
    _, _, _, hyper, state = nn.load_checkpoint(path)
    assert hyper["step_count"] == 1
    np.testing.assert_array_equal(state["m:p"], opt.m["p"])


def test_checkpoint_truncation(tmp_path):
    path = tmp_path / "model.vprw"
    nn.save_checkpoint(path, {"p": np.zeros(4)}, bytes(16), {})
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(Exception) as err:
        nn.load_checkpoint(path)
    assert "byte" in str(err.value)
