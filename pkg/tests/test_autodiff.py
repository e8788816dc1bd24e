import numpy as np
import pytest

from srcloc.autodiff import AdamState, ParamStore, Tensor, adam_step, losses, ops
from srcloc.autodiff.params import load_params, save_params

H = 1e-5
TOL = 1e-4


def gradcheck(fn, inputs, seed=0, n_probe=40):
    """Compare reverse-mode gradients of ``<fn(*inputs), r>`` against central differences.

    Probes at most ``n_probe`` random entries per input. Returns the worst relative error.
    """
    # separate stream so the cotangent is never a copy of a seeded input
    rng = np.random.default_rng([seed, 7919])
    ts = [Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in inputs]
    out = fn(*ts)
    r = rng.normal(size=out.shape)
    out.backward(r)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in ts]

    def f(vals):
        return float((fn(*[Tensor(v) for v in vals]).values * r).sum())

    worst = 0.0
    base = [t.values.copy() for t in ts]
    for k, g in enumerate(grads):
        flat_idx = rng.choice(base[k].size, size=min(n_probe, base[k].size), replace=False)
        num = np.empty(flat_idx.size)
        for j, i in enumerate(flat_idx):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[k].flat[i] += H
            minus[k].flat[i] -= H
            num[j] = (f(plus) - f(minus)) / (2 * H)
        ana = g.reshape(-1)[flat_idx]
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-6)
        worst = max(worst, np.abs(num - ana).max() / scale)
    return worst


# --- naive oracles --------------------------------------------------------------

def conv_oracle(x, w, b, stride):
    bsz, d, h, wd, ci = x.shape
    co = w.shape[0]
    xp = np.zeros((bsz, d + 2, h + 2, wd + 2, ci))
    xp[:, 1:-1, 1:-1, 1:-1] = x
    dims = [ops.conv_out_size(n, stride) for n in (d, h, wd)]
    out = np.zeros((bsz, *dims, co))
    for n in range(bsz):
        for o in range(co):
            for i in range(dims[0]):
                for j in range(dims[1]):
                    for k in range(dims[2]):
                        patch = xp[n, i * stride:i * stride + 3, j * stride:j * stride + 3,
                                   k * stride:k * stride + 3, :]
                        out[n, i, j, k, o] = np.einsum("dhwc,cdhw->", patch, w[o]) + (b[o] if b is not None else 0)
    return out


def attention_oracle(x, p, normed=None):
    bsz, c = x.shape[0], x.shape[-1]
    src = (x if normed is None else normed).reshape(bsz, -1, c)
    out = np.empty_like(x.reshape(bsz, -1, c))
    for n in range(bsz):
        q = src[n] @ p["wq"].T + p["bq"]
        k = src[n] @ p["wk"].T + p["bk"]
        v = src[n] @ p["wv"].T + p["bv"]
        s = q @ k.T / np.sqrt(c)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        out[n] = x.reshape(bsz, -1, c)[n] + (a @ v) @ p["wo"].T + p["bo"]
    return out.reshape(x.shape)


def attn_params(rng, c, scale=0.5):
    return {k: rng.normal(size=(c, c)) * scale if k.startswith("w") else rng.normal(size=c) * 0.1
            for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


ATTN_ORDER = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


# --- convolution ---------------------------------------------------------------------

@pytest.mark.parametrize("dims,ci,co,stride", [
    ((3, 4, 5), 2, 3, 1), ((4, 4, 4), 3, 2, 2), ((5, 3, 4), 1, 2, 2),
    ((8, 8, 8), 2, 3, 1), ((8, 9, 10), 3, 2, 1), ((9, 8, 8), 2, 17, 1),
])
def test_conv_matches_seven_loop_oracle(dims, ci, co, stride, rng):
    x = rng.normal(size=(2, *dims, ci))
    w = rng.normal(size=(co, ci, 3, 3, 3))
    b = rng.normal(size=co)
    got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride).values
    assert np.allclose(got, conv_oracle(x, w, b, stride), atol=1e-10)


def test_conv_identity_kernel_and_zero_input(rng):
    x = rng.normal(size=(1, 8, 8, 8, 3))
    w = np.zeros((3, 3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1, 1] = 1.0
    assert np.array_equal(ops.conv3d(Tensor(x), Tensor(w)).values, x)
    b = rng.normal(size=3)
    out = ops.conv3d(Tensor(np.zeros_like(x)), Tensor(rng.normal(size=w.shape)), Tensor(b)).values
    assert np.allclose(out, np.broadcast_to(b, out.shape))


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(ops.ShapeError):
        ops.conv3d(Tensor(rng.normal(size=(1, 4, 4, 4, 2))), Tensor(rng.normal(size=(2, 3, 3, 3, 3))))
    with pytest.raises(ops.ShapeError):
        ops.conv3d(Tensor(rng.normal(size=(1, 4, 4, 4, 2))), Tensor(rng.normal(size=(2, 2, 3, 3, 3))), stride=3)


@pytest.mark.parametrize("dims,ci,co,stride,seed", [
    ((3, 3, 3), 2, 2, 1, 0), ((4, 5, 3), 1, 3, 1, 1), ((4, 4, 4), 2, 3, 2, 2),
    ((5, 5, 5), 3, 2, 2, 3), ((8, 8, 8), 2, 3, 1, 4), ((8, 8, 9), 3, 20, 1, 5),
    ((10, 8, 8), 4, 2, 1, 6), ((8, 8, 8), 2, 2, 2, 7),
])
def test_conv_gradcheck(dims, ci, co, stride, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, *dims, ci)), rng.normal(size=(co, ci, 3, 3, 3)), rng.normal(size=co)
    assert gradcheck(lambda x, w, b: ops.conv3d(x, w, b, stride=stride), [x, w, b], seed) < TOL


# --- resampling, pointwise, normalisation --------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_resampling_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 4, 2, 3))
    assert gradcheck(ops.upsample_nearest2x, [x], seed) < TOL
    assert gradcheck(ops.avg_pool2x, [x], seed) < TOL


def test_resampling_values(rng):
    x = rng.normal(size=(1, 2, 2, 2, 1))
    up = ops.upsample_nearest2x(Tensor(x)).values
    assert up.shape == (1, 4, 4, 4, 1)
    assert up[0, 3, 2, 1, 0] == x[0, 1, 1, 0, 0]
    assert np.allclose(ops.avg_pool2x(Tensor(up)).values, x)
    with pytest.raises(ops.ShapeError):
        ops.avg_pool2x(Tensor(np.zeros((1, 3, 2, 2, 1))))


@pytest.mark.parametrize("act", [None, "silu"])
@pytest.mark.parametrize("c,groups,seed", [(4, 2, 0), (6, 3, 1), (8, 8, 2), (3, 1, 3)])
def test_group_norm_gradcheck(c, groups, seed, act):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 2, 4, c)) * 3 + 1
    gain, bias = rng.normal(size=c), rng.normal(size=c)
    fn = lambda x, g, b: ops.group_norm(x, groups, g, b, act=act)  # noqa: E731
    assert gradcheck(fn, [x, gain, bias], seed) < TOL


def test_group_norm_standardises(rng):
    x = rng.normal(size=(3, 4, 4, 4, 8)) * 5 + 2
    out = ops.group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8))).values
    per = out.reshape(3, -1, 4, 2)
    assert np.allclose(per.mean(axis=(1, 3)), 0, atol=1e-12)
    assert np.allclose(per.var(axis=(1, 3)), 1, atol=1e-4)
    const = ops.group_norm(Tensor(np.full((1, 2, 2, 2, 4), 7.0)), 2, Tensor(np.ones(4)),
                           Tensor(np.arange(4.0))).values
    assert np.allclose(const, np.arange(4.0))
    fused = ops.group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8)), act="silu").values
    assert np.allclose(fused, ops.silu(Tensor(out)).values)
    with pytest.raises(ops.ShapeError):
        ops.group_norm(Tensor(x), 3, Tensor(np.ones(8)), Tensor(np.zeros(8)))


def test_silu_values_and_derivative():
    assert ops.silu(Tensor(np.array([20.0]))).values[0] == pytest.approx(20.0, rel=1e-8)
    assert ops.silu(Tensor(np.array([0.0]))).values[0] == 0
    x = np.linspace(-6, 6, 25)
    t = Tensor(x, requires_grad=True)
    ops.total(ops.silu(t)).backward()
    s = 1 / (1 + np.exp(-x))
    assert np.allclose(t.grad, s + x * s * (1 - s), atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_pointwise_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4))
    assert gradcheck(ops.silu, [a], seed) < TOL
    assert gradcheck(ops.mul, [a, b], seed) < TOL
    assert gradcheck(lambda a, b: ops.sub(ops.add(a, b), ops.scale(a, 2.5)), [a, b], seed) < TOL
    assert gradcheck(lambda a, b: ops.concat([a, b], axis=-1), [a, b], seed) < TOL
    assert gradcheck(lambda a, b: ops.concat([a, b], axis=1), [a, b], seed) < TOL
    w, bias = rng.normal(size=(5, 4)), rng.normal(size=5)
    assert gradcheck(ops.linear, [a, w, bias], seed) < TOL


def test_take_voxels_gradcheck_and_values(rng):
    x = rng.normal(size=(2, 3, 3, 3, 2))
    idx = np.array([0, 5, 13, 26])
    out = ops.take_voxels(Tensor(x), idx).values
    assert np.array_equal(out, x.reshape(2, -1, 2)[:, idx])
    assert gradcheck(lambda x: ops.take_voxels(x, idx), [x]) < TOL


# --- attention ----------------------------------------------------------------------

@pytest.mark.parametrize("use_normed", [False, True])
def test_attention_matches_dense_oracle(rng, use_normed):
    c = 4
    x = rng.normal(size=(2, 2, 3, 2, c))
    normed = rng.normal(size=x.shape) if use_normed else None
    p = attn_params(rng, c)
    got = ops.attention(Tensor(x), *(Tensor(p[k]) for k in ATTN_ORDER),
                        normed=None if normed is None else Tensor(normed)).values
    assert np.allclose(got, attention_oracle(x, p, normed), atol=1e-12)


def test_attention_zero_projection_is_identity(rng):
    c = 3
    x = rng.normal(size=(1, 2, 2, 2, c))
    p = attn_params(rng, c)
    p["wo"][:] = 0
    p["bo"][:] = 0
    got = ops.attention(Tensor(x), *(Tensor(p[k]) for k in ATTN_ORDER)).values
    assert np.array_equal(got, x)


def test_attention_single_token_returns_projected_value(rng):
    c = 3
    x = rng.normal(size=(2, 1, 1, 1, c))
    p = attn_params(rng, c)
    got = ops.attention(Tensor(x), *(Tensor(p[k]) for k in ATTN_ORDER)).values.reshape(2, c)
    v = x.reshape(2, c) @ p["wv"].T + p["bv"]
    assert np.allclose(got, x.reshape(2, c) + v @ p["wo"].T + p["bo"])


@pytest.mark.parametrize("use_normed,seed", [(False, 0), (True, 1), (False, 2)])
def test_attention_gradcheck(use_normed, seed):
    rng = np.random.default_rng(seed)
    c = 3
    x = rng.normal(size=(2, 2, 2, 2, c))
    p = attn_params(rng, c)
    inputs = [x] + [p[k] for k in ATTN_ORDER]
    if use_normed:
        inputs.append(rng.normal(size=x.shape))
        fn = lambda x, *rest: ops.attention(x, *rest[:8], normed=rest[8])  # noqa: E731
    else:
        fn = ops.attention
    assert gradcheck(fn, inputs, seed) < TOL


# --- losses -----------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(size=(2, 2, 5, 3))
    gain, y = rng.normal(size=(4, 15)), rng.normal(size=(2, 4))
    for kind in ("l1", "l2", "cosine"):
        assert gradcheck(lambda p: losses.compute_loss(kind, p, target), [pred], seed) < TOL
    fn = lambda p: losses.l1_plus_recon(p, target, gain, y, lambda_rec=0.3)  # noqa: E731
    assert gradcheck(fn, [pred], seed) < TOL


def test_loss_values(rng):
    pred, target = rng.normal(size=(2, 2, 5, 3))
    assert losses.l1(Tensor(pred), target).values == pytest.approx(np.abs(pred - target).mean())
    assert losses.l2(Tensor(pred), target).values == pytest.approx(((pred - target) ** 2).mean())
    assert losses.cosine(Tensor(pred), pred).values == pytest.approx(0.0, abs=1e-12)
    assert losses.cosine(Tensor(pred), -pred).values == pytest.approx(2.0)
    gain = rng.normal(size=(4, 15))
    y = pred.reshape(2, -1) @ gain.T
    assert losses.l1_plus_recon(Tensor(pred), pred, gain, y).values == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        losses.compute_loss("huber", Tensor(pred), target)
    with pytest.raises(ops.ShapeError):
        losses.l1(Tensor(pred), target[:, :3])


# --- graph mechanics -------------------------------------------------------------------

def test_diamond_graph_accumulates():
    a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    b = ops.mul(a, a)
    out = ops.total(ops.add(ops.scale(b, 3.0), b))  # 4 a^2
    out.backward()
    assert np.allclose(a.grad, 8 * a.values)


def test_constants_get_no_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.arange(3.0))
    ops.total(ops.mul(a, c)).backward()
    assert c.grad is None
    assert np.array_equal(a.grad, np.arange(3.0))


def test_backward_needs_scalar_seed():
    with pytest.raises(ValueError):
        ops.scale(Tensor(np.ones(3), requires_grad=True), 2.0).backward()


# --- optimiser and parameter store ---------------------------------------------------------

def test_adam_first_step_is_lr_times_sign():
    ps = ParamStore()
    p = ps.add("w", np.array([1.0, -1.0, 0.5]))
    p.grad = np.array([3.0, -0.2, 1e-3])
    st = AdamState(lr=0.01)
    adam_step(ps, st)
    assert np.allclose(p.values, [0.99, -0.99, 0.49], atol=1e-6)


def test_adam_zero_gradient_leaves_params():
    ps = ParamStore()
    p = ps.add("w", np.array([1.0, 2.0]))
    adam_step(ps, AdamState(lr=0.1))
    assert np.array_equal(p.values, [1.0, 2.0])


def test_adam_decreases_quadratic():
    ps = ParamStore()
    p = ps.add("w", np.array([3.0, -4.0]))
    st = AdamState(lr=0.05)
    last = np.inf
    for _ in range(200):
        ps.zero_grad()
        loss = ops.total(ops.mul(p, p))
        assert float(loss.values) <= last + 1e-12
        last = float(loss.values)
        loss.backward()
        adam_step(ps, st)
    assert last < 1e-2


def test_param_store_round_trip(tmp_path, rng):
    ps = ParamStore()
    ps.add("a.w", rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32))
    ps.add("a.b", np.zeros(3, dtype=np.float32))
    ps.add("h", rng.normal(size=4))
    save_params(ps, tmp_path / "p")
    other = ParamStore()
    for k, t in ps.items():
        other.add(k, np.zeros_like(t.values))
    load_params(other, tmp_path / "p")
    assert other.digest() == ps.digest()
    assert other["h"].dtype == np.float64 and other["a.w"].dtype == np.float32
    with pytest.raises(KeyError):
        ps.add("h", np.zeros(1))
