import math

import numpy as np
import pytest

from driveref import autodiff as ad
from driveref.errors import DegenerateVector, ShapeError, StoreError, UsageError


def _naive_conv(x, k, b):
    # zero "same" padding: extra row/column goes after the input, as in the engine
    bsz, h, w, _ = x.shape
    kh, kw, _, cout = k.shape
    top, left = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((bsz, h, w, cout))
    for n in range(bsz):
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    s = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - top, j + dj - left
                            if 0 <= ii < h and 0 <= jj < w:
                                s += np.dot(x[n, ii, jj], k[di, dj, :, o])
                    out[n, i, j, o] = s
    return out


def _gradcheck(f, arrays, h=1e-5):
    """Max relative error between tape gradients and central differences."""
    params = [ad.parameter(a) for a in arrays]
    loss = f(*params)
    loss.backward()
    worst = 0.0
    for p in params:
        num = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = f(*[ad.Tensor(q.data) for q in params]).item()
            p.data[idx] = orig - h
            fm = f(*[ad.Tensor(q.data) for q in params]).item()
            p.data[idx] = orig
            num[idx] = (fp - fm) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(p.grad).max(), 1e-8)
        worst = max(worst, np.abs(num - p.grad).max() / scale)
    return worst


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0] = np.eye(3)
    np.testing.assert_array_equal(ad.conv2d(x, k, np.zeros(3)).data, x)


def test_conv_constant_interior():
    x = np.full((1, 4, 4, 1), 2.5)
    out = ad.conv2d(x, np.ones((2, 2, 1, 1)), np.array([0.5])).data
    assert out[0, 1, 1, 0] == 4 * 2.5 + 0.5


@pytest.mark.parametrize("kshape", [(2, 2, 3, 4), (3, 3, 3, 2)])
def test_conv_matches_naive(rng, kshape):
    x = rng.normal(size=(2, 5, 4, 3))
    k, b = rng.normal(size=kshape), rng.normal(size=kshape[-1])
    np.testing.assert_allclose(ad.conv2d(x, k, b).data, _naive_conv(x, k, b), atol=1e-12)


def test_conv_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        ad.conv2d(rng.normal(size=(1, 4, 4, 3)), rng.normal(size=(2, 2, 2, 1)))


def test_avg_pool_examples():
    x = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
    assert ad.avg_pool(x).data.ravel().tolist() == [2.0]
    c = np.full((2, 36, 6, 4), 1.7)
    out = ad.avg_pool(c).data
    assert out.shape == (2, 18, 6, 4) and np.all(out == 1.7)
    odd = np.arange(35.0).reshape(1, 35, 1, 1)
    out = ad.avg_pool(odd).data.ravel()
    assert out.shape == (18,) and out[-1] == 34.0 and out[0] == 0.5
    with pytest.raises(ShapeError):
        ad.avg_pool(np.zeros((1, 1, 2, 2)))


def test_elementwise_examples():
    assert ad.relu(np.array([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert ad.sigmoid(np.array([0.0])).data[0] == 0.5
    xs = [np.zeros((1, 36, 2, 128))] * 3
    assert ad.concat(xs, axis=2).shape == (1, 36, 6, 128)
    with pytest.raises(ShapeError):
        ad.concat([np.zeros((1, 36, 2, 4)), np.zeros((1, 18, 2, 4))], axis=2)


def test_dense_param_count():
    class Dense:
        def parameters(self):
            return [ad.parameter(np.zeros((10, 3))), ad.parameter(np.zeros(3))]
    assert ad.param_count(Dense()) == 33


def test_mad_loss_values(rng):
    g = rng.normal(size=(8, 3))
    # clamp floor is acos(1 - 1e-7), about sqrt(2e-7)
    assert ad.mad_loss(ad.Tensor(3.0 * g), g).item() <= math.acos(1 - 1e-7) + 1e-12
    p = np.cross(g, rng.normal(size=(8, 3)))
    assert ad.mad_loss(ad.Tensor(p), g).item() == pytest.approx(math.pi / 2, abs=1e-12)
    p = rng.normal(size=(8, 3))
    assert ad.mad_loss(ad.Tensor(2 * p), g).item() == pytest.approx(ad.mad_loss(ad.Tensor(p), g).item(), abs=1e-9)
    with pytest.raises(DegenerateVector):
        ad.mad_loss(ad.Tensor(np.zeros((1, 3))), g[:1])


def test_bce_values():
    assert ad.bce_loss(ad.Tensor(np.full((4, 1), 0.5)), [0, 1, 0, 1]).item() == pytest.approx(math.log(2))
    assert ad.bce_loss(ad.Tensor(np.array([[1.0], [0.0]])), [1, 0]).item() < 1e-11


def test_gradcheck_losses(rng):
    g = rng.normal(size=(6, 3))
    assert _gradcheck(lambda p: ad.mad_loss(p, g), [rng.normal(size=(6, 3))]) < 1e-4
    y = rng.integers(0, 2, size=6)
    assert _gradcheck(lambda z: ad.bce_loss(ad.sigmoid(z), y), [rng.normal(size=(6, 1))]) < 1e-4


def test_gradcheck_ops(rng):
    x0 = rng.normal(size=(2, 5, 3, 2))

    def f(x, k, b, w, c):
        h = ad.relu(ad.conv2d(x, k, b))
        h = ad.avg_pool(h)
        h = ad.concat([h, ad.mul(h, 0.5)], axis=2)
        pooled = ad.time_avg_pool(h)
        out = ad.sigmoid(ad.dense(ad.flatten(pooled), w, c))
        return ad.add(ad.mean_all(out), ad.mean_all(ad.global_avg_pool(h)))

    arrays = [x0, rng.normal(size=(2, 2, 2, 3)), rng.normal(size=3), rng.normal(size=(18, 2)), rng.normal(size=2)]
    assert _gradcheck(f, arrays) < 1e-4


def test_quadratic_gradient(rng):
    w = ad.parameter(rng.normal(size=5))
    ad.sum_all(ad.mul(w, w)).backward()
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_backward_twice_raises():
    w = ad.parameter(np.ones(3))
    loss = ad.sum_all(ad.mul(w, w))
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()


def test_no_grad_records_nothing():
    w = ad.parameter(np.ones(3))
    with ad.no_grad():
        out = ad.mul(w, w)
    assert not out.requires_grad


def test_adam_single_step():
    w = ad.parameter(np.array([1.0, -2.0, 0.5]))
    g = np.array([0.3, -0.01, 0.0])
    w.grad = g.copy()
    opt = ad.Adam([w], lr=0.001)
    opt.step()
    m_hat = (0.1 * g) / 0.1
    v_hat = (0.001 * g * g) / 0.001
    expected = np.array([1.0, -2.0, 0.5]) - 0.001 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(w.data, expected, rtol=0, atol=1e-15)
    # the first step moves every non-zero-gradient weight by about lr
    assert w.data[0] == pytest.approx(1.0 - 0.001, abs=1e-9)


def test_plateau_schedule():
    s = ad.PlateauSchedule(lr0=1e-3, factor=0.5, patience=5, min_lr=1e-5)
    s.step(1.0)
    lrs = [s.step(1.0) for _ in range(5)]
    assert lrs[:4] == [1e-3] * 4 and lrs[4] == 5e-4
    for _ in range(100):
        s.step(2.0)
    assert s.lr == 1e-5


def test_deterministic_replay(rng):
    def run():
        r = np.random.default_rng(0)
        w = ad.parameter(r.normal(size=(3, 3)))
        opt = ad.Adam([w])
        x, g = r.normal(size=(16, 3)), r.normal(size=(16, 3))
        losses = []
        for _ in range(20):
            loss = ad.mad_loss(ad.dense(ad.Tensor(x), w), g)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses
    assert run() == run()


def test_weight_file_round_trip(tmp_path, rng):
    named = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
    path = tmp_path / "w.bin"
    ad.save_weights(path, named, "fusion-abc")
    back = ad.load_weights(path, "fusion-abc")
    assert list(back) == ["a", "b"]
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])
    with pytest.raises(StoreError):
        ad.load_weights(path, "fusion-other")
    (tmp_path / "junk.bin").write_bytes(b"junk")
    with pytest.raises(StoreError):
        ad.load_weights(tmp_path / "junk.bin")
