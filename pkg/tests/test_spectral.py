import math

import numpy as np
import pytest

from refseg import spectral as S
from refseg import tensor as T
from refseg.tensor import ParamStore, Tensor, grad_check


def naive_idft2_real(z):
    h, w = z.shape
    out = np.zeros((h, w))
    for m in range(h):
        for n in range(w):
            acc = 0j
            for u in range(h):
                for v in range(w):
                    acc += z[u, v] * np.exp(2j * np.pi * (u * m / h + v * n / w))
            out[m, n] = (acc / (h * w)).real
    return out


def circular_conv(g, x):
    h, w = x.shape
    out = np.zeros((h, w))
    for m in range(h):
        for n in range(w):
            acc = 0.0
            for a in range(h):
                for b in range(w):
                    acc += g[a, b] * x[(m - a) % h, (n - b) % w]
            out[m, n] = acc
    return out


def spatial_sa_oracle(x, gauss, conv_w, conv_b):
    """Residual spectral block evaluated without any FFT.

    With the real part kept after the inverse transform, the real->real block of
    the channel mix acts on the even part of each channel, the imag->imag block
    on the odd part, and the real bias lands as an impulse at the origin.
    """
    c, h, w = x.shape
    g = naive_idft2_real(gauss)
    mirror = np.roll(np.flip(x, axis=(1, 2)), shift=(1, 1), axis=(1, 2))
    even = [circular_conv(g, 0.5 * (x[k] + mirror[k])) for k in range(c)]
    odd = [circular_conv(g, 0.5 * (x[k] - mirror[k])) for k in range(c)]
    out = x.copy()
    for o in range(c):
        for k in range(c):
            out[o] += conv_w[o, k] * even[k] + conv_w[c + o, c + k] * odd[k]
        out[o, 0, 0] += conv_b[o]
    return out


def random_sa_params(rng, c, scale=0.5):
    return {
        "conv_w": Tensor(rng.normal(0, scale, (2 * c, 2 * c))),
        "conv_b": Tensor(rng.normal(0, scale, 2 * c)),
        "scale_w": Tensor(rng.normal(0, 0.3, (c, 1))),
        "scale_b": Tensor(np.array([0.2])),
    }


def closed_form_gaussian(h, w, k, s):
    out = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            du = min(u, h - u) / h
            dv = min(v, w - v) / w
            out[u, v] = math.exp(-(du * du + dv * dv) / (2 * (s * k) ** 2))
    return out


class TestGaussianFilter:
    def test_closed_form(self):
        feat = Tensor(np.random.default_rng(0).normal(size=(2, 8, 8)))
        g = S.make_gaussian_lowpass(0.25, feat, {}, scale=Tensor(np.ones((1, 1, 1))))
        np.testing.assert_allclose(g.data[0], closed_form_gaussian(8, 8, 0.25, 1.0), rtol=1e-14)
        # K = 0.25, s = 1 gives exp(-d^2 / 0.125)
        d2 = (2 / 8) ** 2 + (1 / 8) ** 2
        assert g.data[0, 2, 1] == pytest.approx(math.exp(-d2 / 0.125), rel=1e-14)

    def test_infinite_bandwidth_is_all_pass(self):
        feat = Tensor(np.random.default_rng(1).normal(size=(3, 6, 4)))
        g = S.make_gaussian_lowpass(0.25, feat, {}, scale=Tensor(np.full((1, 1, 1), 1e12)))
        np.testing.assert_allclose(g.data, 1.0, atol=1e-12)

    @pytest.mark.parametrize("k", [0.05, 0.25, 1.0])
    def test_dc_is_one_and_monotone(self, k):
        rng = np.random.default_rng(2)
        params = random_sa_params(rng, 3)
        feat = Tensor(rng.normal(size=(3, 7, 8)))
        g = S.make_gaussian_lowpass(k, feat, params).data[0]
        assert g[0, 0] == 1.0
        r = S.frequency_radius(7, 8).ravel()
        order = np.argsort(r, kind="stable")
        vals = g.ravel()[order]
        assert np.all(np.diff(vals)[np.diff(r[order]) > 0] <= 0)
        assert np.all((g > 0) & (g <= 1))

    def test_scale_is_positive(self):
        rng = np.random.default_rng(3)
        params = random_sa_params(rng, 4)
        params["scale_b"] = Tensor(np.array([-50.0]))
        s = S.filter_scale(Tensor(rng.normal(size=(2, 4, 3, 3))), params)
        assert s.shape == (2, 1, 1, 1)
        assert np.all(s.data > 0)

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ValueError):
            S.make_gaussian_lowpass(0.0, Tensor(np.zeros((1, 2, 2))), {})


class TestSpectrumAugment:
    def test_zero_conv_is_identity(self):
        rng = np.random.default_rng(4)
        params = random_sa_params(rng, 2)
        params["conv_w"] = Tensor(np.zeros((4, 4)))
        params["conv_b"] = Tensor(np.zeros(4))
        x = rng.normal(size=(2, 5, 4))
        np.testing.assert_array_equal(S.spectrum_augment(x, 0.25, params).data, x)

    def test_identity_conv_all_pass_doubles(self):
        rng = np.random.default_rng(5)
        params = {"conv_w": Tensor(np.eye(4)), "conv_b": Tensor(np.zeros(4))}
        x = rng.normal(size=(2, 4, 6))
        y = S.spectrum_augment(x, 0.25, params, gauss=Tensor(np.ones((1, 4, 6))))
        assert np.max(np.abs(y.data - 2 * x)) < 1e-9

    def test_matches_spatial_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 4, 4))
        gauss = closed_form_gaussian(4, 4, 0.25, 1.3)
        params = random_sa_params(rng, 2)
        y = S.spectrum_augment(x, 0.25, params, gauss=Tensor(gauss[None])).data
        ref = spatial_sa_oracle(x, gauss, params["conv_w"].data, params["conv_b"].data)
        assert np.max(np.abs(y - ref)) / np.max(np.abs(ref)) < 1e-8

    def test_matches_oracle_with_predicted_filter(self):
        rng = np.random.default_rng(7)
        params = random_sa_params(rng, 2)
        x = rng.normal(size=(2, 6, 5))
        gauss = S.make_gaussian_lowpass(0.25, Tensor(x), params).data[0]
        y = S.spectrum_augment(x, 0.25, params).data
        ref = spatial_sa_oracle(x, gauss, params["conv_w"].data, params["conv_b"].data)
        assert np.max(np.abs(y - ref)) / np.max(np.abs(ref)) < 1e-8

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(8)
        params = random_sa_params(rng, 3)
        x = rng.normal(size=(2, 3, 3, 4, 4))
        y = S.spectrum_augment(x, 0.25, params).data
        for i in range(2):
            for j in range(3):
                np.testing.assert_allclose(y[i, j], S.spectrum_augment(x[i, j], 0.25, params).data,
                                           rtol=1e-12, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        store = ParamStore({k: v.data for k, v in random_sa_params(rng, 3).items()})
        x = rng.normal(size=(1, 3, 4, 4))
        probe = rng.normal(size=(1, 3, 4, 4))
        assert grad_check(lambda: T.tsum(S.spectrum_augment(x, 0.25, store.tree()) * probe), store) < 1e-4


class TestCrossAttention:
    def identity(self, c):
        return {k: Tensor(np.eye(c)) for k in ("wq", "wk", "wv")}

    def test_single_key(self):
        rng = np.random.default_rng(10)
        params = S.init_attention_params(rng, 4)
        params = {k: Tensor(v) for k, v in params.items()}
        kv = rng.normal(size=(1, 4))
        out = S.cross_attention(rng.normal(size=(5, 4)), kv, params).data
        np.testing.assert_allclose(out, np.repeat(kv @ params["wv"].data, 5, axis=0), rtol=1e-14)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(11)
        params = {k: Tensor(v) for k, v in S.init_attention_params(rng, 3).items()}
        kv = np.repeat(rng.normal(size=(1, 3)), 4, axis=0)
        out = S.cross_attention(rng.normal(size=(2, 3)), kv, params).data
        np.testing.assert_allclose(out, np.repeat((kv @ params["wv"].data).mean(0, keepdims=True), 2, 0),
                                   rtol=1e-13)

    def test_hand_softmax(self):
        q = np.array([[1.0, 0.0], [0.0, 2.0]])
        kv = np.array([[1.0, 2.0], [3.0, -1.0]])
        out = S.cross_attention(q, kv, self.identity(2)).data
        r = math.sqrt(2.0)
        # query 0: logits 1/r, 3/r ; query 1: logits 4/r, -2/r
        w0 = math.exp(1 / r) / (math.exp(1 / r) + math.exp(3 / r))
        w1 = math.exp(4 / r) / (math.exp(4 / r) + math.exp(-2 / r))
        expected = np.array([
            [w0 * 1 + (1 - w0) * 3, w0 * 2 + (1 - w0) * -1],
            [w1 * 1 + (1 - w1) * 3, w1 * 2 + (1 - w1) * -1],
        ])
        np.testing.assert_allclose(out, expected, atol=1e-12, rtol=0)

    def test_empty_context(self):
        with pytest.raises(S.EmptyContextError):
            S.cross_attention(np.zeros((2, 3)), np.zeros((0, 3)), self.identity(3))

    def test_key_mask_matches_truncation(self):
        rng = np.random.default_rng(12)
        params = {k: Tensor(v) for k, v in S.init_attention_params(rng, 4).items()}
        q, kv = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        masked = S.cross_attention(q, kv, params, key_mask=np.array([1, 1, 1, 0, 0], bool)).data
        np.testing.assert_allclose(masked, S.cross_attention(q, kv[:3], params).data, rtol=1e-13)


def scf_params(rng, c):
    return {
        "pre": random_sa_params(rng, c, 0.2),
        "post": random_sa_params(rng, c, 0.2),
        "att": {k: Tensor(v) for k, v in S.init_attention_params(rng, c).items()},
    }


class TestSCF:
    def test_stubbed_attention(self, monkeypatch):
        rng = np.random.default_rng(13)
        params = scf_params(rng, 3)
        fv = Tensor(rng.normal(size=(3, 4, 4)))
        fw = rng.normal(size=(2, 3))
        monkeypatch.setattr(S, "cross_attention", lambda q, kv, p, m=None: T.as_tensor(np.ones(q.shape)))
        out = S.scf(fw, fv, params).data
        ref = S.spectrum_augment(S.spectrum_augment(fv, 0.25, params["pre"]), 0.25, params["post"]).data
        # the token round trip changes memory layout, so FFT rounding may differ in the last ulp
        np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-14)

    @pytest.mark.parametrize("shape", [(4, 2, 3), (4, 8, 8), (2, 4, 1, 5)])
    def test_shape(self, shape):
        rng = np.random.default_rng(14)
        c = shape[-3]
        out = S.scf(rng.normal(size=(3, c)), rng.normal(size=shape), scf_params(rng, c))
        assert out.shape == shape

    def test_disabled_is_gated_attention(self):
        rng = np.random.default_rng(15)
        params = scf_params(rng, 2)
        fv, fw = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 2))
        out = S.scf(fw, fv, params, enabled=False).data
        tokens = fv.reshape(2, 9).T
        att = S.cross_attention(tokens, fw, params["att"]).data
        np.testing.assert_allclose(out, (tokens * att).T.reshape(2, 3, 3), rtol=1e-14)

    def test_gradients(self):
        rng = np.random.default_rng(16)
        raw = scf_params(rng, 8)
        store = ParamStore({f"{blk}.{k}": v.data for blk in raw for k, v in raw[blk].items()})
        fv = rng.normal(size=(1, 8, 4, 4))
        fw = rng.normal(size=(1, 3, 8))
        probe = rng.normal(size=(1, 8, 4, 4))
        err = grad_check(lambda: T.tsum(S.scf(fw, fv, store.tree()) * probe), store)
        assert err < 1e-4
