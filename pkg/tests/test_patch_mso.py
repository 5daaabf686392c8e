import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refseg import mso as M
from refseg import patch as P
from refseg import tensor as T
from refseg.tensor import ParamStore, Tensor, grad_check


def as_tensors(tree):
    return {k: as_tensors(v) if isinstance(v, dict) else Tensor(v) for k, v in tree.items()}


def flat(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out.update(flat(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def token_mlp_oracle(kernel, feat, c, patch, hidden):
    """Two-layer MLP applied pixel by pixel with explicit ascending sums."""
    p2 = patch * patch
    w1 = kernel[:c * hidden].reshape(hidden, c)
    b1 = kernel[c * hidden:c * hidden + hidden]
    w2 = kernel[c * hidden + hidden:c * hidden + hidden + hidden * p2].reshape(p2, hidden)
    b2 = kernel[c * hidden + hidden + hidden * p2:]
    _, h, w = feat.shape
    out = np.zeros((p2, h, w))
    for i in range(h):
        for j in range(w):
            hid = np.zeros(hidden)
            for o in range(hidden):
                acc = 0.0
                for k in range(c):
                    acc += w1[o, k] * feat[k, i, j]
                hid[o] = max(acc + b1[o], 0.0)
            for o in range(p2):
                acc = 0.0
                for k in range(hidden):
                    acc += w2[o, k] * hid[k]
                out[o, i, j] = acc + b2[o]
    return out


class TestKernelLayout:
    def test_full_scale_length(self):
        assert P.kernel_length(256, 4, 16) == 4096 + 16 + 256 + 16 == 4384

    def test_split_shapes(self):
        flat_k = Tensor(np.arange(P.kernel_length(3, 2, 5), dtype=float))
        w1, b1, w2, b2 = P.split_kernel(flat_k, 3, 2, 5)
        assert (w1.shape, b1.shape, w2.shape, b2.shape) == ((5, 3), (5,), (4, 5), (4,))
        assert w1.data[0, 0] == 0 and b2.data[-1] == flat_k.data[-1]


class TestPredictCPK:
    def test_zero_fc(self):
        rng = np.random.default_rng(0)
        params = as_tensors(P.init_cpk_params(rng, 4, 2, 3))
        params["fc_w"] = Tensor(np.zeros_like(params["fc_w"].data))
        params["fc_b"] = Tensor(np.zeros_like(params["fc_b"].data))
        k = P.predict_cpk(rng.normal(size=(5, 4)), rng.normal(size=(7, 4)), params, 2, 3)
        assert k.shape == (5, P.kernel_length(4, 2, 3))
        np.testing.assert_array_equal(k.data, 0.0)

    def test_distinct_queries_distinct_kernels(self):
        rng = np.random.default_rng(1)
        params = as_tensors(P.init_cpk_params(rng, 4))
        tokens = rng.normal(size=(9, 4))
        a = P.predict_cpk(rng.normal(size=(5, 4)), tokens, params).data
        b = P.predict_cpk(rng.normal(size=(5, 4)), tokens, params).data
        assert np.all(np.abs(a - b).max(axis=-1) > 1e-9)

    def test_width_mismatch(self):
        rng = np.random.default_rng(2)
        params = as_tensors(P.init_cpk_params(rng, 4, patch=4))
        with pytest.raises(P.ConfigError):
            P.predict_cpk(rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), params, patch=2)


class TestApplyCPK:
    def test_zero_kernel(self):
        feat = np.random.default_rng(3).normal(size=(4, 3, 3))
        out = P.apply_cpk(np.zeros((2, P.kernel_length(4))), feat)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_stride16_shape(self):
        h, w = 64, 96
        feat = np.random.default_rng(4).normal(size=(8, h // 16, w // 16))
        k = np.random.default_rng(5).normal(size=(1, P.kernel_length(8)))
        out = P.apply_cpk(k, feat)
        # channel-first layout of the (H/i, W/i, p^2) patch mask
        assert out.shape == (1, 16, h // 16, w // 16)

    def test_matches_per_token_oracle(self):
        rng = np.random.default_rng(6)
        c, patch, hidden = 5, 2, 6
        kernels = rng.normal(size=(3, P.kernel_length(c, patch, hidden)))
        feat = rng.normal(size=(c, 3, 2))
        out = P.apply_cpk(kernels, feat, patch=patch, hidden=hidden).data
        for n in range(3):
            np.testing.assert_array_equal(out[n], token_mlp_oracle(kernels[n], feat, c, patch, hidden))

    def test_channel_mismatch(self):
        with pytest.raises((T.ShapeError, P.ConfigError)):
            P.apply_cpk(np.zeros((1, P.kernel_length(4))), np.zeros((5, 2, 2)))

    def test_locally_linear(self):
        rng = np.random.default_rng(7)
        k = rng.normal(size=(1, P.kernel_length(4, 2, 4)))
        feat = rng.normal(size=(4, 3, 3))
        d = rng.normal(size=feat.shape) * 1e-7
        base = P.apply_cpk(k, feat, patch=2, hidden=4).data
        plus = P.apply_cpk(k, feat + d, patch=2, hidden=4).data
        minus = P.apply_cpk(k, feat - d, patch=2, hidden=4).data
        np.testing.assert_allclose(plus - base, base - minus, atol=1e-12)

    def test_end_to_end_gradients(self):
        rng = np.random.default_rng(8)
        c = 4
        store = ParamStore(flat(P.init_cpk_params(rng, c, 2, 4)))
        q = rng.normal(size=(2, c))
        tokens = rng.normal(size=(6, c))
        feat = rng.normal(size=(c, 2, 3))
        probe = rng.normal(size=(2, 4, 2, 3))

        def f():
            k = P.predict_cpk(q, tokens, store.tree(), 2, 4)
            return T.tsum(P.apply_cpk(k, feat, patch=2, hidden=4) * probe)

        assert grad_check(f, store) < 1e-4


class TestFlatten:
    def test_p1_identity(self):
        x = np.random.default_rng(9).normal(size=(1, 3, 4))
        np.testing.assert_array_equal(P.flatten_patches(x).data, x[0])

    def test_hand_case(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        out = P.flatten_patches(np.array([a, b, c, d]).reshape(4, 1, 1)).data
        np.testing.assert_array_equal(out, [[a, b], [c, d]])

    def test_token_blocks(self):
        m = np.random.default_rng(10).normal(size=(4, 2, 3))
        img = P.flatten_patches(m).data
        for i in range(2):
            for j in range(3):
                np.testing.assert_array_equal(img[2 * i:2 * i + 2, 2 * j:2 * j + 2].ravel(), m[:, i, j])

    @pytest.mark.parametrize("p", [1, 2, 4])
    def test_round_trips(self, p):
        rng = np.random.default_rng(p)
        m = rng.normal(size=(2, 3, p * p, 4, 5))
        np.testing.assert_array_equal(P.unflatten_patches(P.flatten_patches(m), p).data, m)
        img = rng.normal(size=(3, 4 * p, 2 * p))
        np.testing.assert_array_equal(P.flatten_patches(P.unflatten_patches(img, p)).data, img)

    def test_not_square(self):
        with pytest.raises(P.FormatError):
            P.flatten_patches(np.zeros((3, 2, 2)))


def stage_params(rng, c, p2=16, low=16):
    return as_tensors(M.init_mso_params(rng, c, int(np.sqrt(p2)), low))


class TestMSO:
    def test_zero_residual_is_upsampling(self):
        rng = np.random.default_rng(11)
        params = as_tensors(M.init_mso_params(rng, 6, zero=True))
        m = rng.normal(size=(2, 16, 3, 4))
        feat = rng.normal(size=(6, 6, 8))
        out = M.mso_stage(m, feat, params["8"]).data
        np.testing.assert_array_equal(out, T.resize_bilinear(m, 2).data)
        assert out.shape == (2, 16, 6, 8)

    def test_stride_mismatch(self):
        rng = np.random.default_rng(12)
        params = stage_params(rng, 6)
        with pytest.raises(T.ShapeError):
            M.mso_stage(rng.normal(size=(1, 16, 3, 4)), rng.normal(size=(6, 3, 4)), params["8"])

    def test_single_pixel_hand_case(self):
        # p=1, one feature channel, d_low=1: out = m + r_w * relu(a*m + f*feat + pb) + r_b
        params = {"proj_w": Tensor([[0.5, -2.0]]), "proj_b": Tensor([0.25]),
                  "res_w": Tensor([[3.0]]), "res_b": Tensor([-1.0])}
        m = np.full((1, 1, 1, 1), 0.8)
        feat = np.array([[[-0.1, 0.3], [0.6, -1.0]]])
        out = M.mso_stage(m, feat, params).data[0, 0]
        # upsampled m is 0.8 everywhere; bases = relu(0.4 - 2 f + 0.25)
        expected = np.array([[0.8 + 3 * 0.85 - 1.0, 0.8 + 3 * 0.05 - 1.0],
                             [0.8 + 3 * 0.0 - 1.0, 0.8 + 3 * 2.65 - 1.0]])
        np.testing.assert_allclose(out, expected, rtol=1e-14, atol=1e-14)

    def test_zeroed_optimizer_is_upsample_flatten(self):
        rng = np.random.default_rng(13)
        params = as_tensors(M.init_mso_params(rng, 4, zero=True))
        h, w = 32, 48
        m = rng.normal(size=(3, 16, h // 16, w // 16))
        out = M.optimize_masks(m, rng.normal(size=(4, h // 8, w // 8)), rng.normal(size=(4, h // 4, w // 4)), params)
        assert out.shape == (3, h, w)
        ref = P.flatten_patches(T.resize_bilinear(T.resize_bilinear(m, 2), 2)).data
        np.testing.assert_array_equal(out.data, ref)

    def test_requires_patch_four(self):
        rng = np.random.default_rng(14)
        with pytest.raises(P.ConfigError):
            M.optimize_masks(np.zeros((1, 4, 2, 2)), np.zeros((4, 4, 4)), np.zeros((4, 8, 8)),
                             as_tensors(M.init_mso_params(rng, 4, patch=2)), patch=2)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1.0, 1e3))
    def test_finite_for_large_inputs(self, seed, scale):
        rng = np.random.default_rng(seed)
        params = as_tensors(M.init_mso_params(rng, 4))
        out = M.optimize_masks(rng.normal(size=(2, 16, 1, 1)) * scale, rng.normal(size=(4, 2, 2)) * scale,
                               rng.normal(size=(4, 4, 4)) * scale, params)
        assert np.isfinite(out.data).all()

    def test_gradients(self):
        rng = np.random.default_rng(15)
        store = ParamStore(flat(M.init_mso_params(rng, 3, low_dim=4)))
        m = rng.normal(size=(2, 16, 1, 2))
        f8, f4 = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 4, 8))
        probe = rng.normal(size=(2, 16, 32))
        assert grad_check(lambda: T.tsum(M.optimize_masks(m, f8, f4, store.tree()) * probe), store) < 1e-4
