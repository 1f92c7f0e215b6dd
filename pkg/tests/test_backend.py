"""Cross-checks between the numba kernels and the numpy fallback, plus
finite-difference validation of the backward kernels."""

import numpy as np
import pytest

from spkstyle import backend

from fdcheck import numeric_gradient, assert_gradients_match

BACKENDS = ["numpy"] + (["numba"] if backend.HAS_NUMBA else [])


@pytest.fixture(autouse=True)
def restore_backend():
    previous = backend.active_backend()
    yield
    backend.set_backend(previous)


def _random_case(rng, b=2, t=11, ci=3, co=4, k=5, dtype=np.float64):
    x = rng.standard_normal((b, t, ci)).astype(dtype)
    w = rng.standard_normal((k, ci, co)).astype(dtype)
    bias = rng.standard_normal(co).astype(dtype)
    return x, w, bias


class TestBackendAgreement:
    @pytest.mark.parametrize("stride,pad", [(1, 2), (2, 2), (1, 0), (3, 1)])
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_forward_paths_agree(self, rng, stride, pad, dtype):
        if not backend.HAS_NUMBA:
            pytest.skip("numba unavailable")
        x, w, bias = _random_case(rng, dtype=dtype)
        backend.set_backend("numpy")
        ref = backend.conv1d_forward(x, w, bias, stride, pad)
        backend.set_backend("numba")
        out = backend.conv1d_forward(x, w, bias, stride, pad)
        tol = 1e-5 if dtype == np.float32 else 1e-12
        np.testing.assert_allclose(out, ref, rtol=tol, atol=tol)

    @pytest.mark.parametrize("stride,pad", [(1, 2), (2, 2)])
    def test_backward_paths_agree(self, rng, stride, pad):
        if not backend.HAS_NUMBA:
            pytest.skip("numba unavailable")
        x, w, bias = _random_case(rng)
        backend.set_backend("numpy")
        y = backend.conv1d_forward(x, w, bias, stride, pad)
        gy = np.ones_like(y)
        gx_ref = backend.conv1d_backward_input(gy, w, stride, pad, x.shape[1])
        gw_ref = backend.conv1d_backward_weight(x, gy, stride, pad, w.shape[0])
        backend.set_backend("numba")
        np.testing.assert_allclose(
            backend.conv1d_backward_input(gy, w, stride, pad, x.shape[1]), gx_ref, atol=1e-12
        )
        np.testing.assert_allclose(
            backend.conv1d_backward_weight(x, gy, stride, pad, w.shape[0]), gw_ref, atol=1e-12
        )

    def test_set_backend_rejects_unknown(self):
        with pytest.raises(ValueError):
            backend.set_backend("cuda")


class TestBackwardKernels:
    """The backward kernels are the derivative of the forward kernel."""

    @pytest.mark.parametrize("name", BACKENDS)
    @pytest.mark.parametrize("stride,pad", [(1, 2), (2, 2)])
    def test_input_gradient(self, rng, name, stride, pad):
        backend.set_backend(name)
        x, w, bias = _random_case(rng)
        proj = rng.standard_normal(
            backend.conv1d_forward(x, w, bias, stride, pad).shape
        )

        def scalar():
            return float((backend.conv1d_forward(x, w, bias, stride, pad) * proj).sum())

        gx = backend.conv1d_backward_input(proj, w, stride, pad, x.shape[1])
        assert_gradients_match(gx, numeric_gradient(scalar, x), label="conv input")

    @pytest.mark.parametrize("name", BACKENDS)
    @pytest.mark.parametrize("stride,pad", [(1, 2), (2, 2)])
    def test_weight_gradient(self, rng, name, stride, pad):
        backend.set_backend(name)
        x, w, bias = _random_case(rng)
        proj = rng.standard_normal(
            backend.conv1d_forward(x, w, bias, stride, pad).shape
        )

        def scalar():
            return float((backend.conv1d_forward(x, w, bias, stride, pad) * proj).sum())

        gw = backend.conv1d_backward_weight(x, proj, stride, pad, w.shape[0])
        assert_gradients_match(gw, numeric_gradient(scalar, w), label="conv weight")

    @pytest.mark.parametrize("name", BACKENDS)
    def test_forward_matches_direct_sum(self, rng, name):
        """Both kernel paths equal a naive O(B*T*K*Ci*Co) reference."""
        backend.set_backend(name)
        x, w, bias = _random_case(rng, b=1, t=7, ci=2, co=3, k=3)
        stride, pad = 2, 1
        y = backend.conv1d_forward(x, w, bias, stride, pad)
        b, t, ci = x.shape
        k, _, co = w.shape
        to = backend.conv_out_len(t, k, stride, pad)
        ref = np.zeros((b, to, co))
        for bi in range(b):
            for tt in range(to):
                for oo in range(co):
                    acc = bias[oo]
                    for kk in range(k):
                        ts = tt * stride - pad + kk
                        if 0 <= ts < t:
                            for cc in range(ci):
                                acc += x[bi, ts, cc] * w[kk, cc, oo]
                    ref[bi, tt, oo] = acc
        np.testing.assert_allclose(y, ref, atol=1e-12)
