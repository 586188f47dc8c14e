"""Discretization oracles and fused-scan/naive-scan agreement."""

import math

import numpy as np
import pytest

from sormamba import autodiff as ad
from sormamba import scan_kernels
from sormamba.autodiff import Tensor
from sormamba.ssm import (
    SSMParams,
    discretize,
    init_ssm_params,
    naive_scan,
    scan_core,
    selective_scan,
)


def make_params(dim=6, state=4, dt_rank=2, seed=0, mode="euler-b"):
    return init_ssm_params(dim, state, dt_rank, np.random.default_rng(seed), mode=mode)


class TestDiscretize:
    def test_scalar_zoh_closed_form(self):
        # one step of a = -1, delta = 0.5, b = 2
        delta = Tensor(np.full((1, 1, 1), 0.5))
        a = Tensor(np.full((1, 1), -1.0))
        b_t = Tensor(np.full((1, 1, 1), 2.0))
        a_bar, b_bar = discretize(delta, a, b_t, "zoh-exact")
        assert a_bar.data.reshape(()) == pytest.approx(math.exp(-0.5), abs=1e-12)
        want = (math.exp(-0.5) - 1.0) / (-0.5) * 0.5 * 2.0
        assert b_bar.data.reshape(()) == pytest.approx(want, abs=1e-12)
        assert b_bar.data.reshape(()) == pytest.approx(0.786939, abs=1e-6)

    def test_scalar_euler_closed_form(self):
        delta = Tensor(np.full((1, 1, 1), 0.5))
        a = Tensor(np.full((1, 1), -1.0))
        b_t = Tensor(np.full((1, 1, 1), 2.0))
        a_bar, b_bar = discretize(delta, a, b_t, "euler-b")
        assert a_bar.data.reshape(()) == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert b_bar.data.reshape(()) == pytest.approx(1.0, abs=1e-15)

    def test_vanishing_a_limit_matches_euler(self):
        # as a -> 0 the exact input factor collapses to delta * b
        delta = Tensor(np.full((1, 1, 1), 0.5))
        a = Tensor(np.full((1, 1), -1e-12))
        b_t = Tensor(np.full((1, 1, 1), 2.0))
        a_bar, b_bar = discretize(delta, a, b_t, "zoh-exact")
        assert a_bar.data.reshape(()) == pytest.approx(1.0, abs=1e-9)
        assert b_bar.data.reshape(()) == pytest.approx(1.0, abs=1e-9)

    def test_random_entries_match_closed_form_elementwise(self):
        rng = np.random.default_rng(2)
        delta = rng.uniform(1e-3, 0.5, size=(2, 3, 4))
        a = -rng.uniform(0.1, 3.0, size=(4, 5))
        b_t = rng.normal(size=(2, 3, 5))
        a_bar, b_bar = discretize(
            Tensor(delta), Tensor(a), Tensor(b_t), "zoh-exact"
        )
        da = delta[..., None] * a
        np.testing.assert_allclose(a_bar.data, np.exp(da), atol=1e-12)
        want_b = (np.exp(da) - 1.0) / da * (delta[..., None] * b_t[:, :, None, :])
        np.testing.assert_allclose(b_bar.data, want_b, atol=1e-9)

    def test_unknown_mode_rejected(self):
        delta = Tensor(np.ones((1, 1, 1)))
        with pytest.raises(ValueError, match="discretization"):
            discretize(delta, Tensor(np.ones((1, 1))), Tensor(np.ones((1, 1, 1))), "zoh")

    def test_transition_factors_lie_in_unit_interval(self):
        params = make_params()
        assert np.all(-np.exp(params.a_log.data) < 0.0)
        rng = np.random.default_rng(3)
        delta = Tensor(rng.uniform(1e-3, 1.0, size=(2, 4, 6)))
        a = Tensor(-np.exp(params.a_log.data))
        b_t = Tensor(rng.normal(size=(2, 4, 4)))
        a_bar, _ = discretize(delta, a, b_t, "euler-b")
        assert np.all(a_bar.data > 0.0) and np.all(a_bar.data < 1.0)


class TestScanCore:
    def test_two_step_hand_computed(self):
        # a_bar = 0.5, b_bar = 1, c = 1, x = [1, 2] -> y = [1, 2.5]
        a_bar = Tensor(np.full((1, 2, 1, 1), 0.5))
        b_bar = Tensor(np.ones((1, 2, 1, 1)))
        c = Tensor(np.ones((1, 2, 1)))
        x = Tensor(np.array([[[1.0], [2.0]]]))
        y = scan_core(a_bar, b_bar, c, x)
        np.testing.assert_allclose(y.data.reshape(-1), [1.0, 2.5], atol=1e-15)

    def test_backends_agree(self):
        rng = np.random.default_rng(4)
        shapes = dict(a=(3, 7, 5, 4), c=(3, 7, 4), x=(3, 7, 5))
        a_bar = rng.uniform(0.1, 0.95, size=shapes["a"])
        b_bar = rng.normal(size=shapes["a"])
        c = rng.normal(size=shapes["c"])
        x = rng.normal(size=shapes["x"])
        y_np, hs_np = scan_kernels.scan_forward_numpy(a_bar, b_bar, c, x)
        y_nb, hs_nb = scan_kernels.scan_forward_numba(a_bar, b_bar, c, x)
        np.testing.assert_allclose(y_np, y_nb, atol=1e-13)
        np.testing.assert_allclose(hs_np, hs_nb, atol=1e-13)
        gy = rng.normal(size=shapes["x"])
        out_np = scan_kernels.scan_backward_numpy(a_bar, b_bar, c, x, hs_np, gy)
        out_nb = scan_kernels.scan_backward_numba(a_bar, b_bar, c, x, hs_nb, gy)
        for g_np, g_nb in zip(out_np, out_nb):
            np.testing.assert_allclose(g_np, g_nb, atol=1e-13)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(5)
        a_bar = Tensor(rng.uniform(0.2, 0.9, size=(2, 4, 3, 2)))
        b_bar = Tensor(rng.normal(size=(2, 4, 3, 2)))
        c = Tensor(rng.normal(size=(2, 4, 2)))
        x = Tensor(rng.normal(size=(2, 4, 3)))
        for target, rebuild in [
            (x, lambda t: scan_core(a_bar, b_bar, c, t)),
            (c, lambda t: scan_core(a_bar, b_bar, t, x)),
            (a_bar, lambda t: scan_core(t, b_bar, c, x)),
            (b_bar, lambda t: scan_core(a_bar, t, c, x)),
        ]:
            err = ad.check_gradients(lambda t: ad.tsum(rebuild(t)), target)
            assert err < 1e-6


class TestSelectiveScan:
    @pytest.mark.parametrize("mode", ["euler-b", "zoh-exact"])
    def test_matches_naive_reference(self, mode):
        params = make_params(mode=mode, seed=11)
        x = Tensor(np.random.default_rng(12).normal(size=(3, 9, 6)))
        fused = selective_scan(x, params).data
        reference = naive_scan(x, params)
        np.testing.assert_allclose(fused, reference, atol=1e-12, rtol=0)

    def test_shape_contract(self):
        params = make_params()
        y = selective_scan(Tensor(np.zeros((2, 5, 6))), params)
        assert y.shape == (2, 5, 6)
        with pytest.raises(ValueError, match="expected"):
            selective_scan(Tensor(np.zeros((2, 5, 7))), params)

    def test_gradient_end_to_end(self):
        params = make_params(dim=4, state=3, dt_rank=2, seed=13)
        x = Tensor(np.random.default_rng(14).normal(size=(2, 5, 4)))
        err = ad.check_gradients(
            lambda t: ad.tmean(selective_scan(t, params)), x
        )
        assert err < 1e-5

    def test_parameter_gradients(self):
        params = make_params(dim=4, state=3, dt_rank=2, seed=15)
        x = Tensor(np.random.default_rng(16).normal(size=(2, 5, 4)))
        for target in (params.a_log, params.w_b, params.w_c, params.b_dt, params.d_skip):
            err = _param_gradient_error(params, target, x)
            assert err < 1e-5, target.shape

    def test_causality_of_scan(self):
        # output at step k must not change when later steps change
        params = make_params(seed=17)
        rng = np.random.default_rng(18)
        x1 = rng.normal(size=(1, 8, 6))
        x2 = x1.copy()
        x2[:, 5:] = rng.normal(size=(1, 3, 6))
        y1 = naive_scan(x1, params)
        y2 = naive_scan(x2, params)
        np.testing.assert_allclose(y1[:, :5], y2[:, :5], atol=1e-15)
        assert not np.allclose(y1[:, 5:], y2[:, 5:])

    def test_reversal_equivariance_fails_with_input_dependent_step(self):
        # input-dependent delta breaks reverse(scan(reverse(x))) == scan(x);
        # the asymmetry is the point of selectivity, so assert the gap.
        params = make_params(seed=19)
        x = np.random.default_rng(20).normal(size=(1, 10, 6))
        direct = naive_scan(x, params)
        flipped = naive_scan(x[:, ::-1].copy(), params)[:, ::-1]
        assert np.abs(direct - flipped).max() > 1e-6

    def test_nan_input_reports_step_index(self):
        params = make_params(seed=21)
        x = np.zeros((1, 6, 6))
        x[0, 3, 0] = np.nan
        with pytest.raises(FloatingPointError, match="step 3"):
            naive_scan(x, params)


def _param_gradient_error(params: SSMParams, target: Tensor, x: Tensor) -> float:
    """Finite-difference check for one parameter tensor of the layer."""

    def f(t: Tensor) -> Tensor:
        swapped = SSMParams(
            a_log=t if target is params.a_log else params.a_log,
            d_skip=t if target is params.d_skip else params.d_skip,
            w_dt_down=t if target is params.w_dt_down else params.w_dt_down,
            w_dt_up=t if target is params.w_dt_up else params.w_dt_up,
            b_dt=t if target is params.b_dt else params.b_dt,
            w_b=t if target is params.w_b else params.w_b,
            w_c=t if target is params.w_c else params.w_c,
            mode=params.mode,
        )
        return ad.tmean(selective_scan(x, swapped))

    return ad.check_gradients(f, target)
