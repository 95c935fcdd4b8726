import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from fermi_hbt.coincidence import DelayHistogram
from fermi_hbt.exceptions import ValidationError
from fermi_hbt.fitting import (
    BroadenedDipRegressor,
    _internal_jacobian,
    _to_external,
    _to_internal,
    fit_curve,
    fit_histogram,
    histogram_lag_offset,
)
from fermi_hbt.model import BroadenedModel, c_exp_closed

T = np.arange(0, 1225, 25.0)  # 49 lags, as for max_lag 1600 and a 400 ns window
TAU_T, DELTA = 140.0, 400.0


def synthetic(alpha, tau_c, noise, seed, b=1.0, tau_t=TAU_T):
    clean = c_exp_closed(T, BroadenedModel(alpha, tau_c, tau_t, DELTA, b))
    sigma = np.full(T.shape, noise)
    return clean + np.random.default_rng(seed).normal(0, noise, T.shape), sigma


class TestRecovery:
    @pytest.mark.parametrize("seed", range(5))
    def test_one_percent_noise(self, seed):
        y, s = synthetic(1.0, 120.0, 0.01, seed)
        r = fit_curve(T, y, s, TAU_T, DELTA)
        assert r.converged
        assert abs(r.tau_c - 120) <= 12 and abs(r.alpha - 1) <= 0.1

    def test_noiseless_is_exact(self):
        y, s = synthetic(0.7, 60.0, 0.0, 0, b=1.01)
        r = fit_curve(T, y, np.full(T.shape, 1e-3), TAU_T, DELTA, init=(0.2, 300.0, 1.0))
        assert r.converged
        assert r.params == pytest.approx([0.7, 60.0, 1.01], rel=1e-6)

    @pytest.mark.parametrize("noise", [0.003, 0.01, 0.03])
    def test_null_alpha_within_three_sigma(self, noise):
        hits = 0
        for seed in range(40):
            y, s = synthetic(0.0, 120.0, noise, 100 + seed)
            r = fit_curve(T, y, s, TAU_T, DELTA)
            # at 3% per bin a few null curves wander into the unidentified
            # tau_c corner; those must be reported, never passed off as converged
            assert r.converged or noise > 0.01, r.message
            hits += abs(r.alpha) < 3 * r.alpha_err
        assert hits == 40

    def test_invariants(self):
        y, s = synthetic(1.0, 120.0, 0.01, 7)
        r = fit_curve(T, y, s, TAU_T, DELTA)
        assert r.dof == T.size - 3
        assert np.allclose(r.covariance, r.covariance.T)
        assert np.all(np.linalg.eigvalsh(r.covariance) >= -1e-12)
        resid = (y - c_exp_closed(T, r.model())) / s
        assert r.chi2 == pytest.approx(resid @ resid)


class TestOptions:
    def test_too_few_points(self):
        with pytest.raises(ValidationError):
            fit_curve(T[:9], np.ones(9), np.ones(9), TAU_T, DELTA)

    def test_bad_inputs(self):
        with pytest.raises(ValidationError):
            fit_curve(T - 50, np.ones(T.size), np.ones(T.size), TAU_T, DELTA)
        with pytest.raises(ValidationError):
            fit_curve(T, np.ones(T.size), np.zeros(T.size), TAU_T, DELTA)
        with pytest.raises(ValueError):
            fit_curve(T, np.ones(5), np.ones(T.size), TAU_T, DELTA)

    def test_not_converged_is_reported(self):
        y, s = synthetic(1.0, 120.0, 0.01, 1)
        r = fit_curve(T, y, s, TAU_T, DELTA, init=(0.1, 2000.0, 0.9), max_iter=1, multistart=False)
        assert not r.converged and r.iterations == 1
        assert "maximum" in r.message

    def test_fallback(self):
        y, s = synthetic(1.0, 120.0, 0.01, 1)
        r = fit_curve(T, y, s, TAU_T, DELTA, init=(0.1, 2000.0, 0.9), max_iter=3, multistart=False, fallback=True)
        assert r.method == "lm+simplex"
        assert abs(r.tau_c - 120) < 15

    def test_bound_flag(self):
        y, s = synthetic(1.0, 1.0, 0.001, 2)  # dip far narrower than the kernel
        y[:] = 1.0 - 1.2 * (1.0 - y)  # deeper than alpha = 2 can explain at tau_c = 1
        r = fit_curve(T, y, s, TAU_T, DELTA)
        assert r.at_bound

    def test_decimate(self):
        y, s = synthetic(1.0, 120.0, 0.01, 3)
        r = fit_curve(T, y, s, TAU_T, DELTA, decimate=2)
        assert r.dof == 25 - 3 and r.dof_alt == T.size - 3
        assert np.isfinite(r.chi2_alt)
        with pytest.raises(ValidationError):
            fit_curve(T, y, s, TAU_T, DELTA, decimate=16)

    def test_lag_offset_shifts_model(self):
        y = c_exp_closed(T, BroadenedModel(1.0, 120.0, TAU_T, DELTA))
        shifted = c_exp_closed(np.abs(T - 12.5), BroadenedModel(1.0, 120.0, TAU_T, DELTA))
        r = fit_curve(T, y, np.full(T.shape, 1e-3), TAU_T, DELTA, lag_offset=0.0)
        assert r.tau_c == pytest.approx(120.0, rel=1e-5)
        r2 = fit_curve(T[1:], shifted[1:], np.full(T.size - 1, 1e-3), TAU_T, DELTA, lag_offset=-12.5)
        assert r2.tau_c == pytest.approx(120.0, rel=1e-5)
        assert np.allclose(r2.predict(T[1:]), shifted[1:], atol=1e-8)

    def test_json(self):
        y, s = synthetic(1.0, 120.0, 0.01, 4)
        d = json.loads(fit_curve(T, y, s, TAU_T, DELTA).to_json(note="x"))
        assert d["note"] == "x" and len(d["covariance"]) == 3 and d["dof"] == 46


class TestInternalJacobian:
    def test_round_trip(self):
        p = np.array([0.8, 130.0, 1.01])
        assert _to_external(_to_internal(p)) == pytest.approx(p)

    @pytest.mark.criterion(8)
    def test_against_central_differences_at_20_points(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            p = np.array([rng.uniform(0.05, 1.9), 10 ** rng.uniform(0.3, 3.7), rng.uniform(0.9, 1.1)])
            tau_t = rng.uniform(0, 300)
            J = _internal_jacobian(T, p, tau_t, DELTA)
            q = _to_internal(p)
            for k in range(3):
                h = 1e-6 * max(abs(q[k]), 1e-2)
                hi, lo = q.copy(), q.copy()
                hi[k] += h
                lo[k] -= h
                f = lambda qq: c_exp_closed(T, BroadenedModel(*_to_external(qq)[:2], tau_t, DELTA, _to_external(qq)[2]))
                fd = (f(hi) - f(lo)) / (2 * h)
                scale = max(np.max(np.abs(fd)), 1e-12)
                assert np.max(np.abs(J[:, k] - fd)) / scale <= 1e-5


class TestHistogram:
    def hist(self, period="25"):
        y, s = synthetic(1.0, 120.0, 0.01, 5)
        meta = {} if period is None else {"tick_period_ns": period}
        return DelayHistogram(T, np.zeros(T.size, dtype=int), y, s, metadata=meta)

    def test_offset_from_metadata(self):
        assert histogram_lag_offset(self.hist()) == -12.5
        assert histogram_lag_offset(self.hist("10/3")) == pytest.approx(-5 / 3)
        assert histogram_lag_offset(self.hist(None)) == 0.0
        with pytest.raises(ValidationError):
            histogram_lag_offset(self.hist("abc"))

    def test_fit_histogram(self):
        h = self.hist()
        r = fit_histogram(h, TAU_T, DELTA)
        assert r.lag_offset == -12.5
        assert fit_histogram(h, TAU_T, DELTA, lag_offset=0.0).lag_offset == 0.0
        with pytest.raises(ValidationError):
            fit_histogram(h, TAU_T)  # no config, no delta

    def test_csv_metadata_survives(self):
        text = self.hist().to_csv_string()
        back = DelayHistogram.from_csv(io.StringIO(text))
        assert histogram_lag_offset(back) == -12.5


class TestRegressor:
    def test_fit_predict(self):
        y, s = synthetic(1.0, 120.0, 0.005, 6)
        est = BroadenedDipRegressor(tau_t_ns=TAU_T, delta_ns=DELTA).fit(T[:, None], y, sigma=s)
        assert abs(est.tau_c_ - 120) < 12
        assert est.predict(T).shape == T.shape
        assert est.score(T, y) > 0.9

    def test_clone(self):
        est = BroadenedDipRegressor(tau_t_ns=200.0, lag_offset_ns=-12.5)
        c = clone(est)
        assert c.get_params() == est.get_params()

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            BroadenedDipRegressor().predict(T)

    def test_two_columns_rejected(self):
        with pytest.raises(ValidationError):
            BroadenedDipRegressor().fit(np.ones((20, 2)), np.ones(20))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.3, 1.5), st.floats(40, 400), st.integers(0, 2**16))
def test_recovery_property(alpha, tau_c, seed):
    """Low-noise curves are recovered within a few standard errors."""
    y, s = synthetic(alpha, tau_c, 0.002, seed)
    r = fit_curve(T, y, s, TAU_T, DELTA)
    assert r.converged
    assert abs(r.alpha - alpha) < 5 * r.alpha_err + 1e-6
    assert abs(r.tau_c - tau_c) < 5 * r.tau_c_err + 1e-6
