"""Built-in oracle checks, run by ``fermi-hbt selftest``.

Three suites:

``oracle-grid``
    closed-form windowed rate against nested quadrature of its definition.
``erf``
    :func:`fermi_hbt.model.erf` against an alternating Maclaurin series summed
    in 60-digit decimal arithmetic, plus oddness.
``generator-g2``
    pair correlation of a generated stream against the bin-averaged target,
    judged by the chi2 survival probability.

Each suite returns a :class:`SuiteResult`; ``erf_fn`` lets tests substitute a
faulty error function to confirm the suites can fail.
"""
from __future__ import annotations

import decimal
import functools
import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .beam import BeamConfig, CorrelationModel, empirical_g2, g2_bin_average, generate_stream
from .model import BroadenedModel, c_exp_closed, c_exp_quadrature, erf

__all__ = ["SuiteResult", "erf_series", "oracle_grid", "erf_suite", "generator_suite", "run_selftest", "ORACLE_GRID"]

ORACLE_GRID = {
    "alpha": (0.0, 0.5, 1.0),
    "tau_c": (1.0, 30.0, 120.0, 1000.0),
    "tau_t": (70.0, 140.0),
    "delta": (100.0, 400.0),
}
ORACLE_TOL = 1e-8
ERF_TOL = 1e-12
ODD_TOL = 1e-15
G2_MIN_PVALUE = 1e-3


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<14s} {self.detail}  ({self.seconds:.1f} s)"


@functools.lru_cache(maxsize=None)
def _pi(digits: int) -> decimal.Decimal:
    """pi from Machin's formula to ``digits`` significant digits."""
    ctx = decimal.Context(prec=digits + 5)
    eps = decimal.Decimal(10) ** -(digits + 5)

    def atan_inv(n):
        x = ctx.divide(1, n)
        x2 = x * x
        term, total, k, sign = x, x, 1, -1
        while True:
            term = ctx.multiply(term, x2)
            add = ctx.divide(term, 2 * k + 1)
            if add < eps:
                return total
            total = ctx.add(total, sign * add)
            sign, k = -sign, k + 1

    with decimal.localcontext(ctx):
        return +(16 * atan_inv(5) - 4 * atan_inv(239))


def erf_series(x: float, digits: int = 60) -> float:
    """erf by its Maclaurin series ``2/sqrt(pi) sum (-1)^n x^(2n+1) / (n! (2n+1))``."""
    ctx = decimal.Context(prec=digits)
    with decimal.localcontext(ctx):
        xd = decimal.Decimal(x)  # exact binary value of x
        x2 = xd * xd
        power = xd  # (-1)^n x^(2n+1) / n!
        total = power
        eps = decimal.Decimal(10) ** (-digits)
        n = 0
        while True:
            n += 1
            power = -power * x2 / n
            term = power / (2 * n + 1)
            total += term
            if abs(term) < eps and n > x2:
                break
        return float(2 * total / _pi(digits).sqrt())


def oracle_grid(tol: float = 1e-9, t_step: float = 25.0, erf_fn=erf, grid: dict = ORACLE_GRID) -> SuiteResult:
    """Max deviation of the closed form from quadrature (run at accuracy ``tol``) over the grid."""
    start = time.perf_counter()
    t = np.arange(0.0, 1000.0 + t_step / 2, t_step)
    worst, where = 0.0, None
    for alpha, tau_c, tau_t, delta in itertools.product(*grid.values()):
        m = BroadenedModel(alpha, tau_c, tau_t, delta)
        diff = np.abs(c_exp_closed(t, m, erf_fn=erf_fn) - c_exp_quadrature(t, m, tol=tol))
        i = int(np.argmax(diff))
        if diff[i] > worst:
            worst, where = float(diff[i]), (alpha, tau_c, tau_t, delta, float(t[i]))
    n = math.prod(len(v) for v in grid.values())
    detail = f"max |closed - quadrature| = {worst:.2e} over {n} models x {t.size} lags (quad tol {tol:g})"
    if where is not None and worst > ORACLE_TOL:
        detail += " at alpha={}, tau_c={}, tau_t={}, delta={}, t={}".format(*where)
    return SuiteResult("oracle-grid", worst <= ORACLE_TOL, detail, time.perf_counter() - start)


def erf_suite(n_points: int = 10_000, erf_fn=erf) -> SuiteResult:
    start = time.perf_counter()
    x = np.linspace(-6.0, 6.0, n_points)
    got = np.asarray(erf_fn(x), dtype=float)
    half = x >= 0  # the oracle is odd by construction; evaluate it once per |x|
    ref_pos = np.array([erf_series(v) for v in x[half]])
    ref = np.empty_like(x)
    ref[half] = ref_pos
    ref[~half] = -np.array([erf_series(-v) for v in x[~half]])
    err = float(np.max(np.abs(got - ref)))
    pos = np.abs(x)
    odd = float(np.max(np.abs(np.asarray(erf_fn(-pos)) + np.asarray(erf_fn(pos)))))
    ok = err <= ERF_TOL and odd <= ODD_TOL
    detail = f"max error {err:.2e} (limit {ERF_TOL:g}) on {n_points} points, oddness {odd:.1e} (limit {ODD_TOL:g})"
    return SuiteResult("erf", ok, detail, time.perf_counter() - start)


def generator_suite(n_events: int = 1_000_000, seed: int = 12345, bin_width: float = 25.0, max_lag: float = 600.0) -> SuiteResult:
    start = time.perf_counter()
    rate = 1e4
    model = CorrelationModel(1.0, 120.0)
    cfg = BeamConfig(rate=rate, duration=n_events / rate, model=model, seed=seed)
    times = generate_stream(cfg)
    est = empirical_g2(times, bin_width, max_lag, duration=cfg.duration * 1e9)
    target = g2_bin_average(est.bin_edges, model)
    expected = est.expected * target
    chi2 = float(np.sum((est.counts - expected) ** 2 / expected))
    dof = est.counts.shape[0]
    p = float(stats.chi2.sf(chi2, dof))
    detail = f"{times.size} events, chi2/dof = {chi2 / dof:.3f} ({dof} bins), p = {p:.3g} (limit {G2_MIN_PVALUE:g})"
    return SuiteResult("generator-g2", p > G2_MIN_PVALUE, detail, time.perf_counter() - start)


def run_selftest(quick: bool = False, tol: float = 1e-9, erf_fn=erf, out=print) -> list[SuiteResult]:
    """Run all suites, printing one line each; ``quick`` trims grid density and sample sizes."""
    results = []
    for suite in (
        lambda: oracle_grid(tol=tol, t_step=100.0 if quick else 25.0, erf_fn=erf_fn),
        lambda: erf_suite(n_points=1_000 if quick else 10_000, erf_fn=erf_fn),
        lambda: generator_suite(n_events=200_000 if quick else 1_000_000),
    ):
        res = suite()
        out(res.line())
        results.append(res)
    return results
