"""Neutral-orbit asymptotics, distortion factors, correlation decay, and the
Monte Carlo Birkhoff oracle.

The neutral orbit x_l = g^l(1) controls everything quantitative about the
slow mixing: x_l ~ l^(-1/a) with the proven upper constant
2^(1/a^2 + 1/a), the contraction of the inverse branch along the orbit
satisfies lambda_m(x_l) <= C (1 + m/l)^(-1 - 1/a), and correlations of
Lipschitz observables decay polynomially (exponentially at a = 0).
"""

import math
from dataclasses import dataclass

import numpy as np

from .maps import MapParams, branch_inverse, forward, forward_deriv
from .grid import GridFunction, integrate
from .response import parse_observable
from .transfer import DensityRecord, apply_L

__all__ = [
    "OrbitStats",
    "CorrelationCurve",
    "neutral_orbit",
    "contraction_factor",
    "correlation_decay",
    "birkhoff_average",
]


@dataclass
class OrbitStats:
    """The neutral orbit with bound checks and a tail power-law fit.

    ``upper_margin`` is the worst relative slack in the proven bound
    x_l <= 2^(1/a^2 + 1/a) l^(-1/a); ``lower_c`` the fitted constant in
    x_l >= c (2^a a)^(-1/a) l^(-1/a) (the bound constant is not explicit).
    At a = 0 the orbit is exactly 2^-l and no power law is fitted.
    """

    alpha: float
    ell_max: int
    x_ell: np.ndarray
    fitted_exponent: float | None
    upper_ok: bool
    lower_ok: bool
    upper_margin: float
    lower_c: float

    def to_rows(self):
        a = self.alpha
        rows = []
        for ell in range(1, self.ell_max + 1):
            if a > 0.0:
                bound = 2.0 ** (1.0 / a**2 + 1.0 / a) * ell ** (-1.0 / a)
            else:
                bound = 2.0**-ell
            xl = self.x_ell[ell]
            rows.append((ell, xl, bound, (bound - xl) / bound))
        return rows


def neutral_orbit(p: MapParams, ell_max: int) -> OrbitStats:
    """Iterate the branch inverse from 1 and test the orbit asymptotics."""
    if ell_max < 2:
        raise ValueError("neutral_orbit: ell_max must be >= 2")
    a = p.alpha
    x = np.empty(ell_max + 1)
    x[0] = 1.0
    cur = 1.0
    for ell in range(1, ell_max + 1):
        cur = branch_inverse(p, cur, tol=0.0)
        x[ell] = cur
    if a == 0.0:
        exact = 2.0 ** (-np.arange(ell_max + 1.0))
        ok = bool(np.max(np.abs(x - exact) / exact) < 1e-12)
        return OrbitStats(alpha=a, ell_max=ell_max, x_ell=x, fitted_exponent=None,
                          upper_ok=ok, lower_ok=ok, upper_margin=0.0, lower_c=1.0)
    ells = np.arange(1, ell_max + 1, dtype=float)
    bound = 2.0 ** (1.0 / a**2 + 1.0 / a) * ells ** (-1.0 / a)
    rel_slack = (bound - x[1:]) / bound
    upper_ok = bool(np.all(x[1:] <= bound))
    lower_scale = (2.0**a * a) ** (-1.0 / a) * ells ** (-1.0 / a)
    lower_c = float(np.min(x[1:] / lower_scale))
    lo = max(2, ell_max // 10)
    slope = np.polyfit(np.log(ells[lo:]), np.log(x[1 + lo :]), 1)[0]
    return OrbitStats(
        alpha=a,
        ell_max=ell_max,
        x_ell=x,
        fitted_exponent=float(slope),
        upper_ok=upper_ok,
        lower_ok=lower_c > 0.0,
        upper_margin=float(np.min(rel_slack)),
        lower_c=lower_c,
    )


def contraction_factor(p: MapParams, ell: int, m: int) -> float:
    """lambda_m(x_l) = 1 / (f^m)'(x_{l+m}), accumulated in log space.

    The product of 1/T' along the left-branch orbit from x_{l+m} up to
    x_{l+1}; equals 2^-m at a = 0 and obeys the bounded-distortion envelope
    C (1 + m/l)^(-1 - 1/a) in general.
    """
    if ell < 1 or m < 0:
        raise ValueError("contraction_factor: need ell >= 1, m >= 0")
    if m == 0:
        return 1.0
    cur = 1.0
    log_sum = 0.0
    for j in range(1, ell + m + 1):
        cur = branch_inverse(p, cur, tol=0.0)
        if j > ell:
            log_sum += math.log(forward_deriv(p, cur, 1))
    return math.exp(-log_sum)


def _mc_step(p: MapParams, xs: np.ndarray, rng) -> np.ndarray:
    """One Monte Carlo orbit step.

    At a = 0 the map is the binary shift, so double-precision orbits
    collapse to 0 within ~53 steps; an ulp-scale seeded dither keeps them
    on the attractor (statistics of the absolutely continuous measure are
    robust to this noise, and determinism per seed is preserved).
    """
    xs = forward(p, xs)
    if p.alpha == 0.0:
        xs = np.minimum(xs + rng.uniform(0.0, 2.0**-50, xs.size), 1.0 - 1e-16)
    return xs


@dataclass
class CorrelationCurve:
    """Correlation values C_n with a tail power-law fit.

    ``exponent_ci`` is a 95% interval: from the least-squares slope standard
    error for the operator method, from an orbit-bootstrap for Monte Carlo.
    """

    alpha: float
    psi_id: str
    phi_id: str
    values: np.ndarray
    method: str
    fitted_exponent: float
    exponent_ci: tuple
    standard_errors: np.ndarray | None = None


def _fit_decay(values, n_lo, n_hi):
    n = np.arange(len(values))
    mask = (n >= n_lo) & (n <= n_hi) & (np.abs(values) > 0)
    floor = 1e-14 * np.max(np.abs(values))
    mask &= np.abs(values) > floor
    if mask.sum() < 4:
        return math.nan, (math.nan, math.nan)
    ln, lc = np.log(n[mask]), np.log(np.abs(values[mask]))
    A = np.vstack([ln, np.ones_like(ln)]).T
    coef, res, _, _ = np.linalg.lstsq(A, lc, rcond=None)
    dof = max(mask.sum() - 2, 1)
    s2 = (res[0] / dof) if res.size else 0.0
    cov = s2 * np.linalg.inv(A.T @ A)
    se = math.sqrt(max(cov[0, 0], 0.0))
    return float(coef[0]), (float(coef[0] - 1.96 * se), float(coef[0] + 1.96 * se))


def correlation_decay(
    p: MapParams,
    d: DensityRecord,
    psi,
    phi,
    N: int,
    method: str = "operator",
    n_orbits: int = 1024,
    orbit_len: int = 65536,
    burn_in: int = 1024,
    seed: int = 0,
) -> CorrelationCurve:
    """Correlations C_n = cov(psi o T^n, phi) under the invariant measure.

    Operator method: C_n = int psi L^n(phi rho) dx - m_phi m_psi.
    Monte Carlo method: empirical lagged covariances over independent
    orbits, with batch-mean standard errors.  The decay exponent is
    fitted on n in [N/4, N].
    """
    psi_o, phi_o = parse_observable(psi), parse_observable(phi)
    if N < 8:
        raise ValueError("correlation_decay: N must be >= 8")
    if method == "operator":
        mesh = d.density.mesh
        x = mesh.nodes
        phi_vals = np.asarray(phi_o.f(x), dtype=float)
        psi_vals = np.asarray(psi_o.f(x), dtype=float)
        # covariance form: the mean is subtracted from the correlation, not
        # from phi itself -- centering the function would destroy a
        # vanishing-near-zero support property and degrade the decay rate
        # from n^(-1/a) to the generic n^(1 - 1/a)
        mean_phi = integrate(GridFunction(mesh, phi_vals * d.density.values, d.density.s))
        mean_psi = integrate(GridFunction(mesh, psi_vals * d.density.values, d.density.s))
        w = GridFunction(mesh, phi_vals * d.density.values, d.density.s)
        vals = np.empty(N + 1)
        for n in range(N + 1):
            vals[n] = integrate(GridFunction(mesh, psi_vals * w.values, w.s)) \
                - mean_phi * mean_psi
            if n < N:
                w = apply_L(p, w)
        if np.max(np.abs(vals)) == 0.0:
            raise ValueError("correlation_decay: all correlations vanish")
        expo, ci = _fit_decay(vals, max(N // 4, 1), N)
        return CorrelationCurve(p.alpha, psi_o.name, phi_o.name, vals, "operator",
                                expo, ci, None)
    if method != "montecarlo":
        raise ValueError("correlation_decay: method must be 'operator' or 'montecarlo'")

    rng = np.random.default_rng(seed)
    xs = rng.uniform(0.0, 1.0, n_orbits)
    for _ in range(burn_in):
        xs = _mc_step(p, xs, rng)
    lags = N
    steps = orbit_len - burn_in
    if steps <= lags + 8:
        raise ValueError("correlation_decay: orbit_len too short after burn-in")
    ring = np.empty((lags + 1, n_orbits))
    sums = np.zeros((lags + 1, n_orbits))
    phi_sum = np.zeros(n_orbits)
    psi_sum = np.zeros(n_orbits)
    for t in range(steps):
        phi_t = np.asarray(phi_o.f(xs), dtype=float)
        psi_t = np.asarray(psi_o.f(xs), dtype=float)
        ring[t % (lags + 1)] = phi_t
        phi_sum += phi_t
        psi_sum += psi_t
        for n in range(min(t, lags) + 1):
            sums[n] += psi_t * ring[(t - n) % (lags + 1)]
        xs = _mc_step(p, xs, rng)
    counts = steps - np.arange(lags + 1, dtype=float)
    # per-orbit covariance estimates: mean psi_{t+n} phi_t - psi_bar phi_bar
    per_orbit = sums / counts[:, None] - (psi_sum / steps)[None, :] * (phi_sum / steps)[None, :]
    vals = per_orbit.mean(axis=1)
    ses = per_orbit.std(axis=1, ddof=1) / math.sqrt(n_orbits)
    expo, _ = _fit_decay(vals, max(N // 4, 1), N)
    boots = []
    for _ in range(200):
        pick = rng.integers(0, n_orbits, n_orbits)
        bvals = per_orbit[:, pick].mean(axis=1)
        b, _ = _fit_decay(bvals, max(N // 4, 1), N)
        if not math.isnan(b):
            boots.append(b)
    ci = (float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5))) if boots else (math.nan, math.nan)
    return CorrelationCurve(p.alpha, psi_o.name, phi_o.name, vals, "montecarlo",
                            expo, ci, ses)


def birkhoff_average(
    p: MapParams,
    psi,
    n_orbits: int = 1024,
    orbit_len: int = 16384,
    burn_in: int = 1024,
    seed: int = 0,
) -> tuple[float, float]:
    """Time average of psi over seeded random orbits (ergodic oracle).

    Orbits advance in the compensated form x + 2^a x^(1+a); the mean is the
    grand average after burn-in and the standard error comes from treating
    each orbit as one batch.  Identical seeds reproduce identical results.
    """
    obs = parse_observable(psi)
    if orbit_len <= burn_in:
        raise ValueError("birkhoff_average: orbit_len must exceed burn_in")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0.0, 1.0, n_orbits)
    for _ in range(burn_in):
        xs = _mc_step(p, xs, rng)
    steps = orbit_len - burn_in
    acc = np.zeros(n_orbits)
    for _ in range(steps):
        acc += obs.f(xs)
        xs = _mc_step(p, xs, rng)
    means = acc / steps
    grand = float(means.mean())
    se = float(means.std(ddof=1) / math.sqrt(n_orbits)) if n_orbits > 1 else 0.0
    return grand, se
