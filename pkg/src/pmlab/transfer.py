"""Transfer operators, invariant densities, and the Ulam oracle.

``apply_L`` is the Perron-Frobenius operator of the two-branch map,

    L f(x) = f(g(x)) g'(x) + f((x+1)/2) / 2,

``apply_N`` its left-branch part, ``apply_M`` the parameter derivative
d/da L = -(X * N f)' in Leibniz form, and ``apply_d2L`` the second
parameter derivative assembled from its seven Leibniz terms (the exact
nodewise sum of ``seven_term_decomposition``).

``compute_density`` runs renormalized power iteration L^k 1 with an L1
successive-difference stopping rule; convergence is polynomial in k for
a > 0, so the result carries an explicit ``converged`` flag instead of
being silently accepted.  ``build_ulam`` assembles the row-stochastic Ulam
matrix from exact branchwise preimage intersections as an independent
discretization of the same operator.
"""

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .maps import (
    MapParams,
    X,
    X_prime,
    X_double_prime,
    branch_inverse,
    branch_inverse_deriv,
    dalpha_X,
    dalpha_X_prime,
)
from .grid import (
    GridFunction,
    Mesh,
    bracket_indices,
    differentiate,
    evaluate,
    evaluate_u,
    integrate,
    integrate_to,
    l1_norm,
)

__all__ = [
    "ConvergenceError",
    "DensityRecord",
    "UlamOperator",
    "Jet",
    "jet_one",
    "jet_apply",
    "jet_from_density",
    "apply_L",
    "apply_N",
    "apply_preimage_sum",
    "apply_M",
    "apply_d2L",
    "seven_term_decomposition",
    "compute_density",
    "default_max_iter",
    "build_ulam",
    "ulam_stationary",
    "ulam_mean",
    "ulam_l1_distance",
]


class ConvergenceError(RuntimeError):
    """Iteration failed to reach the requested tolerance."""


@dataclass
class DensityRecord:
    """Converged (or honestly flagged) invariant density.

    The density is stored as x^(-alpha) * u(x); ``residual`` is the L1
    distance between the last two normalized iterates and ``normalization``
    the quadrature integral after the final renormalization.
    """

    params: MapParams
    density: GridFunction
    iterations: int
    residual: float
    normalization: float
    tol: float
    converged: bool

    def envelope_band(self, x_lo: float = 0.0) -> tuple[float, float]:
        """Fitted [c1, c2] with c1 <= rho(x) x^alpha <= c2 on nodes >= x_lo."""
        mask = self.density.mesh.nodes >= x_lo
        vals = self.density.values[mask]
        return float(np.min(vals)), float(np.max(vals))


@functools.lru_cache(maxsize=64)
def _pullbacks(p: MapParams, mesh: Mesh):
    """Precomputed node pullbacks for the two branches on a fixed mesh."""
    x = mesh.nodes
    g = np.asarray(branch_inverse(p, x, tol=0.0), dtype=float)
    gp = np.asarray(branch_inverse_deriv(p, x, 1), dtype=float)
    right = 0.5 * (x + 1.0)
    idx_g = bracket_indices(mesh, g)
    idx_r = bracket_indices(mesh, right)
    log_ratio = np.log(x) - np.log(g)  # log(x / g(x)), stable for tiny x
    log_ratio_r = np.log(x) - np.log(right)
    for arr in (g, gp, right, idx_g, idx_r, log_ratio, log_ratio_r):
        arr.setflags(write=False)
    return g, gp, right, idx_g, idx_r, log_ratio, log_ratio_r


def _branch_values(p: MapParams, f: GridFunction, mesh: Mesh):
    """u-space contributions of the two branches of L at the mesh nodes."""
    if f.mesh is not mesh:
        raise ValueError("transfer: grid function lives on a different mesh")
    g, gp, right, idx_g, idx_r, lr_g, lr_r = _pullbacks(p, mesh)
    u_g = evaluate_u(f, g, idx_g)
    u_r = evaluate_u(f, right, idx_r)
    if f.s != 0.0:
        left = u_g * np.exp(f.s * lr_g) * gp
        right_part = 0.5 * u_r * np.exp(f.s * lr_r)
    else:
        left = u_g * gp
        right_part = 0.5 * u_r
    return left, right_part


def apply_N(p: MapParams, f: GridFunction) -> GridFunction:
    """Left-branch transfer operator: N f(x) = g'(x) f(g(x))."""
    left, _ = _branch_values(p, f, f.mesh)
    return GridFunction(f.mesh, left, f.s)


def apply_L(p: MapParams, f: GridFunction) -> GridFunction:
    """Full transfer operator; equals apply_N plus the affine-branch term."""
    left, right_part = _branch_values(p, f, f.mesh)
    return GridFunction(f.mesh, left + right_part, f.s)


def apply_preimage_sum(p: MapParams, f: GridFunction) -> GridFunction:
    """Unweighted preimage sum (A f)(x) = f(g(x)) + f((x+1)/2).

    This is the transfer operator without the 1/T' weights (A 1 = 2).  It
    arises from the substitution y = T^k x in pulled-back integrals:
    int psi(T^k x) (T^k)'(x) W(x) dx = int psi * A^k W dx.  Only exponent-0
    grid functions are supported (the use case is smooth W = X * N rho).
    """
    if f.s != 0.0:
        raise ValueError("apply_preimage_sum: requires singular exponent 0")
    g, _, right, idx_g, idx_r, _, _ = _pullbacks(p, f.mesh)
    vals = evaluate_u(f, g, idx_g) + evaluate_u(f, right, idx_r)
    return GridFunction(f.mesh, vals, 0.0)


def _fields(p: MapParams, mesh: Mesh):
    key = ("fields", p.alpha)
    try:
        return mesh._cache[key]
    except KeyError:
        x = mesh.nodes
        vals = {
            "X": np.asarray(X(p, x)),
            "Xp": np.asarray(X_prime(p, x)),
            "Xpp": np.asarray(X_double_prime(p, x)),
            "dX": np.asarray(dalpha_X(p, x)),
            "dXp": np.asarray(dalpha_X_prime(p, x)),
        }
        for a in vals.values():
            a.setflags(write=False)
        mesh._cache[key] = vals
        return vals


def apply_M(p: MapParams, f: GridFunction) -> GridFunction:
    """Parameter derivative of L: M f = -(X * N f)' in Leibniz form.

    Uses closed-form X, X' and the discrete derivative of N f; matches
    central a-differences of apply_L to O(eps^2) plus mesh error.
    """
    fl = _fields(p, f.mesh)
    x = f.mesh.nodes
    nf = apply_N(p, f)
    dnf = differentiate(nf)  # exponent s+1, values = x^(s+1) (Nf)'
    u_out = -fl["Xp"] * nf.values - fl["X"] / x * dnf.values
    return GridFunction(f.mesh, u_out, f.s)


def seven_term_decomposition(p: MapParams, f: GridFunction) -> list[GridFunction]:
    """The seven Leibniz terms of d2/da2 L f.

    Expanding d2L f = -((d_a X)(N f))' + X'(X N f)' + X(X N f)'' with the
    product rule gives

        I  = -(d_a X)'(N f)  -  (d_a X)(N f)'
        II =  (X')^2 (N f)   +  X' X (N f)'
        III=  X X'' (N f)  +  2 X X' (N f)'  +  X^2 (N f)''

    (the second term of I carries a minus sign; the a-difference oracle on
    apply_L confirms this grouping).  Field derivatives are closed-form,
    (N f)' and (N f)'' discrete.
    """
    fl = _fields(p, f.mesh)
    x = f.mesh.nodes
    nf = apply_N(p, f)
    dnf = differentiate(nf)
    d2nf = differentiate(dnf)
    u, du, d2u = nf.values, dnf.values / x, d2nf.values / x**2
    s = f.s
    terms = [
        -fl["dXp"] * u,
        -fl["dX"] * du,
        fl["Xp"] ** 2 * u,
        fl["Xp"] * fl["X"] * du,
        fl["X"] * fl["Xpp"] * u,
        2.0 * fl["X"] * fl["Xp"] * du,
        fl["X"] ** 2 * d2u,
    ]
    return [GridFunction(f.mesh, t, s) for t in terms]


def apply_d2L(p: MapParams, f: GridFunction) -> GridFunction:
    """Second parameter derivative of L: nodewise sum of the seven terms."""
    terms = seven_term_decomposition(p, f)
    acc = terms[0].values.copy()
    for t in terms[1:]:
        acc += t.values
    return GridFunction(f.mesh, acc, f.s)


# ---------------------------------------------------------------------------
# Derivative jets under the operator.
#
# Differencing interpolation-propagated iterates amplifies the cell-scale
# interpolation ripple by h^-2 (worse for higher orders), which poisons
# pointwise cone margins near the singularity.  Derivative fields are
# therefore propagated through L by the exact chain rule instead, using the
# closed-form branch-inverse derivatives:
#
#   (L phi)    = phi(g) g'            + phi(r)/2,          r = (x+1)/2
#   (L phi)'   = phi'(g) g'^2  + phi(g) g''                + phi'(r)/4
#   (L phi)''  = phi''(g) g'^3 + 3 phi'(g) g' g'' + phi(g) g'''   + phi''(r)/8
#   (L phi)''' = phi'''(g) g'^4 + 6 phi''(g) g'^2 g''
#                + phi'(g) (4 g' g''' + 3 g''^2) + phi(g) g''''   + phi'''(r)/16
#
# Levels are stored like ``differentiate`` output: phi^(j) = x^-(s+j) u_j.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Jet:
    """phi and its first ``order`` derivatives as GridFunctions."""

    levels: tuple

    @property
    def order(self) -> int:
        return len(self.levels) - 1

    @property
    def mesh(self) -> Mesh:
        return self.levels[0].mesh

    def full_values(self) -> list[np.ndarray]:
        return [lv.full_values() for lv in self.levels]


def jet_one(p: MapParams, mesh: Mesh, order: int = 3) -> Jet:
    """Exact jet of the constant function 1 (base exponent alpha)."""
    a = p.alpha
    levels = [GridFunction(mesh, mesh.nodes**a, a)]
    for j in range(1, order + 1):
        levels.append(GridFunction(mesh, np.zeros(mesh.size), a + j))
    return Jet(tuple(levels))


@functools.lru_cache(maxsize=64)
def _jet_pullbacks(p: MapParams, mesh: Mesh):
    from .maps import _g_chain

    x = mesh.nodes
    g, gp, gpp, gppp, gpppp = _g_chain(p, x, 4)
    right = 0.5 * (x + 1.0)
    idx_g = bracket_indices(mesh, g)
    idx_r = bracket_indices(mesh, right)
    lr_g = np.log(x) - np.log(g)
    lr_r = np.log(x) - np.log(right)
    out = (g, gp, gpp, gppp, gpppp, right, idx_g, idx_r, lr_g, lr_r)
    for arr in out:
        arr.setflags(write=False)
    return out


def jet_apply(p: MapParams, jet: Jet, branch: str = "both") -> Jet:
    """Chain-rule image of a jet under L (branch="both") or N ("left")."""
    if branch not in ("both", "left"):
        raise ValueError("jet_apply: branch must be 'both' or 'left'")
    mesh = jet.mesh
    x = mesh.nodes
    s = jet.levels[0].s
    g, gp, gpp, gppp, gpppp, right, idx_g, idx_r, lr_g, lr_r = _jet_pullbacks(p, mesh)
    wg, wr = [], []
    for i, lv in enumerate(jet.levels):
        wg.append(np.exp((s + i) * lr_g) * evaluate_u(lv, g, idx_g))
        if branch == "both":
            wr.append(np.exp((s + i) * lr_r) * evaluate_u(lv, right, idx_r))
    order = jet.order
    out = [wg[0] * gp]
    if order >= 1:
        out.append(wg[1] * gp**2 + x * wg[0] * gpp)
    if order >= 2:
        out.append(wg[2] * gp**3 + 3.0 * x * wg[1] * gp * gpp + x**2 * wg[0] * gppp)
    if order >= 3:
        out.append(
            wg[3] * gp**4
            + 6.0 * x * wg[2] * gp**2 * gpp
            + x**2 * wg[1] * (4.0 * gp * gppp + 3.0 * gpp**2)
            + x**3 * wg[0] * gpppp
        )
    if branch == "both":
        for j in range(order + 1):
            out[j] = out[j] + wr[j] * 0.5 ** (j + 1)
    return Jet(tuple(
        GridFunction(mesh, u, s + j) for j, u in enumerate(out)
    ))


def jet_from_density(
    p: MapParams,
    record: DensityRecord,
    order: int = 3,
    tol: float = 1e-11,
    max_sweeps: int = 2000,
) -> Jet:
    """Self-consistent derivative jet of the invariant density.

    rho' , rho'', ... solve the differentiated fixed-point equations; with
    rho frozen the jet update is an affine sup-contraction (rates (g')^(j+1)
    and 2^-(j+1)), so sweeping ``jet_apply`` with the base level pinned to
    rho converges geometrically away from 0 and like 1 - c x^alpha near it.
    Stencil derivatives seed the iteration.
    """
    rho = record.density
    mesh = rho.mesh
    levels = [rho]
    for _ in range(order):
        levels.append(differentiate(levels[-1]))
    jet = Jet(tuple(levels))
    for _ in range(max_sweeps):
        new = jet_apply(p, jet)
        new = Jet((rho,) + new.levels[1:])
        delta = max(
            float(np.max(np.abs(new.levels[j].values - jet.levels[j].values)))
            / max(float(np.max(np.abs(new.levels[j].values))), 1e-300)
            for j in range(1, order + 1)
        )
        jet = new
        if delta <= tol:
            break
    return jet


def default_max_iter(alpha: float, tol: float, cap: int = 200_000) -> int:
    """Iteration budget matched to the polynomial L1 rate k^(1 - 1/alpha)."""
    if alpha <= 0.0:
        return 64
    est = 8.0 * tol ** (alpha / (alpha - 1.0))
    return int(min(cap, max(64.0, est)))


def compute_density(
    p: MapParams,
    mesh: Mesh,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> DensityRecord:
    """Invariant density by renormalized power iteration from f = 1.

    Stops when the L1 distance between successive normalized iterates drops
    below ``tol``; if the budget runs out first the record comes back with
    ``converged=False`` (callers that need a converged density must check).
    """
    if tol <= 0.0:
        raise ValueError("compute_density: tol must be > 0")
    a = p.alpha
    if max_iter is None:
        max_iter = default_max_iter(a, tol)
    f = GridFunction(mesh, mesh.nodes**a, a)  # the constant function 1
    f = (1.0 / integrate(f)) * f
    residual = math.inf
    iterations = 0
    for k in range(max_iter):
        nxt = apply_L(p, f)
        nxt = (1.0 / integrate(nxt)) * nxt
        residual = l1_norm(nxt - f)
        f = nxt
        iterations = k + 1
        if residual <= tol:
            break
    norm = integrate(f)
    return DensityRecord(
        params=p,
        density=f,
        iterations=iterations,
        residual=float(residual),
        normalization=float(norm),
        tol=float(tol),
        converged=residual <= tol,
    )


# ---------------------------------------------------------------------------
# Ulam discretization (independent operator model)
# ---------------------------------------------------------------------------


@dataclass
class UlamOperator:
    """Row-stochastic Ulam matrix on the cells of a partition of [0, 1].

    Cell i is (edges[i], edges[i+1]] with edges = [0] + partition nodes;
    entry (i, j) is Leb(I_i intersect T^{-1} I_j) / Leb(I_i), assembled
    from exact branchwise preimage intervals.
    """

    partition: Mesh
    matrix: sp.csr_matrix
    edges: np.ndarray

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


def _interval_overlaps(edges, lo, hi):
    """Indices and overlap lengths of cells meeting [lo, hi]."""
    if hi <= lo:
        return np.empty(0, dtype=int), np.empty(0)
    i0 = max(int(np.searchsorted(edges, lo, side="right")) - 1, 0)
    i1 = min(int(np.searchsorted(edges, hi, side="left")), len(edges) - 1)
    idx = np.arange(i0, i1)
    seg_lo = np.maximum(edges[idx], lo)
    seg_hi = np.minimum(edges[idx + 1], hi)
    return idx, np.maximum(seg_hi - seg_lo, 0.0)


def build_ulam(p: MapParams, partition: Mesh) -> UlamOperator:
    """Assemble the Ulam matrix from exact preimage-interval intersections.

    Both branches are monotone, so the preimage of a cell under each branch
    is a single interval: [g(c), g(d)] on the left and [(c+1)/2, (d+1)/2]
    on the right.
    """
    edges = np.concatenate([[0.0], partition.nodes])
    m = edges.size - 1
    g_edges = np.asarray(branch_inverse(p, edges, tol=0.0))
    r_edges = 0.5 * (edges + 1.0)
    rows, cols, vals = [], [], []
    widths = np.diff(edges)
    for j in range(m):
        for pre_lo, pre_hi in (
            (g_edges[j], g_edges[j + 1]),
            (r_edges[j], r_edges[j + 1]),
        ):
            idx, over = _interval_overlaps(edges, pre_lo, pre_hi)
            keep = over > 0.0
            rows.append(idx[keep])
            cols.append(np.full(int(keep.sum()), j))
            vals.append(over[keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals) / widths[rows]
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    return UlamOperator(partition=partition, matrix=mat, edges=edges)


def ulam_stationary(
    U: UlamOperator, tol: float = 1e-13, max_iter: int = 400_000
) -> GridFunction:
    """Stationary density of the Ulam chain by power iteration.

    Returns the piecewise-constant density as a GridFunction on the
    partition (value at node i = cell mass / cell width of the cell ending
    at that node).
    """
    m = U.matrix.shape[0]
    pt = U.matrix.T.tocsr()
    v = np.full(m, 1.0 / m)
    resid = math.inf
    best = math.inf
    since_best = 0
    for _ in range(max_iter):
        w = pt @ v
        w /= w.sum()
        resid = float(np.abs(w - v).sum())
        v = w
        if resid <= tol:
            break
        if resid < best:
            best = resid
            since_best = 0
        else:
            since_best += 1
            if since_best > 5000:
                raise ConvergenceError(
                    f"ulam_stationary: stagnation at residual {resid:.3e}"
                )
    else:
        raise ConvergenceError(f"ulam_stationary: residual {resid:.3e} after {max_iter}")
    density = v / U.widths
    return GridFunction(U.partition, density, 0.0)


def ulam_mean(U: UlamOperator, stationary: GridFunction, fn) -> float:
    """Observable mean under the Ulam stationary measure (cellwise Simpson)."""
    mass = stationary.values * U.widths
    a, b = U.edges[:-1], U.edges[1:]
    mid = 0.5 * (a + b)
    cell_avg = (fn(a) + 4.0 * fn(mid) + fn(b)) / 6.0
    return float(np.sum(mass * cell_avg))


def ulam_l1_distance(record: DensityRecord, U: UlamOperator,
                     stationary: GridFunction) -> float:
    """L1 distance between a grid density and the Ulam piecewise-constant one.

    Cellwise 2-point Gauss sampling of the grid density; the first cell
    (0, edges[1]] is compared through its mass instead, since the grid
    density is singular there.
    """
    a, b = U.edges[:-1], U.edges[1:]
    h = b - a
    off = 0.5 / math.sqrt(3.0)
    d_ulam = stationary.values
    total = 0.0
    for sgn in (-1.0, 1.0):
        xq = 0.5 * (a[1:] + b[1:]) + sgn * off * h[1:]
        rho = evaluate(record.density, xq)
        total += 0.5 * np.sum(h[1:] * np.abs(rho - d_ulam[1:]))
    # mass difference on the unresolved first cell
    m_grid = integrate_to(record.density, _nearest_node(record.density.mesh, b[0]))
    total += abs(m_grid - d_ulam[0] * h[0])
    return float(total)


def _nearest_node(mesh: Mesh, xv: float) -> float:
    i = int(np.clip(np.searchsorted(mesh.nodes, xv), 0, mesh.size - 1))
    if i > 0 and abs(mesh.nodes[i - 1] - xv) < abs(mesh.nodes[i] - xv):
        i -= 1
    return float(mesh.nodes[i])
