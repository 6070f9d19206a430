"""Functions on (0, 1] with an x^(-s) endpoint singularity.

A ``GridFunction`` stores a function as f(x) = x^(-s) * u(x) with bounded
nodal values u on a singularity-graded ``Mesh``.  Quadrature integrates the
piecewise-linear interpolant of u against the exact x^(-s) cell moments (so
it is linear and positive in u), differentiation uses the product rule with
3-point nonuniform stencils on u, and point evaluation uses monotone
piecewise-cubic (PCHIP) interpolation of u.

Meshes are built as the union of the neutral-orbit points g_a^l(1), a
geometric refinement down to ``x_min`` and a polynomially graded bulk; below
``x_min`` the regular factor u is extended as a constant and the quadrature
adds the analytic tail integral.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .maps import MapParams, branch_inverse

__all__ = [
    "Mesh",
    "GridFunction",
    "build_mesh",
    "integrate",
    "integrate_to",
    "differentiate",
    "evaluate",
    "l1_norm",
    "fd_weights",
    "derivatives_full",
    "mesh_to_dict",
    "mesh_from_dict",
    "gridfunction_to_dict",
    "gridfunction_from_dict",
]

_GEO_POINTS_PER_DECADE = 24


@dataclass(frozen=True, eq=False)
class Mesh:
    """Sorted node set in (0, 1] with grading metadata.

    ``nodes[0] == x_min`` and ``nodes[-1] == 1``.  The first ``orbit_len``
    points of the neutral orbit x_l = g_a^l(1) for ``built_for_alpha`` are
    node values.  Meshes compare and hash by identity; grid functions only
    combine when they share the same Mesh object.
    """

    nodes: np.ndarray
    grading_exponent: float
    x_min: float
    built_for_alpha: float
    orbit_len: int
    n_request: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.flags.writeable or not nodes.flags.c_contiguous:
            nodes = np.ascontiguousarray(nodes).copy()
        if nodes.ndim != 1 or nodes.size < 8:
            raise ValueError("Mesh: need a 1-d array of at least 8 nodes")
        if not np.all(np.diff(nodes) > 0.0):
            raise ValueError("Mesh: nodes must be strictly increasing")
        if nodes[0] <= 0.0 or nodes[-1] != 1.0:
            raise ValueError("Mesh: nodes must lie in (0, 1] and end at 1")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def widths(self) -> np.ndarray:
        try:
            return self._cache["widths"]
        except KeyError:
            w = np.diff(self.nodes)
            w.setflags(write=False)
            self._cache["widths"] = w
            return w

    def moments(self, s: float):
        """Exact cell moments (M0, M1) of x^(-s): integrals of x^(-s) and
        x^(1-s) over each cell, plus the [0, x_min] tail of x^(-s)."""
        key = ("mom", float(s))
        try:
            return self._cache[key]
        except KeyError:
            m = _cell_moments(self.nodes, s)
            self._cache[key] = m
            return m

    def spec(self) -> dict:
        return {
            "n": int(self.n_request),
            "orbit_len": int(self.orbit_len),
            "x_min": float(self.x_min),
            "alpha": float(self.built_for_alpha),
            "grading_exponent": float(self.grading_exponent),
            "size": int(self.size),
        }


def _power_diff(a, b, q):
    """b^q - a^q computed stably for narrow cells (relative log form)."""
    return a**q * np.expm1(q * np.log1p((b - a) / a))


def _cell_moments(nodes, s):
    s = float(s)
    if s >= 1.0:
        raise ValueError(f"non-integrable singular exponent s = {s}")
    a, b = nodes[:-1], nodes[1:]
    m0 = _power_diff(a, b, 1.0 - s) / (1.0 - s)
    m1 = _power_diff(a, b, 2.0 - s) / (2.0 - s)
    tail = nodes[0] ** (1.0 - s) / (1.0 - s)
    for arr in (m0, m1):
        arr.setflags(write=False)
    return m0, m1, tail


def build_mesh(p: MapParams, n: int, L: int, x_min: float = 1e-10) -> Mesh:
    """Construct the standard singularity-graded mesh for parameter p.

    Union of (i) the neutral-orbit points g_a^l(1), l = 0..L, truncated
    where they fall below x_min, (ii) a geometric ladder from x_min up to
    the smallest retained orbit point, and (iii) n graded nodes (i/n)^gamma
    with gamma = max(2, 2/(1-a)).  Near-duplicates are merged.
    """
    if n < 64:
        raise ValueError("build_mesh: n must be >= 64")
    if L < 1:
        raise ValueError("build_mesh: L must be >= 1")
    if not (0.0 < x_min < 0.5):
        raise ValueError("build_mesh: x_min must lie in (0, 1/2)")
    a = p.alpha
    gamma = max(2.0, 2.0 / (1.0 - a))

    orbit = [1.0, 0.5]
    x = 0.5
    while len(orbit) <= L:
        x = branch_inverse(p, x, tol=0.0)
        if x <= x_min:
            break
        orbit.append(x)
    orbit_len = len(orbit) - 1  # number of points beyond x_0 = 1

    lo = min(orbit[-1], 0.5)
    decades = math.log10(lo / x_min)
    if decades > 0:
        n_geo = max(8, int(math.ceil(_GEO_POINTS_PER_DECADE * decades)) + 1)
        geo = np.geomspace(x_min, lo, n_geo)
    else:
        geo = np.array([x_min])

    graded = (np.arange(1, n + 1, dtype=float) / n) ** gamma
    graded = graded[graded > x_min]

    # Union the three families, protecting the orbit nodes (and the
    # endpoints) against merging.  Unprotected nodes closer to a kept
    # neighbour than a fraction of the local intended spacing are dropped:
    # near-coincident nodes from different families otherwise create
    # extreme cell-width ratios that wreck high-order stencils.
    pts = np.concatenate([np.asarray(orbit), geo, graded])
    prot = np.zeros(pts.size, dtype=bool)
    prot[: len(orbit)] = True
    prot[len(orbit)] = True  # x_min (first geometric node)
    order = np.argsort(pts, kind="stable")
    pts, prot = pts[order], prot[order]
    geo_ratio = 10.0 ** (1.0 / _GEO_POINTS_PER_DECADE) - 1.0

    def local_h(xv):
        hg = gamma * xv ** (1.0 - 1.0 / gamma) / n
        return min(hg, geo_ratio * xv)

    keep_x = [pts[0]]
    keep_p = [prot[0]]
    for xv, pr in zip(pts[1:], prot[1:]):
        if xv - keep_x[-1] >= 0.35 * local_h(xv):
            keep_x.append(xv)
            keep_p.append(pr)
        elif pr and not keep_p[-1]:
            keep_x[-1] = xv  # orbit node wins over a nearby family node
            keep_p[-1] = True
        elif pr and keep_p[-1] and xv > keep_x[-1]:
            keep_x.append(xv)  # two protected nodes: keep both
            keep_p.append(True)
    nodes = np.asarray(keep_x)
    nodes[0] = x_min
    nodes[-1] = 1.0
    nodes = np.unique(nodes)
    return Mesh(
        nodes=nodes,
        grading_exponent=gamma,
        x_min=float(x_min),
        built_for_alpha=a,
        orbit_len=orbit_len,
        n_request=int(n),
    )


@dataclass(frozen=True, eq=False)
class GridFunction:
    """f(x) = x^(-s) * u(x) with u stored at the mesh nodes.

    Immutable; arithmetic requires the identical Mesh object.  Addition
    promotes both operands to the larger singular exponent, multiplication
    adds the exponents.
    """

    mesh: Mesh
    values: np.ndarray
    s: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.flags.writeable or not v.flags.c_contiguous:
            v = np.ascontiguousarray(v).copy()
        if v.shape != (self.mesh.size,):
            raise ValueError("GridFunction: values must match mesh size")
        if not np.all(np.isfinite(v)):
            raise ValueError("GridFunction: values must be finite")
        if self.s < 0.0:
            raise ValueError("GridFunction: singular exponent must be >= 0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "s", float(self.s))

    # -- representation helpers -------------------------------------------
    def full_values(self) -> np.ndarray:
        """f at the nodes, singular factor included."""
        if self.s == 0.0:
            return self.values
        return self.values * self.mesh.nodes ** (-self.s)

    def with_exponent(self, s_new: float) -> "GridFunction":
        """Re-express with a larger singular exponent (values stay finite)."""
        if s_new == self.s:
            return self
        if s_new < self.s:
            raise ValueError("with_exponent: can only increase the exponent")
        u = self.values * self.mesh.nodes ** (s_new - self.s)
        return GridFunction(self.mesh, u, s_new)

    def _slopes(self) -> np.ndarray:
        try:
            return self._cache["slopes"]
        except KeyError:
            d = _pchip_slopes(self.mesh.nodes, self.values)
            d.setflags(write=False)
            self._cache["slopes"] = d
            return d

    # -- arithmetic --------------------------------------------------------
    def _check_mesh(self, other):
        if self.mesh is not other.mesh:
            raise ValueError("GridFunction: operands live on different meshes")

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check_mesh(other)
            s = max(self.s, other.s)
            return GridFunction(
                self.mesh,
                self.with_exponent(s).values + other.with_exponent(s).values,
                s,
            )
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self._check_mesh(other)
            s = max(self.s, other.s)
            return GridFunction(
                self.mesh,
                self.with_exponent(s).values - other.with_exponent(s).values,
                s,
            )
        return NotImplemented

    def __mul__(self, other):
        if isinstance(other, GridFunction):
            self._check_mesh(other)
            return GridFunction(self.mesh, self.values * other.values, self.s + other.s)
        if np.isscalar(other):
            return GridFunction(self.mesh, self.values * float(other), self.s)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.mesh, -self.values, self.s)

    def __abs__(self):
        return GridFunction(self.mesh, np.abs(self.values), self.s)


# ---------------------------------------------------------------------------
# PCHIP (Fritsch-Carlson) slopes and Hermite evaluation, vectorized.
# Matches scipy.interpolate.PchipInterpolator to rounding.
# ---------------------------------------------------------------------------


def _pchip_slopes(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    h = np.diff(x)
    m = np.diff(u) / h
    d = np.zeros_like(u)
    hk, hk1 = h[1:], h[:-1]
    mk, mk1 = m[1:], m[:-1]
    w1 = 2.0 * hk + hk1
    w2 = hk + 2.0 * hk1
    with np.errstate(divide="ignore", invalid="ignore"):
        whm = (w1 + w2) / (w1 / mk1 + w2 / mk)
    d[1:-1] = np.where(np.sign(mk1) * np.sign(mk) > 0, whm, 0.0)

    def edge(h0, h1, m0, m1):
        dd = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
        if np.sign(dd) != np.sign(m0):
            return 0.0
        if np.sign(m0) != np.sign(m1) and abs(dd) > 3.0 * abs(m0):
            return 3.0 * m0
        return dd

    d[0] = edge(h[0], h[1], m[0], m[1])
    d[-1] = edge(h[-1], h[-2], m[-1], m[-2])
    return d


def _hermite_eval(x, u, d, xq, idx):
    x0 = x[idx]
    hh = x[idx + 1] - x0
    t = (xq - x0) / hh
    t2 = t * t
    t3 = t2 * t
    return (
        (2.0 * t3 - 3.0 * t2 + 1.0) * u[idx]
        + hh * (t3 - 2.0 * t2 + t) * d[idx]
        + (3.0 * t2 - 2.0 * t3) * u[idx + 1]
        + hh * (t3 - t2) * d[idx + 1]
    )


def bracket_indices(mesh: Mesh, xq: np.ndarray) -> np.ndarray:
    """Cell index per query point, clipped to valid cells (reusable)."""
    return np.clip(np.searchsorted(mesh.nodes, xq, side="right") - 1, 0, mesh.size - 2)


def evaluate_u(f: GridFunction, xq, idx=None):
    """Interpolate the regular factor u at xq; constant below x_min."""
    x = f.mesh.nodes
    xq = np.asarray(xq, dtype=float)
    if idx is None:
        idx = bracket_indices(f.mesh, xq)
    out = _hermite_eval(x, f.values, f._slopes(), np.clip(xq, x[0], 1.0), idx)
    if np.any(xq < x[0]):
        out = np.where(xq < x[0], f.values[0], out)
    return out


def evaluate(f: GridFunction, x):
    """Evaluate f(x) = x^(-s) u(x) at scalar or array x in (0, 1].

    u is interpolated by monotone piecewise cubics (exact at nodes and for
    linear data); below x_min the regular factor is extended as a constant.
    """
    xa = np.asarray(x, dtype=float)
    scalar = xa.ndim == 0
    xa = np.atleast_1d(xa)
    if np.any(xa <= 0.0):
        raise ValueError("evaluate: x must be > 0")
    if np.any(xa > 1.0 + 1e-12):
        raise ValueError("evaluate: x must be <= 1")
    xa = np.minimum(xa, 1.0)
    out = evaluate_u(f, xa)
    if f.s != 0.0:
        out = out * xa ** (-f.s)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


def integrate(f: GridFunction) -> float:
    """Integral of x^(-s) u over (0, 1].

    Per cell the rule is exact for u linear against the weight x^(-s)
    (analytic moments); on (0, x_min] the regular factor is frozen at
    u(x_min) and the tail integral is added analytically.  Linear and
    positive in the nodal values.
    """
    m0, m1, tail = f.mesh.moments(f.s)
    x = f.mesh.nodes
    u = f.values
    ubar = 0.5 * (u[:-1] + u[1:])
    slope = np.diff(u) / f.mesh.widths
    xbar = 0.5 * (x[:-1] + x[1:])
    cells = ubar * m0 + slope * (m1 - xbar * m0)
    return float(np.sum(cells) + u[0] * tail)


def integrate_to(f: GridFunction, upper: float) -> float:
    """Integral over (0, upper] where ``upper`` must be a mesh node."""
    x = f.mesh.nodes
    j = int(np.searchsorted(x, upper))
    if j >= x.size or abs(x[j] - upper) > 1e-12 * max(upper, 1.0):
        raise ValueError("integrate_to: upper bound must be a mesh node")
    m0, m1, tail = f.mesh.moments(f.s)
    u = f.values
    ubar = 0.5 * (u[:j] + u[1 : j + 1])
    slope = (u[1 : j + 1] - u[:j]) / f.mesh.widths[:j]
    xbar = 0.5 * (x[:j] + x[1 : j + 1])
    cells = ubar * m0[:j] + slope * (m1[:j] - xbar * m0[:j])
    return float(np.sum(cells) + u[0] * tail)


def l1_norm(f: GridFunction) -> float:
    return integrate(abs(f))


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------


def _three_point_weights(mesh: Mesh):
    """Per-node 3-point first-derivative weights (constants annihilated)."""
    try:
        return mesh._cache["d1w"]
    except KeyError:
        pass
    x = mesh.nodes
    n = x.size
    w = np.zeros((n, 3))  # contributions of (left, self, right) neighbours
    h = np.diff(x)
    h1, h2 = h[:-1], h[1:]
    w[1:-1, 0] = -h2 / (h1 * (h1 + h2))
    w[1:-1, 2] = h1 / (h2 * (h1 + h2))
    w[1:-1, 1] = -(w[1:-1, 0] + w[1:-1, 2])
    # one-sided ends use the first/last three nodes
    ha, hb = h[0], h[1]
    w[0, 1] = (ha + hb) / (ha * hb)  # weight of node 1
    w[0, 2] = -ha / (hb * (ha + hb))  # weight of node 2
    w[0, 0] = -(w[0, 1] + w[0, 2])  # weight of node 0 itself
    ha, hb = h[-2], h[-1]
    w[-1, 1] = -(ha + hb) / (ha * hb)  # weight of node n-2
    w[-1, 0] = hb / (ha * (ha + hb))  # weight of node n-3
    w[-1, 2] = -(w[-1, 0] + w[-1, 1])  # weight of node n-1 itself
    w.setflags(write=False)
    mesh._cache["d1w"] = w
    return w


def _u_derivative(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    # difference form: constants are annihilated exactly, not just to rounding
    w = _three_point_weights(mesh)
    du = np.empty_like(u)
    du[1:-1] = w[1:-1, 0] * (u[:-2] - u[1:-1]) + w[1:-1, 2] * (u[2:] - u[1:-1])
    du[0] = w[0, 1] * (u[1] - u[0]) + w[0, 2] * (u[2] - u[0])
    du[-1] = w[-1, 0] * (u[-3] - u[-1]) + w[-1, 1] * (u[-2] - u[-1])
    return du


def differentiate(f: GridFunction) -> GridFunction:
    """Derivative of x^(-s) u via the product rule.

    The singular part is differentiated analytically and u by 3-point
    nonuniform stencils, so the output has exponent s + 1 and values
    -s*u + x*u'.
    """
    du = _u_derivative(f.mesh, f.values)
    w = f.mesh.nodes * du
    if f.s != 0.0:
        w = w - f.s * f.values
    return GridFunction(f.mesh, w, f.s + 1.0)


def fd_weights(
    xw: np.ndarray, centers: np.ndarray, order: int, center_pos: np.ndarray | None = None
) -> np.ndarray:
    """Batched stencil weights for the ``order``-th derivative.

    ``xw`` has shape (n, p): each row is a window of p nodes; ``centers``
    the evaluation points.  Weights come from local polynomial
    interpolation (Vandermonde solve in shifted/scaled coordinates).  When
    ``center_pos`` gives the index of the center inside each window, the
    weights are corrected there so constants are annihilated exactly.
    """
    n, pts = xw.shape
    if order >= pts:
        raise ValueError("fd_weights: need more points than derivative order")
    t = xw - centers[:, None]
    scale = np.max(np.abs(t), axis=1)
    scale[scale == 0.0] = 1.0
    t = t / scale[:, None]
    A = t[:, None, :] ** np.arange(pts)[None, :, None]  # A[i, k, j] = t_j^k
    rhs = np.zeros((n, pts))
    rhs[:, order] = math.factorial(order)
    w = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
    w /= scale[:, None] ** order
    if order >= 1 and center_pos is not None:
        w[np.arange(n), center_pos] -= w.sum(axis=1)
    return w


def _windows(n: int, pts: int):
    half = pts // 2
    start = np.clip(np.arange(n) - half, 0, n - pts)
    idx = start[:, None] + np.arange(pts)[None, :]
    return idx, np.arange(n) - start


def u_derivatives_stencil(mesh: Mesh, u: np.ndarray, order: int, pts: int = 5):
    """u', ..., u^(order) from local polynomial stencils of width pts."""
    key = ("stw", order, pts)
    try:
        wlist, widx = mesh._cache[key]
    except KeyError:
        widx, pos = _windows(mesh.size, pts)
        xw = mesh.nodes[widx]
        wlist = [fd_weights(xw, mesh.nodes, k, pos) for k in range(1, order + 1)]
        mesh._cache[key] = (wlist, widx)
    uw = u[widx] - u[:, None]  # difference form: exact on constants
    return [np.sum(w * uw, axis=1) for w in wlist]


def derivatives_full(f: GridFunction, order: int, pts: int = 5):
    """Nodal values of f and its first ``order`` derivatives.

    The singular factor x^(-s) is differentiated analytically; u-derivatives
    use ``pts``-point stencils.  Returns [f, f', ..., f^(order)].
    """
    x = f.mesh.nodes
    u = f.values
    uders = [u] + u_derivatives_stencil(f.mesh, u, order, pts)
    xs = x ** (-f.s) if f.s != 0.0 else np.ones_like(x)
    out = []
    for m in range(order + 1):
        acc = np.zeros_like(u)
        fall = 1.0  # falling factorial (-s)(-s-1)...(-s-j+1)
        for j in range(m + 1):
            acc = acc + math.comb(m, j) * fall * x ** (-float(j)) * uders[m - j]
            fall *= -f.s - j
        out.append(acc * xs)
    return out


# ---------------------------------------------------------------------------
# Serialization (JSON-friendly dictionaries)
# ---------------------------------------------------------------------------


def mesh_to_dict(mesh: Mesh) -> dict:
    return {
        "nodes": mesh.nodes.tolist(),
        "grading_exponent": mesh.grading_exponent,
        "x_min": mesh.x_min,
        "built_for_alpha": mesh.built_for_alpha,
        "orbit_len": mesh.orbit_len,
        "n_request": mesh.n_request,
    }


def mesh_from_dict(d: dict) -> Mesh:
    return Mesh(
        nodes=np.asarray(d["nodes"], dtype=float),
        grading_exponent=float(d["grading_exponent"]),
        x_min=float(d["x_min"]),
        built_for_alpha=float(d["built_for_alpha"]),
        orbit_len=int(d["orbit_len"]),
        n_request=int(d["n_request"]),
    )


def gridfunction_to_dict(f: GridFunction, meta: dict | None = None) -> dict:
    return {
        "mesh": mesh_to_dict(f.mesh),
        "s": f.s,
        "values": f.values.tolist(),
        "meta": dict(meta or {}),
    }


def gridfunction_from_dict(d: dict, mesh: Mesh | None = None) -> GridFunction:
    if mesh is None:
        mesh = mesh_from_dict(d["mesh"])
    return GridFunction(mesh, np.asarray(d["values"], dtype=float), float(d["s"]))
