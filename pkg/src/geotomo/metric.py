"""Analytic Riemannian metrics on a chart domain: components, Christoffel
symbols, boundary normals, and the boundary second fundamental form.

The metric and the domain defining function rho are closed-form expressions
over x1..xn (see expressions module).  Derivatives of the metric default to
symbolic differentiation of those expressions; user-supplied closed forms
override, and a finite-difference oracle (4th-order central, configurable
step) is available for cross-checks.

Everything here is a pure function of immutable inputs; instances are safe
to share across threads.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import expressions as ex
from .errors import (GeotomoError, NonPositiveDefiniteError,
                     NotOnBoundaryError, NotTangentError)

__all__ = [
    "DomainSpec", "MetricSpec", "ChristoffelAt",
    "metric_at", "christoffel", "boundary_normal", "second_fundamental_form",
]

_JIT_ENABLED = os.environ.get("GEOTOMO_JIT", "1") != "0"


def _maybe_jit(fn, source_name):
    if not _JIT_ENABLED:
        return fn
    try:
        import numba
        return numba.njit(cache=False)(fn)
    except Exception:  # pragma: no cover - numba always present in CI
        return fn


def _as_expr(e, n):
    return e if isinstance(e, ex.Expression) else ex.parse(str(e), n)


# ---------------------------------------------------------------------------
# domain
# ---------------------------------------------------------------------------

class DomainSpec:
    """Chart domain M = {rho > 0} inside the enlarged manifold
    M~ = {rho > -extension_margin}; M_1/2 = {rho > -extension_margin/2}.
    """

    def __init__(self, dimension, rho, extension_margin=None,
                 extension_margin_rel=0.15, center=None):
        if dimension < 2:
            raise GeotomoError("dimension must be >= 2")
        self.dimension = int(dimension)
        self.rho_expr = _as_expr(rho, dimension)
        self._rho_point = ex.compile_point(self.rho_expr, dimension)
        self._rho_grid = ex.compile_grid(self.rho_expr, dimension)
        self._grad_exprs = [ex.differentiate(self.rho_expr, k)
                            for k in range(dimension)]
        self._grad_points = [ex.compile_point(g, dimension) for g in self._grad_exprs]
        self._center = None if center is None else np.asarray(center, float)
        self._diameter = None
        if extension_margin is not None:
            self.extension_margin = float(extension_margin)
        else:
            self.extension_margin = extension_margin_rel * self.diameter

    # -- defining function -------------------------------------------------

    def rho(self, x):
        return self._rho_point(x)

    def rho_many(self, X):
        return self._rho_grid(np.asarray(X, float))

    def grad_rho(self, x):
        return np.array([g(x) for g in self._grad_points])

    def in_M(self, x, tol=0.0):
        return self.rho(x) > tol

    def in_M_tilde(self, x, tol=0.0):
        return self.rho(x) > -self.extension_margin + tol

    def in_M_half(self, x, tol=0.0):
        return self.rho(x) > -0.5 * self.extension_margin + tol

    # -- geometry helpers ----------------------------------------------------

    @property
    def center(self):
        """An interior point with comfortably positive rho."""
        if self._center is None:
            origin = np.zeros(self.dimension)
            if self.rho(origin) > 0:
                self._center = origin
            else:
                grid = np.linspace(-2.0, 2.0, 41)
                mesh = np.stack(np.meshgrid(*([grid] * self.dimension),
                                            indexing="ij"), axis=-1)
                vals = self.rho_many(mesh.reshape(-1, self.dimension))
                if vals.max() <= 0:
                    raise GeotomoError("could not locate an interior point of M")
                self._center = mesh.reshape(-1, self.dimension)[int(vals.argmax())]
        return self._center

    def _ray_level_crossing(self, direction, level=0.0, smax=64.0):
        """Root of rho(center + s*direction) = level along a ray."""
        from scipy.optimize import brentq
        c = self.center
        f = lambda s: self.rho(c + s * direction) - level  # noqa: E731
        lo, hi = 0.0, 0.25
        while f(hi) > 0:
            hi *= 2.0
            if hi > smax:
                raise GeotomoError("domain appears unbounded along a ray")
        s = brentq(f, lo, hi, xtol=1e-14, rtol=8.9e-16)
        return c + s * direction

    def boundary_point(self, angle, level=0.0):
        """n=2 helper: point of {rho = -level_offset} at polar angle about center."""
        if self.dimension != 2:
            raise GeotomoError("boundary_point is a 2-d helper")
        d = np.array([math.cos(angle), math.sin(angle)])
        return self._ray_level_crossing(d, level)

    def boundary_angle(self, x):
        if self.dimension != 2:
            raise GeotomoError("boundary_angle is a 2-d helper")
        c = self.center
        return math.atan2(x[1] - c[1], x[0] - c[0])

    def sample_boundary(self, count, level=0.0, offset=0.0):
        angles = offset + np.linspace(0.0, 2.0 * math.pi, count, endpoint=False)
        return np.array([self.boundary_point(a, level) for a in angles])

    @property
    def diameter(self):
        """Euclidean chart diameter of M, estimated from boundary samples."""
        if self._diameter is None:
            if self.dimension == 2:
                pts = self.sample_boundary(64)
            else:
                rng = np.random.default_rng(0)
                dirs = rng.normal(size=(128, self.dimension))
                dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
                pts = np.array([self._ray_level_crossing(d) for d in dirs])
            diff = pts[:, None, :] - pts[None, :, :]
            self._diameter = float(np.sqrt((diff ** 2).sum(-1)).max())
        return self._diameter

    @property
    def tol_boundary(self):
        return 1e-9 * self.diameter

    def describe(self):
        return {"dimension": self.dimension, "rho": str(self.rho_expr),
                "extension_margin": self.extension_margin,
                "diameter": self.diameter}


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChristoffelAt:
    """Christoffel symbols Gamma^k_ij (gamma[k, i, j]) and g^{ij} at a point."""
    x: np.ndarray
    gamma: np.ndarray
    g_inv: np.ndarray


class MetricSpec:
    """Symmetric analytic metric g_ij given componentwise as expressions.

    derivative_mode selects the oracle for d_k g_ij: 'symbolic' (default)
    differentiates the component expressions, 'fd' uses 4th-order central
    differences with the given step.  User-supplied closed-form derivatives
    (``derivatives[(i, j, k)]``) take precedence in symbolic mode.
    """

    def __init__(self, dimension, components, derivatives=None,
                 derivative_mode="symbolic", fd_step=1e-4):
        self.dimension = n = int(dimension)
        if derivative_mode not in ("symbolic", "fd"):
            raise GeotomoError("derivative_mode must be 'symbolic' or 'fd'")
        self.derivative_mode = derivative_mode
        self.fd_step = float(fd_step)

        comps = [[_as_expr(components[i][j], n) for j in range(n)] for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if ex.to_text(comps[i][j]) != ex.to_text(comps[j][i]):
                    raise GeotomoError(f"metric component g[{i+1}][{j+1}] is not "
                                       "symmetric with its transpose entry")
        self.component_exprs = comps
        self._g_point = [[ex.compile_point(comps[i][j], n) for j in range(n)]
                         for i in range(n)]
        self._g_grid = [[ex.compile_grid(comps[i][j], n) for j in range(n)]
                        for i in range(n)]

        # d_k g_ij expressions: user-supplied where given, symbolic otherwise
        dexprs = [[[None] * n for _ in range(n)] for _ in range(n)]  # [k][i][j]
        for k in range(n):
            for i in range(n):
                for j in range(n):
                    supplied = None
                    if derivatives:
                        supplied = derivatives.get((i, j, k))
                    if supplied is not None:
                        dexprs[k][i][j] = _as_expr(supplied, n)
                    else:
                        dexprs[k][i][j] = ex.differentiate(comps[i][j], k)
        self.derivative_exprs = dexprs
        self._dg_point = [[[ex.compile_point(dexprs[k][i][j], n)
                            for j in range(n)] for i in range(n)] for k in range(n)]
        self._rhs_cache = {}

    # -- pointwise evaluation ------------------------------------------------

    def matrix(self, x):
        n = self.dimension
        g = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                g[i, j] = g[j, i] = self._g_point[i][j](x)
        return g

    def matrix_many(self, X):
        X = np.asarray(X, float)
        n = self.dimension
        g = np.empty(X.shape[:-1] + (n, n))
        for i in range(n):
            for j in range(i, n):
                v = self._g_grid[i][j](X)
                g[..., i, j] = v
                g[..., j, i] = v
        return g

    def inverse(self, x):
        g = self.matrix(x)
        try:
            return np.linalg.inv(g)
        except np.linalg.LinAlgError as err:
            raise NonPositiveDefiniteError(f"metric singular at {tuple(x)}") from err

    def d_metric(self, x):
        """(n, n, n) array d[k, i, j] = d_k g_ij from the configured oracle."""
        if self.derivative_mode == "fd":
            return self.d_metric_fd(x, self.fd_step)
        n = self.dimension
        d = np.empty((n, n, n))
        for k in range(n):
            for i in range(n):
                for j in range(i, n):
                    d[k, i, j] = d[k, j, i] = self._dg_point[k][i][j](x)
        return d

    def d_metric_many(self, X):
        """Vectorized derivative oracle: (..., n, n, n), d[..., k, i, j]."""
        if self.derivative_mode == "fd":
            X = np.asarray(X, float)
            flat = X.reshape(-1, self.dimension)
            return np.array([self.d_metric_fd(p) for p in flat]).reshape(
                X.shape[:-1] + (self.dimension,) * 3)
        n = self.dimension
        X = np.asarray(X, float)
        if not hasattr(self, "_dg_grid"):
            self._dg_grid = [[[ex.compile_grid(self.derivative_exprs[k][i][j], n)
                               for j in range(n)] for i in range(n)]
                             for k in range(n)]
        d = np.empty(X.shape[:-1] + (n, n, n))
        for k in range(n):
            for i in range(n):
                for j in range(i, n):
                    v = self._dg_grid[k][i][j](X)
                    d[..., k, i, j] = v
                    d[..., k, j, i] = v
        return d

    def christoffel_many(self, X):
        """Vectorized Christoffel symbols: (..., n, n, n) with [k, i, j]
        plus the inverse metric (..., n, n)."""
        X = np.asarray(X, float)
        dg = self.d_metric_many(X)  # dg[..., k, i, j] = d_k g_ij
        ginv = np.linalg.inv(self.matrix_many(X))
        term = np.einsum("...ijl->...ijl", dg) \
            + np.einsum("...jil->...ijl", dg) \
            - np.einsum("...lij->...ijl", dg)
        gamma = 0.5 * np.einsum("...kl,...ijl->...kij", ginv, term)
        return gamma, ginv

    def d_metric_fd(self, x, step=None):
        """4th-order central finite differences of g_ij (independent oracle)."""
        h = self.fd_step if step is None else step
        n = self.dimension
        x = np.asarray(x, float)
        d = np.empty((n, n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            gp2 = self.matrix(x + 2 * h * e)
            gp1 = self.matrix(x + h * e)
            gm1 = self.matrix(x - h * e)
            gm2 = self.matrix(x - 2 * h * e)
            d[k] = (-gp2 + 8.0 * gp1 - 8.0 * gm1 + gm2) / (12.0 * h)
        return d

    # -- inner products --------------------------------------------------------

    def inner(self, x, u, v):
        return float(np.asarray(u) @ self.matrix(x) @ np.asarray(v))

    def norm(self, x, v):
        return math.sqrt(max(self.inner(x, v, v), 0.0))

    def unit(self, x, v):
        nv = self.norm(x, v)
        if nv == 0.0:
            raise GeotomoError("cannot normalize the zero vector")
        return np.asarray(v, float) / nv

    def christoffel_at(self, x, d_oracle=None):
        n = self.dimension
        dg = self.d_metric(x) if d_oracle is None else d_oracle(x)
        ginv = self.inverse(x)
        gamma = np.empty((n, n, n))
        for k in range(n):
            for i in range(n):
                for j in range(i, n):
                    s = 0.0
                    for l in range(n):
                        s += ginv[k, l] * (dg[i, j, l] + dg[j, i, l] - dg[l, i, j])
                    gamma[k, i, j] = gamma[k, j, i] = 0.5 * s
        return ChristoffelAt(np.asarray(x, float), gamma, ginv)

    # -- generated flow right-hand sides --------------------------------------

    def flow_rhs(self, jacobi_fields=0, frame_fields=0):
        """Compiled RHS for the geodesic flow, optionally extended with
        Jacobi fields (covariant-variable form) and parallel frame vectors.

        State layout: [x (n), xi (n), (J_a, K_a) per Jacobi field (2n each),
        E_b per frame vector (n each)].
        """
        key = (jacobi_fields, frame_fields)
        if key not in self._rhs_cache:
            self._rhs_cache[key] = _build_flow_rhs(self, jacobi_fields, frame_fields)
        return self._rhs_cache[key]

    def state_size(self, jacobi_fields=0, frame_fields=0):
        n = self.dimension
        return 2 * n + 2 * n * jacobi_fields + n * frame_fields

    def describe(self):
        n = self.dimension
        return {"dimension": n,
                "g": [[str(self.component_exprs[i][j]) for j in range(n)]
                      for i in range(n)],
                "derivative_mode": self.derivative_mode}


def _build_flow_rhs(metric, m_jac, m_frame):
    """Generate and (when possible) numba-compile the flow RHS source."""
    n = metric.dimension
    names = [f"x{i}_" for i in range(n)]
    lines = ["def _rhs(t, y):"]
    for i in range(n):
        lines.append(f"    x{i}_ = y[{i}]")
    lines.append(f"    g = np.empty(({n}, {n}))")
    lines.append(f"    dg = np.empty(({n}, {n}, {n}))")
    for i in range(n):
        for j in range(i, n):
            src = ex.to_python_source(metric.component_exprs[i][j], names, "math")
            lines.append(f"    g[{i}, {j}] = {src}")
            if i != j:
                lines.append(f"    g[{j}, {i}] = g[{i}, {j}]")
    for k in range(n):
        for i in range(n):
            for j in range(i, n):
                src = ex.to_python_source(metric.derivative_exprs[k][i][j], names, "math")
                lines.append(f"    dg[{k}, {i}, {j}] = {src}")
                if i != j:
                    lines.append(f"    dg[{k}, {j}, {i}] = dg[{k}, {i}, {j}]")
    lines.append("    ginv = np.linalg.inv(g)")
    lines.append(f"    gam = np.empty(({n}, {n}, {n}))")
    lines.append(f"    for k in range({n}):")
    lines.append(f"        for i in range({n}):")
    lines.append(f"            for j in range({n}):")
    lines.append("                s = 0.0")
    lines.append(f"                for l in range({n}):")
    lines.append("                    s += ginv[k, l] * (dg[i, j, l] + dg[j, i, l] - dg[l, i, j])")
    lines.append("                gam[k, i, j] = 0.5 * s")

    if m_jac > 0:
        # second derivatives of g and derivatives of Gamma for the curvature term
        lines.append(f"    ddg = np.empty(({n}, {n}, {n}, {n}))")
        for m in range(n):
            for k in range(n):
                for i in range(n):
                    for j in range(i, n):
                        e2 = ex.differentiate(metric.derivative_exprs[k][i][j], m)
                        src = ex.to_python_source(e2, names, "math")
                        lines.append(f"    ddg[{m}, {k}, {i}, {j}] = {src}")
                        if i != j:
                            lines.append(f"    ddg[{m}, {k}, {j}, {i}] = ddg[{m}, {k}, {i}, {j}]")
        lines.append(f"    dginv = np.empty(({n}, {n}, {n}))")
        lines.append(f"    for m in range({n}):")
        lines.append("        dginv[m] = -ginv @ dg[m] @ ginv")
        lines.append(f"    dgam = np.empty(({n}, {n}, {n}, {n}))")
        lines.append(f"    for m in range({n}):")
        lines.append(f"        for k in range({n}):")
        lines.append(f"            for i in range({n}):")
        lines.append(f"                for j in range({n}):")
        lines.append("                    s = 0.0")
        lines.append(f"                    for l in range({n}):")
        lines.append("                        s += dginv[m, k, l] * (dg[i, j, l] + dg[j, i, l] - dg[l, i, j])")
        lines.append("                        s += ginv[k, l] * (ddg[m, i, j, l] + ddg[m, j, i, l] - ddg[m, l, i, j])")
        lines.append("                    dgam[m, k, i, j] = 0.5 * s")

    size = metric.state_size(m_jac, m_frame)
    lines.append(f"    out = np.empty({size})")
    lines.append(f"    xi = y[{n}:{2 * n}]")
    lines.append(f"    for i in range({n}):")
    lines.append("        out[i] = xi[i]")
    lines.append(f"    for k in range({n}):")
    lines.append("        a = 0.0")
    lines.append(f"        for i in range({n}):")
    lines.append(f"            for j in range({n}):")
    lines.append("                a -= gam[k, i, j] * xi[i] * xi[j]")
    lines.append(f"        out[{n} + k] = a")

    off = 2 * n
    for a in range(m_jac):
        jo, ko = off + 2 * n * a, off + 2 * n * a + n
        lines.append(f"    J = y[{jo}:{jo + n}]")
        lines.append(f"    K = y[{ko}:{ko + n}]")
        # curvature term R(J, xi)xi
        lines.append(f"    for k in range({n}):")
        lines.append("        dj = K[k]")
        lines.append("        dk = 0.0")
        lines.append(f"        for i in range({n}):")
        lines.append(f"            for j in range({n}):")
        lines.append("                dj -= gam[k, i, j] * xi[i] * J[j]")
        lines.append("                dk -= gam[k, i, j] * xi[i] * K[j]")
        lines.append(f"        for i in range({n}):")
        lines.append(f"            for j in range({n}):")
        lines.append(f"                for l in range({n}):")
        lines.append("                    r = dgam[i, k, j, l] - dgam[j, k, i, l]")
        lines.append(f"                    for m in range({n}):")
        lines.append("                        r += gam[k, i, m] * gam[m, j, l] - gam[k, j, m] * gam[m, i, l]")
        lines.append("                    dk -= r * J[i] * xi[j] * xi[l]")
        lines.append(f"        out[{jo} + k] = dj")
        lines.append(f"        out[{ko} + k] = dk")

    foff = off + 2 * n * m_jac
    for b in range(m_frame):
        eo = foff + n * b
        lines.append(f"    E = y[{eo}:{eo + n}]")
        lines.append(f"    for k in range({n}):")
        lines.append("        de = 0.0")
        lines.append(f"        for i in range({n}):")
        lines.append(f"            for j in range({n}):")
        lines.append("                de -= gam[k, i, j] * xi[i] * E[j]")
        lines.append(f"        out[{eo} + k] = de")

    lines.append("    return out")
    src = "\n".join(lines)
    ns = {"np": np, "math": math}
    exec(src, ns)
    return _maybe_jit(ns["_rhs"], f"flow_rhs_{n}_{m_jac}_{m_frame}")


# ---------------------------------------------------------------------------
# module operations (spec surface)
# ---------------------------------------------------------------------------

def metric_at(metric, x):
    """g(x) as a symmetric positive definite matrix."""
    g = metric.matrix(x)
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError as err:
        raise NonPositiveDefiniteError(
            f"metric not positive definite at {tuple(np.asarray(x))}") from err
    return g


def christoffel(metric, x):
    """Christoffel symbols Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)."""
    metric_at(metric, x)  # PD validation, raises NonPositiveDefiniteError
    return metric.christoffel_at(x)


def _unit_normal_field(domain, metric, y):
    """Unit outward g-normal at a point near the boundary (level sets of rho)."""
    grad = domain.grad_rho(y)
    ginv = metric.inverse(y)
    up = ginv @ grad
    norm = math.sqrt(max(float(grad @ up), 0.0))
    if norm == 0.0:
        raise GeotomoError(f"grad rho vanishes near the boundary at {tuple(y)}")
    return -up / norm  # outward: toward decreasing rho


def boundary_normal(domain, metric, x):
    """Unit outward normal at a boundary point, as a (vector, covector) pair."""
    if abs(domain.rho(x)) >= domain.tol_boundary:
        raise NotOnBoundaryError(
            f"|rho(x)| = {abs(domain.rho(x)):.3e} exceeds the boundary tolerance")
    nu = _unit_normal_field(domain, metric, x)
    return nu, metric.matrix(x) @ nu


def second_fundamental_form(domain, metric, x, xi, fd_step=None):
    """<nabla_xi nu, xi> at a boundary point for xi tangent to the boundary.

    Positive for all tangent xi means the boundary is strictly convex at x.
    """
    if abs(domain.rho(x)) >= domain.tol_boundary:
        raise NotOnBoundaryError(
            f"|rho(x)| = {abs(domain.rho(x)):.3e} exceeds the boundary tolerance")
    xi = np.asarray(xi, float)
    nu, nu_cov = boundary_normal(domain, metric, x)
    xnorm = metric.norm(x, xi)
    if xnorm == 0.0:
        return 0.0
    if abs(float(nu_cov @ xi)) > 1e-6 * xnorm:
        raise NotTangentError("xi is not tangent to the boundary")
    n = domain.dimension
    h = fd_step if fd_step is not None else 1e-5 * domain.diameter
    x = np.asarray(x, float)
    dnu = np.empty((n, n))  # dnu[i, k] = d_i nu^k
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        f2 = _unit_normal_field(domain, metric, x + 2 * h * e)
        f1 = _unit_normal_field(domain, metric, x + h * e)
        b1 = _unit_normal_field(domain, metric, x - h * e)
        b2 = _unit_normal_field(domain, metric, x - 2 * h * e)
        dnu[i] = (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * h)
    gamma = metric.christoffel_at(x).gamma
    cov = np.einsum("i,ik->k", xi, dnu) + np.einsum("kij,i,j->k", gamma, xi, nu)
    return float(cov @ metric.matrix(x) @ xi)
