"""Semi-geodesic charts around a base point outside M.

The chart sends (x', x^n) to exp_{x0}(x^n xi(x')) where xi(x') sweeps unit
directions around a tube axis; x^n is then the distance to x0 and the chart
metric satisfies g_nn = 1, g_{n,alpha} = 0 (so Gamma^i_nn = Gamma^n_ni = 0),
with the tube boundary faces a(x') <= x^n <= b(x') cut out of rho = 0.

Each chart line integrates the geodesic together with its Jacobi field
J = dPsi/dx', so the chart Jacobian, the tangential metric block
g~_11 = g(J, J), and the extraction coefficient Gamma~^1_{n1} =
g(DJ, J)/g(J, J) come from the flow itself rather than from cross-line
differencing.  Charts are built for n = 2 (scalar x').
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline, CubicSpline
from scipy.spatial import cKDTree

from .errors import ChartDegenerateError, GeotomoError, StepFailureError
from .geodesics import _orthonormal_complement

__all__ = ["SemiGeodesicChart", "ChartLine", "build_semi_geodesic_chart"]


@dataclass
class ChartLine:
    """Resampled radial geodesic with its Jacobi field.

    Node arrays are segmented with breakpoints exactly at the faces a and b,
    so integrands that kink there (extension by zero) stay piecewise smooth
    on every quadrature panel.
    """
    xp: float
    t: np.ndarray          # node parameters (distance to x0)
    x: np.ndarray          # (N, n) points
    xi: np.ndarray         # (N, n) radial velocities (unit)
    J: np.ndarray          # (N, n) Jacobi field d Psi / d x'
    DJ: np.ndarray         # (N, n) covariant derivative of J along the line
    a: float               # entry face parameter (rho = 0, going in)
    b: float               # exit face parameter (rho = 0, going out)
    t_enter: float         # entry into the enlarged manifold (rho = -eps)
    t_top: float           # last stored parameter (past the M~ exit)
    seg_edges: tuple       # node indices starting each smooth segment
    d_state: np.ndarray = None    # (N, 8) flow RHS at the nodes (exact slopes)
    gJJ: np.ndarray = None        # g(J, J) at nodes
    gDJJ: np.ndarray = None       # g(DJ, J) at nodes
    d_gJJ: np.ndarray = None      # exact d/dt of g(J, J) at nodes
    d_gDJJ: np.ndarray = None     # exact d/dt of g(DJ, J) at nodes
    _splines: dict = None

    _SLOPES = {"x": (0, 2), "xi": (2, 4), "J": (4, 6), "DJ": (6, 8)}

    def spline(self, name):
        """Cubic Hermite interpolant of a node array with exact slopes."""
        if self._splines is None:
            self._splines = {}
        sp = self._splines.get(name)
        if sp is None:
            if name in self._SLOPES:
                lo, hi = self._SLOPES[name]
                sp = CubicHermiteSpline(self.t, getattr(self, name),
                                        self.d_state[:, lo:hi],
                                        extrapolate=True)
            elif name == "gJJ":
                sp = CubicHermiteSpline(self.t, self.gJJ, self.d_gJJ,
                                        extrapolate=True)
            elif name == "gDJJ":
                sp = CubicHermiteSpline(self.t, self.gDJJ, self.d_gDJJ,
                                        extrapolate=True)
            elif name == "gamma_n":
                sp = CubicSpline(self.t, self.gamma_n, extrapolate=True)
            else:
                raise GeotomoError(f"no line quantity named '{name}'")
            self._splines[name] = sp
        return sp

    @property
    def gamma_n(self):
        """Gamma~^1_{n1} = g(DJ, J) / g(J, J) at the nodes."""
        return self.gDJJ / self.gJJ

    def basis_at(self, t):
        """Chart Jacobian columns [J, xi] at parameter t (2x2, n = 2)."""
        J = self.spline("J")(t)
        xi = self.spline("xi")(t)
        return np.stack([J, xi], axis=-1)


class SemiGeodesicChart:
    def __init__(self, metric, domain, x0, axis, eps_tube=0.15, n_lines=41,
                 resample=160):
        if metric.dimension != 2:
            raise GeotomoError("semi-geodesic charts are built for n = 2")
        if domain.in_M(x0):
            raise GeotomoError("the chart base point must lie outside M")
        self.metric = metric
        self.domain = domain
        self.x0 = np.asarray(x0, float)
        axis = metric.unit(self.x0, np.asarray(axis, float))
        self.axis = axis
        self.e_perp = _orthonormal_complement(metric, self.x0, axis)[0]
        self.eps_tube = float(eps_tube)
        self.n_lines = int(n_lines)
        self.resample = int(resample)
        self.xp_nodes = np.linspace(-self.eps_tube, self.eps_tube, self.n_lines)
        self.hx = self.xp_nodes[1] - self.xp_nodes[0]
        self.lines = []
        self._tree = None
        self._build()

    # -- directions ------------------------------------------------------------

    def direction(self, xp):
        return math.sin(xp) * self.e_perp + math.cos(xp) * self.axis

    def d_direction(self, xp):
        return math.cos(xp) * self.e_perp - math.sin(xp) * self.axis

    # -- construction -----------------------------------------------------------

    def _integrate_line(self, xp, t_end=None):
        """Radial geodesic + Jacobi field, stopped just past the M~ exit
        (level rho = -1.1 eps, down-crossing), recording face crossings."""
        rhs = self.metric.flow_rhs(jacobi_fields=1)
        y0 = np.concatenate([self.x0, self.direction(xp),
                             np.zeros(2), self.d_direction(xp)])
        dom = self.domain
        eps = dom.extension_margin
        if t_end is None:
            t_end = 4.0 * dom.diameter + 2.0 * float(
                np.linalg.norm(self.x0 - dom.center))

        def ev_m(t, y):
            return dom.rho(y[:2])

        ev_m.terminal = False

        def ev_mt(t, y):
            return dom.rho(y[:2]) + eps

        ev_mt.terminal = False

        def ev_stop(t, y):
            return dom.rho(y[:2]) + 1.1 * eps

        ev_stop.terminal = True
        ev_stop.direction = -1.0

        sol = solve_ivp(rhs, (0.0, t_end), y0, method="DOP853", rtol=1e-10,
                        atol=1e-12, max_step=0.1 * dom.diameter,
                        dense_output=True, events=[ev_m, ev_mt, ev_stop])
        if sol.status == -1:
            raise StepFailureError(f"chart line failed: {sol.message}")
        return sol

    def _build(self):
        for xp in self.xp_nodes:
            sol = self._integrate_line(xp)
            m_cross = sol.t_events[0]
            mt_cross = sol.t_events[1]
            if m_cross.size != 2:
                raise ChartDegenerateError(
                    f"chart line x'={xp:.4f} crosses the boundary "
                    f"{m_cross.size} times (expected 2); shrink the tube")
            if sol.t_events[2].size == 0:
                raise ChartDegenerateError(
                    f"chart line x'={xp:.4f} did not leave the enlarged "
                    "manifold within the integration budget")
            a, b = float(m_cross[0]), float(m_cross[1])
            t_enter = float(mt_cross[0])
            t_stop = float(sol.t_events[2][0])
            dt = (t_stop - a) / self.resample
            t_top = min(float(mt_cross[-1]) + 2.0 * dt, t_stop)
            s0 = a - 3.0 * dt
            edges = [s0, a, b, t_top]
            nodes = []
            seg_starts = []
            for k in range(3):
                lo, hi = edges[k], edges[k + 1]
                count = max(9, int(math.ceil((hi - lo) / dt)) + 1)
                seg = np.linspace(lo, hi, count)
                seg_starts.append(len(nodes))
                nodes.extend(seg if k == 2 else seg[:-1])
            t_nodes = np.asarray(nodes)
            y = sol.sol(t_nodes)
            x = y[0:2].T
            xi = y[2:4].T
            J = y[4:6].T
            DJ = y[6:8].T
            rhs = self.metric.flow_rhs(jacobi_fields=1)
            d_state = np.empty((t_nodes.size, 8))
            for k in range(t_nodes.size):
                d_state[k] = rhs(t_nodes[k], y[:, k])
            g = self.metric.matrix_many(x)
            dg = np.empty((t_nodes.size, 2, 2, 2))  # dg[k, m, i, j] = d_m g_ij
            for k in range(t_nodes.size):
                dg[k] = self.metric.d_metric(x[k])
            dJdt = d_state[:, 4:6]
            dDJdt = d_state[:, 6:8]
            gJJ = np.einsum("kij,ki,kj->k", g, J, J)
            gDJJ = np.einsum("kij,ki,kj->k", g, DJ, J)
            d_gJJ = np.einsum("kmij,km,ki,kj->k", dg, xi, J, J) \
                + 2.0 * np.einsum("kij,ki,kj->k", g, dJdt, J)
            d_gDJJ = np.einsum("kmij,km,ki,kj->k", dg, xi, DJ, J) \
                + np.einsum("kij,ki,kj->k", g, dDJdt, J) \
                + np.einsum("kij,ki,kj->k", g, DJ, dJdt)
            line = ChartLine(
                xp=float(xp), t=t_nodes, x=x, xi=xi, J=J, DJ=DJ,
                a=a, b=b, t_enter=t_enter, t_top=t_top,
                seg_edges=tuple(seg_starts), d_state=d_state,
                gJJ=gJJ, gDJJ=gDJJ, d_gJJ=d_gJJ, d_gDJJ=d_gDJJ)
            if np.any(line.gJJ[2:] <= 0.0):
                raise ChartDegenerateError(
                    f"radial family folds on line x'={xp:.4f}")
            self.lines.append(line)
        self._dt = float(np.mean([ln.t[1] - ln.t[0] for ln in self.lines]))

        a_vals = np.array([ln.a for ln in self.lines])
        b_vals = np.array([ln.b for ln in self.lines])
        self.a_fit = np.polynomial.Polynomial.fit(self.xp_nodes, a_vals, 6)
        self.b_fit = np.polynomial.Polynomial.fit(self.xp_nodes, b_vals, 6)
        self.a_fit_residual = float(np.abs(self.a_fit(self.xp_nodes) - a_vals).max())
        self.b_fit_residual = float(np.abs(self.b_fit(self.xp_nodes) - b_vals).max())

    # -- maps ---------------------------------------------------------------------

    def line(self, j):
        return self.lines[j]

    def point(self, xp, t):
        """Ambient point of chart coordinates (x', x^n); fresh line solve
        off the line grid, interpolated along the stored line otherwise."""
        j = self._node_index(xp)
        if j is not None:
            return self.lines[j].spline("x")(t)
        sol = self._integrate_line(xp)
        return sol.sol(t)[0:2]

    def _node_index(self, xp):
        k = int(round((xp - self.xp_nodes[0]) / self.hx))
        if 0 <= k < self.n_lines and abs(self.xp_nodes[k] - xp) < 1e-12:
            return k
        return None

    def to_chart(self, p, seed=None, tol=1e-12, max_iter=12):
        """Invert the chart map at an ambient point by Newton iteration.

        Each iteration integrates one radial line at the current x' and uses
        the exact Jacobian columns [J, xi].  Seeded from the nearest stored
        node unless given.
        """
        p = np.asarray(p, float)
        if seed is None:
            if self._tree is None:
                pts = np.concatenate([ln.x for ln in self.lines])
                self._meta = np.concatenate(
                    [np.stack([np.full(ln.t.size, ln.xp), ln.t], axis=1)
                     for ln in self.lines])
                self._tree = cKDTree(pts)
            _, idx = self._tree.query(p)
            xp, t = self._meta[idx]
        else:
            xp, t = seed
        for _ in range(max_iter):
            sol = self._integrate_line(xp)
            y = sol.sol(t)
            x, xi, J = y[0:2], y[2:4], y[4:6]
            r = p - x
            if float(r @ r) < tol * tol:
                return float(xp), float(t)
            M = np.stack([J, xi], axis=-1)
            try:
                step = np.linalg.solve(M, r)
            except np.linalg.LinAlgError as err:
                raise ChartDegenerateError("singular chart Jacobian during "
                                           "inversion") from err
            lim = 4.0 * self.hx
            step[0] = min(max(step[0], -lim), lim)
            xp += step[0]
            t += step[1]
        raise GeotomoError(f"chart inversion did not converge at {tuple(p)}")

    def covector_to_ambient(self, j, t, v_chart):
        """Chart covector (v_{x'}, v_n) -> ambient covector components."""
        M = self.lines[j].basis_at(t)
        return np.linalg.solve(M.T, np.asarray(v_chart, float))

    # -- chart metric and its residuals ------------------------------------------

    def metric_in_chart(self, xp, t):
        """Pullback metric components (g~_11, g~_1n, g~_nn) at (x', x^n),
        interpolated across the stored lines."""
        g11 = self._cross_interp("gJJ", t)(xp)
        g1n = self._cross_interp_pair(t)(xp)
        gnn = self._cross_interp_gnn(t)(xp)
        return g11, g1n, gnn

    def _line_values(self, name, t):
        return np.array([ln.spline(name)(t) for ln in self.lines])

    def _cross_interp(self, name, t):
        return CubicSpline(self.xp_nodes, self._line_values(name, t))

    def _cross_interp_pair(self, t):
        vals = []
        for ln in self.lines:
            x = ln.spline("x")(t)
            xi = ln.spline("xi")(t)
            J = ln.spline("J")(t)
            vals.append(float(xi @ self.metric.matrix(x) @ J))
        return CubicSpline(self.xp_nodes, vals)

    def _cross_interp_gnn(self, t):
        vals = []
        for ln in self.lines:
            x = ln.spline("x")(t)
            xi = ln.spline("xi")(t)
            vals.append(float(xi @ self.metric.matrix(x) @ xi))
        return CubicSpline(self.xp_nodes, vals)

    def validate(self, samples=200, seed=0):
        """Residuals of the defining chart identities at random tube points:
        g~_nn = 1, g~_1n = 0, Gamma~^i_nn = Gamma~^n_ni = 0, and the face
        polynomial-fit residuals."""
        rng = np.random.default_rng(seed)
        r_gnn = r_g1n = r_gamma = 0.0
        margin = 2
        for _ in range(samples):
            j = rng.integers(margin, self.n_lines - margin)
            ln = self.lines[j]
            t = rng.uniform(ln.a, ln.b)
            xp = ln.xp
            x = ln.spline("x")(t)
            xi = ln.spline("xi")(t)
            J = ln.spline("J")(t)
            g = self.metric.matrix(x)
            gnn = float(xi @ g @ xi)
            g1n = float(xi @ g @ J)
            g11 = float(J @ g @ J)
            r_gnn = max(r_gnn, abs(gnn - 1.0))
            r_g1n = max(r_g1n, abs(g1n))
            # Gamma~^1_nn = 1/2 g~^11 (2 d_n g~_1n - d_1 g~_nn)
            # Gamma~^n_n1 = 1/2 d_1 g~_nn ; Gamma~^n_nn = 1/2 d_n g~_nn
            h = 4.0 * self._dt
            dn_g1n = (self._pair_at(j, t + h) - self._pair_at(j, t - h)) / (2 * h)
            d1_gnn = float(self._cross_interp_gnn(t)(xp, 1))
            dn_gnn = (self._gnn_at(j, t + h) - self._gnn_at(j, t - h)) / (2 * h)
            gam_1nn = 0.5 / g11 * (2.0 * dn_g1n - d1_gnn)
            gam_nn1 = 0.5 * d1_gnn
            gam_nnn = 0.5 * dn_gnn
            r_gamma = max(r_gamma, abs(gam_1nn), abs(gam_nn1), abs(gam_nnn))
        return {"max_abs_gnn_minus_1": r_gnn,
                "max_abs_g1n": r_g1n,
                "max_abs_gamma_nn": r_gamma,
                "a_fit_residual": self.a_fit_residual,
                "b_fit_residual": self.b_fit_residual}

    def _pair_at(self, j, t):
        ln = self.lines[j]
        x = ln.spline("x")(t)
        return float(ln.spline("xi")(t) @ self.metric.matrix(x) @ ln.spline("J")(t))

    def _gnn_at(self, j, t):
        ln = self.lines[j]
        x = ln.spline("x")(t)
        xi = ln.spline("xi")(t)
        return float(xi @ self.metric.matrix(x) @ xi)


def build_semi_geodesic_chart(metric, domain, x0, axis_point=None, axis=None,
                              eps_tube=0.15, n_lines=41, resample=160):
    """Chart with base x0 outside M and axis aimed at ``axis_point`` (or
    along the explicit ``axis`` vector)."""
    x0 = np.asarray(x0, float)
    if axis is None:
        if axis_point is None:
            raise GeotomoError("give either axis_point or axis")
        axis = np.asarray(axis_point, float) - x0
    return SemiGeodesicChart(metric, domain, x0, axis, eps_tube=eps_tube,
                             n_lines=n_lines, resample=resample)
