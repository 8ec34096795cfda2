"""Geodesic flow: integration with boundary exit, two-point connection,
Jacobi fields with conjugate-point detection, and the simplicity report.

The flow generator is G = xi^i d_{x^i} - Gamma^k_ij xi^i xi^j d_{xi^k};
trajectories are integrated with an adaptive high-order Runge-Kutta scheme
(DOP853, rtol 1e-10 / atol 1e-12 by default) with dense output, and exits
are located by event root-finding on rho composed with the trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import (GeotomoError, NoConvergenceError, NoExitError,
                     StepFailureError)

__all__ = [
    "PhasePoint", "Geodesic", "IntegratorOptions", "SimplicityReport",
    "flow_field", "shoot", "maximal_geodesic", "connect", "connect_points",
    "jacobi_conjugate_scan", "check_simple",
]


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, float))
        object.__setattr__(self, "xi", np.asarray(self.xi, float))
        if not np.any(self.xi):
            raise GeotomoError("phase point needs a nonzero direction")


@dataclass(frozen=True)
class IntegratorOptions:
    rtol: float = 1e-10
    atol: float = 1e-12
    max_length_factor: float = 40.0  # arc-length budget in domain diameters
    # step cap so boundary crossings cannot be overflown within one step
    # (flat metrics otherwise take a single step across the whole domain)
    max_step_factor: float = 0.2

    def max_step(self, domain):
        return self.max_step_factor * domain.diameter


class Geodesic:
    """A solved geodesic on [t_min, t_max] with dense output.

    For unit-speed launches t is arc length.  ``m_crossings`` holds the
    parameters where the trajectory crosses the boundary of M (useful when
    the geodesic itself runs between points of the enlarged manifold and
    the integrand is extended by zero outside M).
    """

    def __init__(self, dimension, sol, t_min, t_max, unit_speed,
                 m_crossings=(), stop="M"):
        self.dimension = dimension
        self._sol = sol
        self.t_min = float(t_min)
        self.t_max = float(t_max)
        self.unit_speed = unit_speed
        self.m_crossings = tuple(sorted(float(t) for t in m_crossings
                                        if t_min - 1e-12 <= t <= t_max + 1e-12))
        self.stop = stop

    # -- dense access --------------------------------------------------------

    def phase(self, t):
        y = self._sol(t)
        n = self.dimension
        if np.ndim(t) == 0:
            return y[:n], y[n:2 * n]
        return y[:n].T, y[n:2 * n].T

    def point(self, t):
        return self.phase(t)[0]

    def velocity(self, t):
        return self.phase(t)[1]

    @property
    def length(self):
        return self.t_max - self.t_min

    @property
    def start(self):
        return self.point(self.t_min)

    @property
    def end(self):
        return self.point(self.t_max)

    @property
    def start_velocity(self):
        return self.velocity(self.t_min)

    @property
    def end_velocity(self):
        return self.velocity(self.t_max)

    def samples(self, count=None):
        if count is None:
            count = max(64, int(32 * abs(self.length)) + 2)
        t = np.linspace(self.t_min, self.t_max, count)
        x, v = self.phase(t)
        return t, x, v

    @property
    def is_point(self):
        return self.length <= 0.0

    @staticmethod
    def point_geodesic(x):
        """Degenerate gamma_[x,x]; represents a contracted family member."""
        x = np.asarray(x, float)

        def sol(t):
            t = np.asarray(t, float)
            y = np.concatenate([x, np.zeros_like(x)])
            if t.ndim == 0:
                return y
            return np.repeat(y[:, None], t.size, axis=1)

        g = Geodesic(x.size, sol, 0.0, 0.0, True)
        return g


def flow_field(metric, p):
    """Phase velocity (xi, -Gamma^k_ij xi^i xi^j) of the geodesic flow at p."""
    y = np.concatenate([p.x, p.xi])
    out = metric.flow_rhs()(0.0, y)
    n = metric.dimension
    return out[:n], out[n:]


def _stop_level(domain, stop):
    if stop == "M":
        return 0.0
    if stop in ("Mtilde", "M~"):
        return -domain.extension_margin
    if stop == "Mhalf":
        return -0.5 * domain.extension_margin
    raise GeotomoError(f"unknown stop surface '{stop}'")


def shoot(metric, domain, p, stop="M", direction="forward", unit_speed=True,
          options=IntegratorOptions(), extra_state=None, rhs=None):
    """Integrate from a phase point until rho crosses the stop level.

    Returns a Geodesic on [0, l] (forward) or [tau_-, 0] (backward, with
    tau_- < 0 the exit parameter).  Crossings of rho = 0 encountered on the
    way are recorded.  Raises NoExitError when the arc-length budget is
    exhausted first (trapped geodesic / non-simple geometry).
    """
    n = metric.dimension
    xi = np.asarray(p.xi, float)
    if unit_speed:
        xi = metric.unit(p.x, xi)
    y0 = np.concatenate([np.asarray(p.x, float), xi])
    if extra_state is not None:
        y0 = np.concatenate([y0, np.asarray(extra_state, float)])
        if rhs is None:
            raise GeotomoError("extra_state requires a matching rhs")
    if rhs is None:
        rhs = metric.flow_rhs()

    level = _stop_level(domain, stop)
    speed = metric.norm(p.x, xi)
    t_max = options.max_length_factor * domain.diameter / max(speed, 1e-12)
    sign = 1.0 if direction == "forward" else -1.0

    def stop_event(t, y):
        return domain.rho(y[:n]) - level

    stop_event.terminal = True
    stop_event.direction = -1.0

    def m_cross(t, y):
        return domain.rho(y[:n])

    m_cross.terminal = False

    events = [stop_event] + ([m_cross] if level != 0.0 else [])
    sol = solve_ivp(rhs, (0.0, sign * t_max), y0, method="DOP853",
                    rtol=options.rtol, atol=options.atol,
                    max_step=options.max_step(domain) / max(speed, 1e-12),
                    dense_output=True, events=events)
    if sol.status == -1:
        raise StepFailureError(f"integrator breakdown: {sol.message}")
    if sol.status != 1 or sol.t_events[0].size == 0:
        raise NoExitError(
            f"no boundary exit within arc length {t_max:.3g}; "
            "geometry may be non-simple")
    t_exit = float(sol.t_events[0][0])
    # polish the exit parameter on the dense output
    f = lambda t: domain.rho(sol.sol(t)[:n]) - level  # noqa: E731
    dt = 1e-7 * max(abs(t_exit), 1.0)
    a, b = t_exit - dt, t_exit + dt
    try:
        if f(a) * f(b) < 0:
            t_exit = brentq(f, a, b, xtol=1e-15, rtol=8.9e-16)
    except ValueError:
        pass

    crossings = sol.t_events[1] if level != 0.0 else []
    if direction == "forward":
        geod = Geodesic(n, sol.sol, 0.0, t_exit, unit_speed, crossings, stop)
    else:
        geod = Geodesic(n, sol.sol, t_exit, 0.0, unit_speed, crossings, stop)
    return geod


def maximal_geodesic(metric, domain, x, xi, stop="M", unit_speed=True,
                     options=IntegratorOptions()):
    """Maximal geodesic through (x, xi) between stop-surface exits.

    Returns (geodesic, t_of_x): the geodesic runs forward from the backward
    exit, and x sits at parameter t_of_x.
    """
    back = shoot(metric, domain, PhasePoint(x, xi), stop, "backward",
                 unit_speed, options)
    entry, v_entry = back.phase(back.t_min)
    fwd = shoot(metric, domain, PhasePoint(entry, v_entry), stop, "forward",
                unit_speed=False, options=options)
    return fwd, -back.t_min


def _euclid_dir(theta):
    return np.array([math.cos(theta), math.sin(theta)])


def _bracket_root(f, x0, step=0.05, max_expand=40, window=math.pi):
    """Symmetric outward scan returning the nearest sign-change bracket.

    Scans both sides of x0 with growing steps and brackets between
    consecutive evaluations, so the root closest to the initial guess wins
    (direction shooting has a spurious antipodal zero a half-turn away).
    """
    m0 = f(x0)
    if m0 == 0.0:
        m0 = 1e-300
    last_lo = last_hi = (x0, m0)
    d = step
    for _ in range(max_expand):
        xl = last_lo[0] - d
        ml = f(xl)
        if ml * last_lo[1] < 0:
            return xl, last_lo[0]
        last_lo = (xl, ml)
        xh = last_hi[0] + d
        mh = f(xh)
        if mh * last_hi[1] < 0:
            return last_hi[0], xh
        last_hi = (xh, mh)
        d = min(d * 1.5, 0.4)
        if (x0 - last_lo[0]) > window and (last_hi[0] - x0) > window:
            break
    raise NoConvergenceError("could not bracket the shooting direction")


def _wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def connect(metric, domain, x, y, stop="M", options=IntegratorOptions(),
            angle_tol=1e-13, max_expand=40):
    """Two-point geodesic gamma_[x, y] between boundary points (n = 2).

    Shooting on the launch angle with a bracketed root-find on the
    boundary-exit mismatch; on simple manifolds the exit map is monotone in
    the launch angle, so a sign-changing bracket around the Euclidean guess
    exists and the root is unique.
    """
    if metric.dimension != 2:
        raise GeotomoError("connect currently supports n = 2")
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if np.linalg.norm(y - x) < domain.tol_boundary * 10:
        return Geodesic.point_geodesic(x)
    phi_target = domain.boundary_angle(y)

    def exit_mismatch(theta):
        g = shoot(metric, domain, PhasePoint(x, _euclid_dir(theta)), stop,
                  options=options)
        return _wrap_angle(domain.boundary_angle(g.end) - phi_target), g

    theta0 = math.atan2(y[1] - x[1], y[0] - x[0])
    m0, g0 = exit_mismatch(theta0)
    if abs(m0) < 1e-12:
        return g0
    lo, hi = _bracket_root(lambda th: exit_mismatch(th)[0], theta0,
                           step=0.05, max_expand=max_expand)
    theta_star = brentq(lambda th: exit_mismatch(th)[0], lo, hi,
                        xtol=angle_tol, rtol=8.9e-16, maxiter=200)
    _, geod = exit_mismatch(theta_star)
    if np.linalg.norm(geod.end - y) > 1e-7 * domain.diameter:
        raise NoConvergenceError(
            f"endpoint mismatch {np.linalg.norm(geod.end - y):.3e} "
            "after angle root-finding")
    return geod


def connect_points(metric, domain, x, y, options=IntegratorOptions(),
                   angle_tol=1e-13):
    """Geodesic segment between two interior points (n = 2).

    Root-finds the launch angle on the signed lateral miss of y relative to
    the ray from x; returns (segment geodesic from x to y, full maximal
    geodesic through both, parameter of y on the segment).
    """
    if metric.dimension != 2:
        raise GeotomoError("connect_points currently supports n = 2")
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if np.linalg.norm(y - x) < 1e-14:
        g = Geodesic.point_geodesic(x)
        return g, g, 0.0

    def signed_miss(theta):
        g = shoot(metric, domain, PhasePoint(x, _euclid_dir(theta)), "Mtilde",
                  options=options)
        t, pts, vel = g.samples(max(96, int(48 * g.length) + 2))
        d2 = ((pts - y) ** 2).sum(axis=1)
        t_foot = _refine_parameter(g, y, t[int(d2.argmin())])
        p, v = g.phase(t_foot)
        # at the perpendicular foot the cross product is the signed miss
        cross = v[0] * (y[1] - p[1]) - v[1] * (y[0] - p[0])
        return cross, g, t_foot

    theta0 = math.atan2(y[1] - x[1], y[0] - x[0])
    lo, hi = _bracket_root(lambda th: signed_miss(th)[0], theta0, step=0.05)
    theta_star = brentq(lambda th: signed_miss(th)[0], lo, hi,
                        xtol=angle_tol, rtol=8.9e-16)
    _, geod, t_near = signed_miss(theta_star)
    # parameter of y on the ray via projection on the local velocity
    t_y = _refine_parameter(geod, y, t_near)
    if np.linalg.norm(geod.point(t_y) - y) > 1e-8 * domain.diameter:
        raise NoConvergenceError("interior two-point solve missed the target")
    seg = Geodesic(metric.dimension, geod._sol, 0.0, t_y, geod.unit_speed,
                   geod.m_crossings, geod.stop)
    return seg, geod, t_y


def _refine_parameter(geod, y, t_guess):
    for _ in range(60):
        p, v = geod.phase(t_guess)
        dt = float(v @ (y - p)) / max(float(v @ v), 1e-300)
        t_guess = min(max(t_guess + dt, geod.t_min), geod.t_max)
        if abs(dt) < 1e-15:
            break
    return t_guess


# ---------------------------------------------------------------------------
# Jacobi fields and conjugate points
# ---------------------------------------------------------------------------

def _orthonormal_complement(metric, x, u):
    """g-orthonormal basis of the complement of unit vector u."""
    n = metric.dimension
    g = metric.matrix(x)
    basis = [u]
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        w = e.copy()
        for b in basis:
            w = w - (b @ g @ w) * b
        nw = math.sqrt(max(float(w @ g @ w), 0.0))
        if nw > 1e-10:
            basis.append(w / nw)
        if len(basis) == n:
            break
    if len(basis) < n:
        raise GeotomoError("failed to build an orthonormal frame")
    return basis[1:]


def jacobi_conjugate_scan(metric, geod, samples=None, det_floor=1e-14):
    """First conjugate parameter along a unit-speed geodesic, or None.

    Integrates J'' + R(J, v)v = 0 for a basis of normal initial directions
    (J(0) = 0, DJ(0) = E_a) together with a parallel orthonormal normal
    frame, and finds the first sign change of det <J_a, E_b>.
    """
    n = metric.dimension
    m = n - 1
    x0 = geod.point(geod.t_min)
    v0 = metric.unit(x0, geod.velocity(geod.t_min))
    frame = _orthonormal_complement(metric, x0, v0)

    extra = []
    for a in range(m):
        extra.extend([np.zeros(n), frame[a]])  # J_a = 0, K_a = E_a
    for b in range(m):
        extra.append(frame[b])
    y0 = np.concatenate([x0, v0] + extra)

    rhs = metric.flow_rhs(jacobi_fields=m, frame_fields=m)
    L = geod.length
    sol = solve_ivp(rhs, (0.0, L), y0, method="DOP853", rtol=1e-10,
                    atol=1e-12, max_step=max(L / 16.0, 1e-3),
                    dense_output=True)
    if sol.status != 0:
        raise StepFailureError(f"Jacobi integration failed: {sol.message}")

    def normal_det(t):
        y = sol.sol(t)
        x = y[:n]
        g = metric.matrix(x)
        S = np.empty((m, m))
        for a in range(m):
            J = y[2 * n + 2 * n * a: 3 * n + 2 * n * a]
            for b in range(m):
                E = y[2 * n + 2 * n * m + n * b: 2 * n + 2 * n * m + n * (b + 1)]
                S[b, a] = float(J @ g @ E)
        return float(np.linalg.det(S))

    if samples is None:
        samples = max(200, int(80 * L) + 2)
    ts = np.linspace(0.0, L, samples)
    dets = np.array([normal_det(t) for t in ts])
    # det ~ t^(n-1) > 0 initially; scan once it is resolvably positive
    start = 1
    while start < samples and dets[start] <= det_floor:
        start += 1
    for k in range(start, samples - 1):
        if dets[k] > 0.0 and dets[k + 1] <= 0.0:
            t_conj = brentq(normal_det, ts[k], ts[k + 1], xtol=1e-8)
            return float(t_conj)
    return None


# ---------------------------------------------------------------------------
# simplicity report
# ---------------------------------------------------------------------------

@dataclass
class SimplicityReport:
    min_convexity: float
    conjugate_found: bool
    first_conjugate_t: float | None
    fold_detected: bool
    verdict: str
    details: dict = field(default_factory=dict)

    def as_dict(self):
        return {"min_convexity": self.min_convexity,
                "conjugate_found": self.conjugate_found,
                "first_conjugate_t": self.first_conjugate_t,
                "fold_detected": self.fold_detected,
                "verdict": self.verdict,
                **self.details}


def check_simple(metric, domain, boundary_samples=48, scan_points=8,
                 scan_fan=5, fold_points=5, fold_fan=48,
                 options=IntegratorOptions()):
    """Sampled verification of the two simplicity conditions.

    (a) strict boundary convexity: min of the second fundamental form over
        a boundary/tangent grid; (b) absence of conjugate points over a
        fan of chords; (c) local injectivity of the exponential map via
        monotonicity of the boundary-exit angle.  Violations are detected,
        not certified absent.
    """
    from .metric import boundary_normal, second_fundamental_form

    if metric.dimension != 2:
        raise GeotomoError("check_simple currently supports n = 2")

    # (a) boundary convexity
    min_sff = math.inf
    for a in np.linspace(0.0, 2.0 * math.pi, boundary_samples, endpoint=False):
        p = domain.boundary_point(a)
        grad = domain.grad_rho(p)
        tang = np.array([-grad[1], grad[0]])
        tang = metric.unit(p, tang)
        val = second_fundamental_form(domain, metric, p, tang)
        min_sff = min(min_sff, val)
        boundary_normal(domain, metric, p)  # raises if the band is ill-posed

    # (b) conjugate points along sampled chords; trapped launches (no exit
    # within budget) are themselves evidence against simplicity
    first_conj = None
    trapped = False
    for a in np.linspace(0.0, math.pi, scan_points, endpoint=False):
        p = domain.boundary_point(a)
        grad = domain.grad_rho(p)
        inward = metric.unit(p, grad)  # toward increasing rho
        tang = metric.unit(p, np.array([-grad[1], grad[0]]))
        for s in np.linspace(-0.8, 0.8, scan_fan):
            direction = inward + s * tang
            try:
                g = shoot(metric, domain, PhasePoint(p, direction), "M",
                          options=options)
            except NoExitError:
                trapped = True
                continue
            t_c = jacobi_conjugate_scan(metric, g)
            if t_c is not None and (first_conj is None or t_c < first_conj):
                first_conj = t_c

    # (c) exponential-map fold detection via exit-angle monotonicity
    fold = False
    c = domain.center
    seeds = [c]
    for a in np.linspace(0.0, 2.0 * math.pi, fold_points - 1, endpoint=False):
        seeds.append(c + 0.45 * (domain.boundary_point(a) - c))
    for x in seeds:
        phis = []
        for th in np.linspace(0.0, 2.0 * math.pi, fold_fan, endpoint=False):
            try:
                g = shoot(metric, domain, PhasePoint(x, _euclid_dir(th)), "M",
                          options=options)
            except NoExitError:
                trapped = True
                continue
            phis.append(domain.boundary_angle(g.end))
        if len(phis) < fold_fan:
            continue
        d = np.array([_wrap_angle(phis[(k + 1) % fold_fan] - phis[k])
                      for k in range(fold_fan)])
        if not (np.all(d > 0) or np.all(d < 0)):
            fold = True
            break

    conj_found = first_conj is not None
    verdict = "simple" if (min_sff > 0 and not conj_found and not fold
                           and not trapped) else "non-simple"
    return SimplicityReport(
        min_convexity=float(min_sff),
        conjugate_found=conj_found,
        first_conjugate_t=None if first_conj is None else float(first_conj),
        fold_detected=fold,
        verdict=verdict,
        details={"boundary_samples": boundary_samples,
                 "conjugate_scan_geodesics": scan_points * scan_fan,
                 "fold_seed_points": len(seeds),
                 "trapped_geodesic": trapped})
