"""Symmetric tensor fields of rank 0/1/2 with extension-by-zero semantics.

A field is closed-form (expression components), callable (arbitrary Python
evaluation, derivatives by 4th-order differences unless supplied), or
grid-sampled (tensor-product cubic splines, n = 2).  Rank-2 fields store
only the upper triangle, so symmetry is exact by construction.  Fields
marked ``extended_by_zero`` evaluate to exactly 0 wherever rho <= 0.
"""

from __future__ import annotations

import numpy as np

from . import expressions as ex
from .errors import GeotomoError, GridBoundaryError

__all__ = ["TensorField", "sym_derivative", "divergence", "metric_as_field"]


def _component_shape(rank, n):
    return {0: (), 1: (n,), 2: (n, n)}[rank]


class TensorField:
    def __init__(self, rank, dimension, *, mode, extended_by_zero=False,
                 domain=None, **impl):
        if rank not in (0, 1, 2):
            raise GeotomoError("rank must be 0, 1, or 2")
        if extended_by_zero and domain is None:
            raise GeotomoError("extension by zero needs the domain (its rho)")
        self.rank = rank
        self.dimension = dimension
        self.mode = mode
        self.extended_by_zero = extended_by_zero
        self.domain = domain
        self._impl = impl

    # -- constructors --------------------------------------------------------

    @classmethod
    def from_expressions(cls, rank, dimension, components,
                         extended_by_zero=False, domain=None):
        n = dimension
        parse = lambda s: s if isinstance(s, ex.Expression) else ex.parse(str(s), n)  # noqa: E731
        if rank == 0:
            comp = {(): parse(components)}
        elif rank == 1:
            comp = {(i,): parse(components[i]) for i in range(n)}
        else:
            comp = {}
            for i in range(n):
                for j in range(i, n):
                    comp[(i, j)] = parse(components[i][j])
        point = {k: ex.compile_point(e, n) for k, e in comp.items()}
        grid = {k: ex.compile_grid(e, n) for k, e in comp.items()}
        dpoint = {}
        dgrid = {}
        for k, e in comp.items():
            for d in range(n):
                de = ex.differentiate(e, d)
                dpoint[(d,) + k] = ex.compile_point(de, n)
                dgrid[(d,) + k] = ex.compile_grid(de, n)
        return cls(rank, n, mode="expression", extended_by_zero=extended_by_zero,
                   domain=domain, exprs=comp, point=point, grid=grid,
                   dpoint=dpoint, dgrid=dgrid)

    @classmethod
    def from_callable(cls, rank, dimension, fn, partials=None, fd_step=1e-5,
                      extended_by_zero=False, domain=None, fn_many=None,
                      partials_many=None):
        """fn(x) returns the component array; partials(x), if given, returns
        the (n, ...) array of coordinate derivatives.  fn_many/partials_many
        are optional vectorized variants taking (..., n) point arrays."""
        return cls(rank, dimension, mode="callable",
                   extended_by_zero=extended_by_zero, domain=domain,
                   fn=fn, partials=partials, fd_step=fd_step,
                   fn_many=fn_many, partials_many=partials_many)

    @classmethod
    def from_grid(cls, rank, axes, values, extended_by_zero=False, domain=None):
        """Grid-sampled field on a 2-d tensor-product grid.

        values has shape (nx, ny) for rank 0, (nx, ny, 2) for rank 1, and
        (nx, ny, 3) for rank 2 in [11, 12, 22] component order.
        """
        from scipy.interpolate import RectBivariateSpline
        if len(axes) != 2:
            raise GeotomoError("grid fields are implemented for n = 2")
        x_ax, y_ax = (np.asarray(a, float) for a in axes)
        values = np.asarray(values, float)
        comps = values[..., None] if rank == 0 and values.ndim == 2 else values
        if rank == 0:
            comps = values.reshape(values.shape[0], values.shape[1], 1)
        splines = [RectBivariateSpline(x_ax, y_ax, comps[:, :, c], kx=3, ky=3)
                   for c in range(comps.shape[2])]
        return cls(rank, 2, mode="grid", extended_by_zero=extended_by_zero,
                   domain=domain, axes=(x_ax, y_ax), values=comps,
                   splines=splines)

    @classmethod
    def linear_combination(cls, terms):
        """Pointwise sum of (coefficient, field) pairs of equal rank/dim."""
        coeffs = [float(c) for c, _ in terms]
        fields = [f for _, f in terms]
        rank, n = fields[0].rank, fields[0].dimension
        if any(f.rank != rank or f.dimension != n for f in fields):
            raise GeotomoError("linear combination needs matching rank/dimension")

        def fn(x):
            out = np.zeros(_component_shape(rank, n))
            for c, f in zip(coeffs, fields):
                out = out + c * f.evaluate(x)
            return out

        def partials(x):
            out = np.zeros((n,) + _component_shape(rank, n))
            for c, f in zip(coeffs, fields):
                out = out + c * f.partials(x)
            return out

        def fn_many(X):
            out = 0.0
            for c, f in zip(coeffs, fields):
                out = out + c * f.evaluate_many(X)
            return out

        def partials_many(X):
            out = 0.0
            for c, f in zip(coeffs, fields):
                out = out + c * f.partials_many(X)
            return out

        return cls(rank, n, mode="callable", fn=fn, partials=partials,
                   fd_step=1e-5, fn_many=fn_many, partials_many=partials_many)

    def __add__(self, other):
        return TensorField.linear_combination([(1.0, self), (1.0, other)])

    def __rmul__(self, c):
        return TensorField.linear_combination([(float(c), self)])

    def extended(self, domain):
        """The same field extended by zero outside M (rho <= 0)."""
        return TensorField.from_callable(
            self.rank, self.dimension, self.evaluate, partials=self.partials,
            fn_many=self.evaluate_many, partials_many=self.partials_many,
            extended_by_zero=True, domain=domain)

    # -- evaluation ------------------------------------------------------------

    def _zero_mask(self, x):
        return self.extended_by_zero and self.domain.rho(x) <= 0.0

    def evaluate(self, x):
        """Component array at one point (symmetric for rank 2)."""
        n = self.dimension
        shape = _component_shape(self.rank, n)
        if self._zero_mask(x):
            return np.zeros(shape)
        if self.mode == "expression":
            out = np.empty(shape)
            point = self._impl["point"]
            if self.rank == 0:
                return np.asarray(point[()](x), float)
            if self.rank == 1:
                for i in range(n):
                    out[i] = point[(i,)](x)
                return out
            for i in range(n):
                for j in range(i, n):
                    out[i, j] = out[j, i] = point[(i, j)](x)
            return out
        if self.mode == "callable":
            return np.asarray(self._impl["fn"](x), float).reshape(shape)
        return self._grid_eval(np.asarray(x, float))

    def _grid_eval(self, x, dx=0, dy=0):
        x_ax, y_ax = self._impl["axes"]
        if not (x_ax[0] - 1e-12 <= x[0] <= x_ax[-1] + 1e-12
                and y_ax[0] - 1e-12 <= x[1] <= y_ax[-1] + 1e-12):
            raise GridBoundaryError(f"point {tuple(x)} outside the sample grid")
        vals = [float(s(x[0], x[1], dx=dx, dy=dy)) for s in self._impl["splines"]]
        if self.rank == 0:
            return np.asarray(vals[0])
        if self.rank == 1:
            return np.array(vals)
        return np.array([[vals[0], vals[1]], [vals[1], vals[2]]])

    def evaluate_many(self, X):
        X = np.asarray(X, float)
        n = self.dimension
        shape = X.shape[:-1] + _component_shape(self.rank, n)
        if self.mode == "expression":
            grid = self._impl["grid"]
            out = np.empty(shape)
            if self.rank == 0:
                out = grid[()](X)
            elif self.rank == 1:
                for i in range(n):
                    out[..., i] = grid[(i,)](X)
            else:
                for i in range(n):
                    for j in range(i, n):
                        v = grid[(i, j)](X)
                        out[..., i, j] = v
                        out[..., j, i] = v
        elif self.mode == "callable" and self._impl.get("fn_many") is not None:
            out = np.asarray(self._impl["fn_many"](X), float).reshape(shape)
        else:
            flat = X.reshape(-1, n)
            vals = [self.evaluate(p) for p in flat] if not self.extended_by_zero \
                else [self._eval_no_mask(p) for p in flat]
            out = np.asarray(vals).reshape(shape)
        if self.extended_by_zero:
            mask = self.domain.rho_many(X) <= 0.0
            out = out.copy()
            out[mask] = 0.0
        return out

    def partials_many(self, X):
        """(..., n, comps) stacked coordinate derivatives, vectorized."""
        X = np.asarray(X, float)
        n = self.dimension
        shape = X.shape[:-1] + (n,) + _component_shape(self.rank, n)
        if self.mode == "expression":
            dgrid = self._impl["dgrid"]
            out = np.empty(shape)
            for d in range(n):
                if self.rank == 0:
                    out[..., d] = dgrid[(d,)](X)
                elif self.rank == 1:
                    for i in range(n):
                        out[..., d, i] = dgrid[(d, i)](X)
                else:
                    for i in range(n):
                        for j in range(i, n):
                            v = dgrid[(d, i, j)](X)
                            out[..., d, i, j] = v
                            out[..., d, j, i] = v
        elif self.mode == "callable" and self._impl.get("partials_many") is not None:
            out = np.asarray(self._impl["partials_many"](X), float).reshape(shape)
        else:
            flat = X.reshape(-1, n)
            out = np.asarray([self.partials(p) for p in flat]).reshape(shape)
        if self.extended_by_zero:
            mask = self.domain.rho_many(X) <= 0.0
            out = out.copy()
            out[mask] = 0.0
        return out

    def _eval_no_mask(self, x):
        saved = self.extended_by_zero
        try:
            object.__setattr__(self, "extended_by_zero", False)
            return self.evaluate(x)
        finally:
            object.__setattr__(self, "extended_by_zero", saved)

    # -- derivatives -------------------------------------------------------------

    def partials(self, x):
        """(n, ...) array of coordinate derivatives d_k (components)."""
        n = self.dimension
        shape = (n,) + _component_shape(self.rank, n)
        if self._zero_mask(x):
            return np.zeros(shape)
        if self.mode == "expression":
            dpoint = self._impl["dpoint"]
            out = np.empty(shape)
            for d in range(n):
                if self.rank == 0:
                    out[d] = dpoint[(d,)](x)
                elif self.rank == 1:
                    for i in range(n):
                        out[d, i] = dpoint[(d, i)](x)
                else:
                    for i in range(n):
                        for j in range(i, n):
                            out[d, i, j] = out[d, j, i] = dpoint[(d, i, j)](x)
            return out
        if self.mode == "grid":
            x = np.asarray(x, float)
            return np.stack([self._grid_eval(x, dx=1), self._grid_eval(x, dy=1)])
        user = self._impl.get("partials")
        if user is not None:
            return np.asarray(user(x), float).reshape(shape)
        h = self._impl["fd_step"]
        x = np.asarray(x, float)
        out = np.empty(shape)
        for d in range(n):
            e = np.zeros(n)
            e[d] = 1.0
            out[d] = (-self.evaluate(x + 2 * h * e) + 8 * self.evaluate(x + h * e)
                      - 8 * self.evaluate(x - h * e) + self.evaluate(x - 2 * h * e)) \
                / (12 * h)
        return out


# ---------------------------------------------------------------------------
# covariant operations
# ---------------------------------------------------------------------------

def sym_derivative(metric, v):
    """Symmetrized covariant derivative of a 1-form:
    (dv)_ij = 1/2 (d_i v_j + d_j v_i) - Gamma^k_ij v_k.
    """
    if v.rank != 1:
        raise GeotomoError("sym_derivative takes a rank-1 field")
    n = v.dimension

    def fn(x):
        dv = v.partials(x)  # dv[i, j] = d_i v_j
        gamma = metric.christoffel_at(x).gamma
        vv = v.evaluate(x)
        return 0.5 * (dv + dv.T) - np.einsum("kij,k->ij", gamma, vv)

    def fn_many(X):
        dv = v.partials_many(X)
        gamma, _ = metric.christoffel_many(X)
        vv = v.evaluate_many(X)
        sym = 0.5 * (dv + np.swapaxes(dv, -1, -2))
        return sym - np.einsum("...kij,...k->...ij", gamma, vv)

    return TensorField.from_callable(2, n, fn, fn_many=fn_many,
                                     extended_by_zero=v.extended_by_zero,
                                     domain=v.domain)


def divergence(metric, f):
    """Divergence of a symmetric 2-tensor: (delta f)_i = g^{jk} nabla_k f_ij."""
    if f.rank != 2:
        raise GeotomoError("divergence takes a rank-2 field")
    n = f.dimension

    def fn(x):
        df = f.partials(x)  # df[k, i, j] = d_k f_ij
        ch = metric.christoffel_at(x)
        fv = f.evaluate(x)
        nabla = df - np.einsum("lki,lj->kij", ch.gamma, fv) \
            - np.einsum("lkj,il->kij", ch.gamma, fv)
        return np.einsum("jk,kij->i", ch.g_inv, nabla)

    def fn_many(X):
        df = f.partials_many(X)
        gamma, ginv = metric.christoffel_many(X)
        fv = f.evaluate_many(X)
        nabla = df - np.einsum("...lki,...lj->...kij", gamma, fv) \
            - np.einsum("...lkj,...il->...kij", gamma, fv)
        return np.einsum("...jk,...kij->...i", ginv, nabla)

    return TensorField.from_callable(1, n, fn, fn_many=fn_many,
                                     extended_by_zero=f.extended_by_zero,
                                     domain=f.domain)


def metric_as_field(metric, extended_by_zero=False, domain=None):
    """The metric tensor itself as a rank-2 field (handy oracle: contracted
    twice with a unit velocity it integrates to arc length)."""
    return TensorField.from_callable(
        2, metric.dimension, metric.matrix, partials=metric.d_metric,
        fn_many=metric.matrix_many, partials_many=metric.d_metric_many,
        extended_by_zero=extended_by_zero, domain=domain)
