"""Solenoidal decomposition f = f^s + dv on a grid over the enlarged
domain M_1/2, with v = 0 on its boundary.

The elliptic system delta d v = delta f is discretized variationally: with
D the 2nd-order covariant difference operator v -> dv and W the metric
L2 weights on symmetric 2-tensors, v solves the normal equations
D^T W D v = D^T W f.  That matrix is symmetric positive definite by
construction, matches delta d (delta is the exact adjoint of d), and makes
the discrete decomposition f^s = f - Dv exactly W-orthogonal to the range
of D up to the Krylov solver tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .errors import GeotomoError, NoConvergenceError, SingularSystemError

__all__ = ["GridField", "DecompositionOperator", "assemble_operator",
           "decompose", "solenoidal_residual"]

_COMP_PAIRS = ((0, 0), (0, 1), (1, 1))  # symmetric storage order 11, 12, 22


@dataclass
class GridField:
    """Uniform Cartesian grid over a bounding box of M_1/2 (n = 2).

    values has trailing component dimension 1 (rank 0), 2 (rank 1), or
    3 (rank 2 in [11, 12, 22] order); nodes outside the mask hold zeros.
    """
    rank: int
    x_axis: np.ndarray
    y_axis: np.ndarray
    values: np.ndarray
    inside: np.ndarray    # mask of nodes inside M_1/2
    h: float

    @classmethod
    def zeros(cls, rank, x_axis, y_axis, inside):
        ncomp = {0: 1, 1: 2, 2: 3}[rank]
        return cls(rank, x_axis, y_axis,
                   np.zeros((x_axis.size, y_axis.size, ncomp)),
                   inside, float(x_axis[1] - x_axis[0]))

    def tensor_at_index(self, i, j):
        v = self.values[i, j]
        if self.rank == 0:
            return v[0]
        if self.rank == 1:
            return v
        return np.array([[v[0], v[1]], [v[1], v[2]]])

    def max_abs(self):
        return float(np.abs(self.values[self.inside]).max())

    def l2(self, weights=None):
        if weights is None:
            return float(np.sqrt((self.values[self.inside] ** 2).sum()
                                 * self.h ** 2))
        return float(np.sqrt(weights.inner(self.values, self.values)))


def make_grid(domain, n_nodes=161, pad_cells=2):
    """Grid covering M_1/2 with a small pad; mask from rho > -eps/2."""
    if domain.dimension != 2:
        raise GeotomoError("grid decomposition is implemented for n = 2")
    level = -0.5 * domain.extension_margin
    pts = domain.sample_boundary(128, level=level)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    h = float((hi - lo).max()) / (n_nodes - 1 - 2 * pad_cells)
    lo = lo - pad_cells * h
    x_axis = lo[0] + h * np.arange(n_nodes)
    y_axis = lo[1] + h * np.arange(n_nodes)
    X, Y = np.meshgrid(x_axis, y_axis, indexing="ij")
    P = np.stack([X, Y], axis=-1)
    inside = domain.rho_many(P) > level
    return x_axis, y_axis, inside, P, h


def sample_field(field, domain, n_nodes=161):
    """Sample a rank-2 TensorField onto the decomposition grid."""
    x_axis, y_axis, inside, P, h = make_grid(domain, n_nodes)
    F = field.evaluate_many(P)
    vals = np.zeros(P.shape[:2] + (3,))
    for c, (i, j) in enumerate(_COMP_PAIRS):
        vals[..., c] = F[..., i, j]
    vals[~inside] = 0.0
    return GridField(2, x_axis, y_axis, vals, inside, h)


class _Weights:
    """Per-node quadratic forms of the metric L2 product on sym 2-tensors:
    <f, h>_g = f_ij h_kl g^ik g^jl sqrt(det g) h^2, block-diagonal 3x3."""

    def __init__(self, metric, P, inside, h):
        G = metric.matrix_many(P[inside])
        Ginv = np.linalg.inv(G)
        vol = np.sqrt(np.linalg.det(G)) * h * h
        m = Ginv.shape[0]
        B = np.empty((m, 3, 3))
        for a, (i, j) in enumerate(_COMP_PAIRS):
            for b, (k, l) in enumerate(_COMP_PAIRS):
                term = Ginv[:, i, k] * Ginv[:, j, l] + Ginv[:, i, l] * Ginv[:, j, k]
                mult = 0.5 * (2.0 if i != j else 1.0) * (2.0 if k != l else 1.0)
                B[:, a, b] = mult * term * vol
        self.blocks = B
        self.inside = inside

    def inner(self, fvals, hvals):
        f = fvals[self.inside]
        g = hvals[self.inside]
        return float(np.einsum("kab,ka,kb->", self.blocks, f, g))

    def apply(self, vec3):
        return np.einsum("kab,kb->ka", self.blocks, vec3)


class DecompositionOperator:
    """Assembled discrete operators for one (metric, domain, grid) triple."""

    def __init__(self, metric, domain, n_nodes=161):
        self.metric = metric
        self.domain = domain
        self.n_nodes = n_nodes
        x_axis, y_axis, inside, P, h = make_grid(domain, n_nodes)
        self.x_axis, self.y_axis = x_axis, y_axis
        self.inside = inside
        self.points = P
        self.h = h
        self._assemble()

    # -- assembly ---------------------------------------------------------------

    def _assemble(self):
        nx, ny = self.inside.shape
        inside = self.inside
        h = self.h

        idx = -np.ones((nx, ny), dtype=int)
        ii, jj = np.nonzero(inside)
        idx[ii, jj] = np.arange(ii.size)
        self.n_inside = ii.size
        self.node_index = idx

        # dof nodes: inside with all four neighbors inside (the boundary
        # band carries the homogeneous essential condition v = 0)
        band = np.zeros_like(inside)
        for d, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
            shifted = np.roll(inside, d, axis=axis)
            if axis == 0:
                shifted[0 if d == 1 else -1, :] = False
            else:
                shifted[:, 0 if d == 1 else -1] = False
            band |= inside & ~shifted
        dof_mask = inside & ~band
        self.dof_mask = dof_mask
        self.band_mask = band
        di, dj = np.nonzero(dof_mask)
        self.n_dof = di.size
        dof_of_node = -np.ones((nx, ny), dtype=int)
        dof_of_node[di, dj] = np.arange(di.size)

        if self.n_dof == 0:
            raise SingularSystemError("grid too coarse: no interior dofs")

        gamma = np.zeros((self.n_inside, 2, 2, 2))
        pts = self.points[inside]
        for k in range(self.n_inside):
            gamma[k] = self.metric.christoffel_at(pts[k]).gamma

        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        # D: (3 * n_inside) x (2 * n_dof);  (dv)_ij at every inside node
        for k in range(self.n_inside):
            i, j = ii[k], jj[k]
            for c, (p, q) in enumerate(_COMP_PAIRS):
                r = 3 * k + c
                # 1/2 (d_p v_q + d_q v_p)
                for (dcomp, vcomp) in ((p, q), (q, p)):
                    for node, wgt in self._deriv_stencil(i, j, dcomp):
                        d = dof_of_node[node]
                        if d >= 0:
                            add(r, 2 * d + vcomp, 0.5 * wgt)
                # - Gamma^m_pq v_m
                dm = dof_of_node[i, j]
                if dm >= 0:
                    for m in range(2):
                        add(r, 2 * dm + m, -gamma[k, m, p, q])

        D = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(3 * self.n_inside, 2 * self.n_dof))
        self.D = D
        self.weights = _Weights(self.metric, self.points, inside, h)
        self.W = self._block_weight_matrix()
        self.A = (D.T @ (self.W @ D)).tocsr()
        self.dof_of_node = dof_of_node

    def _block_weight_matrix(self):
        B = self.weights.blocks
        m = B.shape[0]
        rows = np.repeat(np.arange(3 * m), 3)
        cols = (np.repeat(np.arange(m) * 3, 9)
                + np.tile(np.arange(3), 3 * m))
        vals = B.reshape(m, 9).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(3 * m, 3 * m))

    def _deriv_stencil(self, i, j, axis):
        """Centered 2nd-order d/dx_axis at node (i, j); first-order one-sided
        closure where a neighbor leaves the inside mask."""
        step = (1, 0) if axis == 0 else (0, 1)
        ip = (i + step[0], j + step[1])
        im = (i - step[0], j - step[1])
        nx, ny = self.inside.shape
        ok_p = 0 <= ip[0] < nx and 0 <= ip[1] < ny and self.inside[ip]
        ok_m = 0 <= im[0] < nx and 0 <= im[1] < ny and self.inside[im]
        inv = 1.0 / self.h
        if ok_p and ok_m:
            return ((ip, 0.5 * inv), (im, -0.5 * inv))
        if ok_p:
            return ((ip, inv), ((i, j), -inv))
        if ok_m:
            return (((i, j), inv), (im, -inv))
        return ()

    # -- linear algebra -----------------------------------------------------------

    def apply_d(self, v_dof):
        return self.D @ v_dof

    def apply_delta_d(self, v_dof):
        return self.A @ v_dof

    def rhs_for(self, fvals):
        fvec = fvals[self.inside].reshape(-1)
        return self.D.T @ (self.W @ fvec)

    def solve(self, fvals, tol=1e-12, maxiter=20000):
        b = self.rhs_for(fvals)
        diag = self.A.diagonal()
        if np.any(diag <= 0.0):
            raise SingularSystemError("operator diagonal not positive; "
                                      "bad mask or boundary band")
        M = LinearOperator(self.A.shape, matvec=lambda x: x / diag)
        v, info = cg(self.A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
        if info != 0:
            raise NoConvergenceError(f"CG did not converge (info={info})")
        return v, b

    # -- field reconstruction -------------------------------------------------------

    def v_grid(self, v_dof):
        out = GridField.zeros(1, self.x_axis, self.y_axis, self.inside)
        di, dj = np.nonzero(self.dof_mask)
        out.values[di, dj, 0] = v_dof[0::2]
        out.values[di, dj, 1] = v_dof[1::2]
        return out

    def dv_grid(self, v_dof):
        out = GridField.zeros(2, self.x_axis, self.y_axis, self.inside)
        dvec = (self.D @ v_dof).reshape(-1, 3)
        out.values[self.inside] = dvec
        return out


def assemble_operator(metric, domain, n_nodes=161):
    """Sparse discretization of v -> delta d v (via the normal equations)
    with essential boundary rows on the band of M_1/2."""
    return DecompositionOperator(metric, domain, n_nodes)


@dataclass
class DecompositionReport:
    orthogonality: float
    solver_residual: float
    boundary_band_residual: float
    n_dof: int
    grid: int

    def as_dict(self):
        return self.__dict__.copy()


def decompose(operator, f, tol=1e-12):
    """Orthogonal splitting f = f^s + dv with v = 0 on the boundary band.

    f is a rank-2 GridField on the operator's grid (or a TensorField, which
    is sampled first).  Returns (f^s, v, report).
    """
    if not isinstance(f, GridField):
        f = sample_field(f, operator.domain, operator.n_nodes)
    if f.values.shape[:2] != operator.inside.shape:
        raise GeotomoError("field grid does not match the operator grid")
    v_dof, b = operator.solve(f.values, tol=tol)
    dv = operator.dv_grid(v_dof)
    fs = GridField(2, f.x_axis, f.y_axis, f.values - dv.values,
                   operator.inside, f.h)
    v = operator.v_grid(v_dof)

    win = operator.weights.inner
    denom = max(np.sqrt(win(fs.values, fs.values))
                * np.sqrt(win(dv.values, dv.values)), 1e-300)
    ortho = abs(win(fs.values, dv.values)) / denom
    res = operator.A @ v_dof - b
    rel = float(np.linalg.norm(res) / max(np.linalg.norm(b), 1e-300))

    # near the outer boundary f vanishes, so the equation there reads
    # delta d v = 0; quote the normal-equation residual on the band rows
    band_rows = _band_dof_rows(operator)
    band = float(np.abs(res[band_rows]).max()) if band_rows.size else 0.0

    report = DecompositionReport(
        orthogonality=float(ortho), solver_residual=rel,
        boundary_band_residual=band, n_dof=operator.n_dof,
        grid=operator.n_nodes)
    return fs, v, report


def _band_dof_rows(operator):
    dof_nodes = np.nonzero(operator.dof_mask)
    margin = operator.domain.extension_margin * 0.25
    rho = operator.domain.rho_many(
        operator.points[dof_nodes[0], dof_nodes[1]])
    level = -0.5 * operator.domain.extension_margin
    sel = rho < level + margin
    rows = np.nonzero(sel)[0]
    return np.concatenate([2 * rows, 2 * rows + 1]) if rows.size else rows


def solenoidal_residual(metric, operator, fs):
    """Max |delta f^s| over deep-interior nodes, via an independent
    discretization (4th-order centered differences, so the measure is not
    the assembly's own adjoint identity)."""
    vals = fs.values
    inside = operator.inside
    nx, ny = inside.shape
    deep = inside.copy()
    for _ in range(4):
        shrunk = deep.copy()
        shrunk[1:, :] &= deep[:-1, :]
        shrunk[:-1, :] &= deep[1:, :]
        shrunk[:, 1:] &= deep[:, :-1]
        shrunk[:, :-1] &= deep[:, 1:]
        deep = shrunk
    h = operator.h
    F = np.zeros((nx, ny, 2, 2))
    F[..., 0, 0] = vals[..., 0]
    F[..., 0, 1] = F[..., 1, 0] = vals[..., 1]
    F[..., 1, 1] = vals[..., 2]
    dF = np.zeros((nx, ny, 2, 2, 2))  # dF[..., k, i, j] = d_k f_ij
    dF[2:-2, :, 0] = (F[:-4, :] - 8 * F[1:-3, :]
                      + 8 * F[3:-1, :] - F[4:, :]) / (12 * h)
    dF[:, 2:-2, 1] = (F[:, :-4] - 8 * F[:, 1:-3]
                      + 8 * F[:, 3:-1] - F[:, 4:]) / (12 * h)
    worst = 0.0
    ii, jj = np.nonzero(deep)
    pts = operator.points[ii, jj]
    G = metric.matrix_many(pts)
    Ginv = np.linalg.inv(G)
    for k in range(ii.size):
        ch = metric.christoffel_at(pts[k])
        nab = dF[ii[k], jj[k]] \
            - np.einsum("lki,lj->kij", ch.gamma, F[ii[k], jj[k]]) \
            - np.einsum("lkj,il->kij", ch.gamma, F[ii[k], jj[k]])
        delta = np.einsum("jk,kij->i", Ginv[k], nab)
        worst = max(worst, float(np.abs(delta).max()))
    return worst
