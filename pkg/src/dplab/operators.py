"""Assembled discrete operators on the strip: mass, stiffness, duality solves.

The stiffness matrix realizes the combined Dirichlet form

    a(u, z) = (bulk gradient coupling) + (tangential coupling on both
              boundary rows),

assembled as a sum of positively weighted squared differences, so symmetry,
positive semidefiniteness and the exact kernel (the constants) hold by
construction.  The mass operator is the diagonal of bulk + surface
quadrature weights; together they realize the pairing, the strong-form map
``v -> mass^{-1} A v`` (negative bulk Laplacian paired with the boundary
flux/tangential-Laplacian combination), and the dual-norm solves.

Mean-zero systems are solved by conjugate gradients with re-projection of
every iterate, relative residual 1e-12, at most 10*(nx*ny) iterations.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .geometry import StripGrid

__all__ = ["OperatorSet", "LinearSolveError"]

CG_TOL = 1e-12
MEAN_TOL = 1e-10


class LinearSolveError(RuntimeError):
    """A linear solve failed to converge; signals an assembly defect."""


def _cycle_laplacian(n: int) -> sparse.csr_matrix:
    """Graph Laplacian of the n-cycle (periodic second difference, unscaled)."""
    main = 2.0 * np.ones(n)
    off = -np.ones(n - 1)
    lap = sparse.diags([off, main, off], [-1, 0, 1], format="lil")
    lap[0, n - 1] = -1.0
    lap[n - 1, 0] = -1.0
    return lap.tocsr()


def _path_laplacian(n: int) -> sparse.csr_matrix:
    """Graph Laplacian of the n-path (zero-flux second difference, unscaled)."""
    main = 2.0 * np.ones(n)
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return sparse.diags([off, main, off], [-1, 0, 1], format="csr")


def _assemble_stiffness(grid: StripGrid) -> sparse.csr_matrix:
    nx, ny = grid.nx, grid.ny
    hx, hy = grid.hx, grid.hy
    cy = np.ones(ny)
    cy[0] = cy[-1] = 0.5
    surf = np.zeros(ny)
    surf[0] = surf[-1] = 1.0
    # weight of an x-edge in row j: bulk hy*cy/hx plus tangential 1/hx on
    # the boundary rows; weight of a y-edge: hx/hy for every column.
    x_weights = (hy * cy + surf) / hx
    a_x = sparse.kron(_cycle_laplacian(nx), sparse.diags(x_weights), format="csr")
    a_y = (hx / hy) * sparse.kron(sparse.eye(nx), _path_laplacian(ny), format="csr")
    return (a_x + a_y).tocsr()


class OperatorSet:
    """Immutable bundle of discrete operators for one grid."""

    def __init__(self, grid: StripGrid):
        self.grid = grid
        self.n = grid.size
        self.mass = grid.mass.ravel().copy()
        self.stiffness = _assemble_stiffness(grid)
        self._total = grid.total_measure

    # -- basic forms -----------------------------------------------------------

    def apply_a(self, u, z) -> float:
        """The Dirichlet form u^T A z (symmetric, PSD, kernel = constants)."""
        u = self.grid.check_field(u)
        z = self.grid.check_field(z)
        return float(u.ravel() @ (self.stiffness @ z.ravel()))

    def norm_v0(self, z) -> float:
        """Energy seminorm a(z, z)^{1/2}."""
        return float(np.sqrt(max(self.apply_a(z, z), 0.0)))

    def _require_mean_zero(self, z, who: str):
        scale = max(1.0, float(np.abs(z).max(initial=0.0)))
        m = self.grid.mean(z)
        if abs(m) > MEAN_TOL * scale:
            raise ValueError(f"{who}: input must have zero mean (got {m:.3e})")

    def apply_subdiff_phi(self, v):
        """Strong form mass^{-1} A v of the Dirichlet-form gradient.

        Satisfies the duality identity inner_h(result, z) = a(v, z) for
        every z.  The input must be mean-zero.
        """
        v = self.grid.check_field(v)
        self._require_mean_zero(v, "apply_subdiff_phi")
        return ((self.stiffness @ v.ravel()) / self.mass).reshape(self.grid.shape)

    # -- singular solves ---------------------------------------------------------

    def _cg_mean_zero(self, b, x0=None, tol=CG_TOL):
        """CG for A x = b on the complement of the constants.

        b must be Euclidean-orthogonal to the constant vector (which holds
        whenever b = mass * w with mean(w) = 0); every iterate is
        re-projected to suppress rounding drift along the kernel.
        """
        A = self.stiffness
        n = self.n
        maxiter = 10 * n
        bnorm = float(np.linalg.norm(b))
        if bnorm == 0.0:
            return np.zeros(n)
        x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).ravel().copy()
        x -= x.mean()
        r = b - A @ x
        r -= r.mean()
        p = r.copy()
        rs = float(r @ r)
        for _ in range(maxiter):
            if np.sqrt(rs) <= tol * bnorm:
                break
            Ap = A @ p
            Ap -= Ap.mean()
            pAp = float(p @ Ap)
            if pAp <= 0.0:
                raise LinearSolveError("CG breakdown: operator not positive definite "
                                       "on the mean-zero subspace")
            alpha = rs / pAp
            x += alpha * p
            r -= alpha * Ap
            r -= r.mean()
            rs_new = float(r @ r)
            p = r + (rs_new / rs) * p
            rs = rs_new
        else:
            raise LinearSolveError(
                f"CG did not reach relative residual {tol:g} in {maxiter} iterations")
        return x

    def solve_f_inverse(self, w, x0=None):
        """The unique mean-zero v with a(v, z) = inner_h(w, z) for all z.

        ``w`` is a mean-zero field; ``x0`` optionally warm-starts the CG.
        """
        w = self.grid.check_field(w)
        self._require_mean_zero(w, "solve_f_inverse")
        b = self.mass * w.ravel()
        b -= b.mean()  # remove rounding component along the kernel
        x = self._cg_mean_zero(b, x0=x0)
        x -= (self.mass * x).sum() / self._total
        return x.reshape(self.grid.shape)

    def norm_v0star(self, w) -> float:
        """Dual norm sqrt(inner_h(w, F^{-1} w)) of a mean-zero field."""
        w = self.grid.check_field(w)
        v = self.solve_f_inverse(w)
        return float(np.sqrt(max(self.grid.inner_h(w, v), 0.0)))

    def lift_source(self, g):
        """The mean-zero f with strong form mass^{-1} A f = g.

        Rejects sources with nonzero mean; verifies the duality residual
        afterwards (relative 1e-10) as an assembly sanity check.
        """
        g = self.grid.check_field(g)
        scale = max(1.0, float(np.abs(g).max(initial=0.0)))
        m = self.grid.mean(g)
        if abs(m) > MEAN_TOL * scale:
            raise ValueError(f"(A2): source must have zero mean (got {m:.3e})")
        f = self.solve_f_inverse(g)
        res = np.linalg.norm(self.stiffness @ f.ravel() - self.mass * g.ravel())
        rhs = max(np.linalg.norm(self.mass * g.ravel()), 1e-300)
        if res > 1e-10 * max(1.0, rhs):
            raise LinearSolveError(f"source lifting residual {res:.3e} too large")
        return f

    def regularize_initial(self, u0, eps: float):
        """Solve (mass + eps*A) v = mass * P u0; the smoothed initial state.

        Contracts in the mean pairing and converges to P u0 as eps -> 0;
        eps = 0 returns the projection itself.
        """
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        u0 = self.grid.check_field(u0)
        v0 = self.grid.project(u0)
        if eps == 0.0:
            return v0
        op = sparse.diags(self.mass) + eps * self.stiffness
        try:
            x = spla.spsolve(op.tocsc(), self.mass * v0.ravel())
        except RuntimeError as exc:  # pragma: no cover - assembly defect path
            raise LinearSolveError(f"initial regularization solve failed: {exc}")
        if not np.isfinite(x).all():
            raise LinearSolveError("initial regularization produced non-finite values")
        x -= (self.mass * x).sum() / self._total
        return x.reshape(self.grid.shape)

    # -- debugging -----------------------------------------------------------------

    def dump_stiffness(self, path) -> None:
        """Write the stiffness matrix as 'i j value' coordinate text."""
        coo = self.stiffness.tocoo()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# {self.n} {self.n} {coo.nnz}\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i} {j} {float(v)!r}\n")
