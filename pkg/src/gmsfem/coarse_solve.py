"""Coarse coupling of the multiscale basis and primal/dual coarse solves."""

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .fine_fem import SolveFailure

__all__ = [
    "CoarseSystem",
    "CoarseSolution",
    "RankDeficientBasis",
    "assemble_coarse",
    "solve_primal",
    "solve_dual",
    "neighborhood_component",
    "truncate",
    "truncate_solution",
]

# Above this dimension the coarse solve switches from dense Cholesky to
# Jacobi-preconditioned CG.
DENSE_CUTOFF = 2000

COARSE_RTOL = 1e-12


class RankDeficientBasis(RuntimeError):
    """The coarse stiffness is not SPD; carries the most collinear column pair."""

    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = columns


class CoarseSolution:
    """Coefficients over the coarse dofs plus the fine-grid representation."""

    def __init__(self, coefficients, fine, space, tag):
        self.coefficients = coefficients
        self.fine = fine
        self.space = space
        self.tag = tag

    def component_coefficients(self, i):
        """Coefficient slice of neighborhood i."""
        return self.coefficients[self.space.column_slice(i)]


class CoarseSystem:
    """Galerkin system on the span of an offline space's basis columns.

    Holds R (basis matrix), A_c = R' A R and the primal load R' b.  Solves are
    symmetrically diagonal-scaled and iteratively refined to a relative
    residual of 1e-12; dense Cholesky is used up to DENSE_CUTOFF dofs and
    Jacobi-preconditioned CG above.
    """

    def __init__(self, space, A, b, dense_cutoff=DENSE_CUTOFF):
        self.space = space
        self.R = space.basis_matrix()
        product = (self.R.T @ (A @ self.R)).tocsr()
        self.dim = space.total_dofs
        self.dense = self.dim <= dense_cutoff
        self.matrix = product.toarray() if self.dense else product
        self.load = self.R.T @ b
        diag = product.diagonal()
        if np.any(diag <= 0):
            raise RankDeficientBasis("coarse stiffness has a nonpositive diagonal entry")
        self._scale = np.sqrt(diag)
        self._factor = None
        self._matrix_ld = None

    def _scaled_matrix(self):
        if self.dense:
            return self.matrix / np.outer(self._scale, self._scale)
        d = sparse.diags(1.0 / self._scale)
        return (d @ self.matrix @ d).tocsr()

    def _diagnose_rank_deficiency(self):
        gram = self._scaled_matrix()
        gram = gram if self.dense else gram.toarray()
        off = np.abs(gram - np.diag(np.diag(gram)))
        p, q = np.unravel_index(np.argmax(off), off.shape)
        raise RankDeficientBasis(
            f"coarse stiffness is not SPD; most collinear columns {p} and {q} "
            f"(normalized inner product {gram[p, q]:.6f})",
            columns=(int(p), int(q)),
        )

    def _scaled_solve(self, rhs_scaled):
        if self.dense:
            if self._factor is None:
                try:
                    self._factor = scipy.linalg.cho_factor(self._scaled_matrix())
                except scipy.linalg.LinAlgError:
                    self._diagnose_rank_deficiency()
            return scipy.linalg.cho_solve(self._factor, rhs_scaled)
        if self._factor is None:
            # the symmetric diagonal scaling above is the Jacobi preconditioner
            self._factor = self._scaled_matrix()
        x, info = spla.cg(self._factor, rhs_scaled, rtol=1e-14, atol=0.0, maxiter=20 * self.dim)
        if info < 0:
            raise SolveFailure(f"CG breakdown on coarse system (info={info})")
        # info > 0 (not fully converged) falls through to the refinement loop,
        # which decides whether the residual contract holds
        return x

    def solve(self, rhs, tag):
        """Solve A_c c = rhs to 1e-12 relative residual; attach R c.

        Refinement residuals are accumulated in extended precision so the
        contract stays verifiable at high contrast, where float64 evaluation
        noise of A_c @ c alone can exceed it.
        """
        rhs = np.asarray(rhs, dtype=float)
        norm_rhs = np.linalg.norm(rhs)
        if norm_rhs == 0.0:
            c = np.zeros(self.dim)
            return CoarseSolution(c, np.zeros(self.R.shape[0]), self.space, tag)
        if self._matrix_ld is None:
            self._matrix_ld = self.matrix.astype(np.longdouble)
        matrix_ld = self._matrix_ld
        rhs_ld = rhs.astype(np.longdouble)
        c = self._scaled_solve(rhs / self._scale).astype(np.longdouble) / self._scale
        for _ in range(10):
            resid = rhs_ld - matrix_ld @ c
            achieved = float(np.linalg.norm(resid.astype(float)))
            if achieved <= COARSE_RTOL * norm_rhs:
                c64 = c.astype(float)
                return CoarseSolution(c64, self.R @ c64, self.space, tag)
            step = np.asarray(resid, dtype=float)
            c = c + self._scaled_solve(step / self._scale) / self._scale
        raise SolveFailure(
            f"coarse solve stalled at relative residual {achieved / norm_rhs:.3e} "
            f"(contract {COARSE_RTOL:.1e}, dim {self.dim})",
            achieved=achieved / norm_rhs,
        )


def assemble_coarse(space, A, b, dense_cutoff=DENSE_CUTOFF):
    """Couple the basis into the global form: A_c = R' A R, b_c = R' b."""
    return CoarseSystem(space, A, b, dense_cutoff=dense_cutoff)


def solve_primal(system):
    """Multiscale solution of the primal problem in the system's space."""
    return system.solve(system.load, tag="primal")


def solve_dual(system, g_load, enriched=False):
    """Multiscale dual solution; same matrix (symmetric form), goal load.

    ``g_load`` is the fine-grid load vector of the goal functional.
    """
    rhs = system.R.T @ np.asarray(g_load, dtype=float)
    return system.solve(rhs, tag="dual_enriched" if enriched else "dual")


def neighborhood_component(sol, i):
    """Fine representation of the part of ``sol`` carried by neighborhood i."""
    return truncate(sol, i, int(sol.space.counts[i]))


def truncate(sol, i, l_i):
    """Fine representation of neighborhood i's component, keeping its first
    ``l_i`` basis functions (coefficient truncation)."""
    space = sol.space
    keep = min(int(l_i), int(space.counts[i]))
    out = np.zeros(space.grid.n_vertices)
    if keep > 0:
        coeffs = sol.component_coefficients(i)[:keep]
        neigh = space.neighborhoods[i]
        out[neigh.fine_vertices_all] = space.candidates[i][:, :keep] @ coeffs
    return out


def truncate_solution(sol, counts):
    """Project a solution onto the per-neighborhood leading ``counts`` columns.

    Idempotent by construction: coefficients beyond the kept prefix are zeroed
    and the fine representation recomputed.
    """
    space = sol.space
    counts = np.asarray(counts, dtype=int)
    coeffs = sol.coefficients.copy()
    for i in range(space.n_neighborhoods):
        sl = space.column_slice(i)
        keep = min(int(counts[i]), int(space.counts[i]))
        coeffs[sl.start + keep : sl.stop] = 0.0
    return CoarseSolution(coeffs, space.basis_matrix() @ coeffs, space, sol.tag)
