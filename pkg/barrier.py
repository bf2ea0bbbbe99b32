"""
Log-barrier Newton method for smooth convex objectives with a diagonal
Hessian, sparse linear inequality constraints A z + b >= 0 and optional
linear equalities E z = e. Used by both the primal and dual solvers.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from config import SolverOptions, ARMIJO_SLOPE, ARMIJO_SHRINK
from errors import SolverError

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

CENTERING_TOL = 1e-7
FRACTION_TO_BOUNDARY = 0.99
MIN_STEP = 1e-16
DENSE_FILL = 0.1


@dataclass
class BarrierProblem:
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian_diag: Callable[[np.ndarray], np.ndarray]
    ineq_matrix: sp.csr_matrix
    ineq_offset: np.ndarray
    eq_matrix: Optional[sp.csr_matrix] = None
    eq_rhs: Optional[np.ndarray] = None

    def slacks(self, z):
        return self.ineq_matrix @ z + self.ineq_offset


@dataclass
class BarrierResult:
    z: np.ndarray
    multipliers: np.ndarray
    eq_multipliers: np.ndarray
    iterations: int
    mu: float
    kkt_residual: float
    stages: list = field(default_factory=list)

    def diagnostics(self):
        return {
            "iterations": self.iterations,
            "final_barrier_weight": self.mu,
            "kkt_residual": self.kkt_residual,
        }


class BarrierNewton:
    """Barrier continuation with Armijo-backtracked Newton steps."""

    def __init__(self, problem, opts=None):
        """
        Initialize the solver.

        Args:
            problem: BarrierProblem to minimize
            opts: SolverOptions; defaults from config when omitted
        """
        self.problem = problem
        self.opts = opts or SolverOptions()
        self.n_eq = 0 if problem.eq_matrix is None else problem.eq_matrix.shape[0]
        self.iterations = 0

    def _barrier_value(self, z, mu):
        c = self.problem.slacks(z)
        if np.any(c <= 0):
            return np.inf
        return self.problem.objective(z) - mu * np.sum(np.log(c))

    def _newton_step(self, z, mu):
        prob = self.problem
        c = prob.slacks(z)
        A = prob.ineq_matrix
        grad = prob.gradient(z) - mu * (A.T @ (1.0 / c))
        hess = (A.T @ sp.diags(mu / c ** 2) @ A + sp.diags(prob.hessian_diag(z))).tocsc()
        if self.n_eq:
            E = prob.eq_matrix
            kkt = sp.bmat([[hess, E.T], [E, None]], format='csc')
            # a feasible start keeps this residual at round-off; the step removes it
            rhs = np.concatenate([-grad, prob.eq_rhs - E @ z])
        else:
            kkt = hess
            rhs = -grad
        sol = self._solve(kkt, rhs)
        step = sol[:z.size]
        eq_mult = sol[z.size:]
        return step, grad, eq_mult

    @staticmethod
    def _solve(mat, rhs):
        n = mat.shape[0]
        try:
            if mat.nnz > DENSE_FILL * n * n:
                sol = np.linalg.solve(mat.toarray(), rhs)
            else:
                sol = spla.spsolve(mat, rhs)
            if np.all(np.isfinite(sol)):
                return sol
        except (RuntimeError, np.linalg.LinAlgError) as e:
            logger.debug(f"Direct solve failed, falling back to least squares: {e}")
        return np.linalg.lstsq(mat.toarray(), rhs, rcond=None)[0]

    def _line_search(self, z, step, grad, mu, dec2):
        A = self.problem.ineq_matrix
        c = self.problem.slacks(z)
        dc = A @ step
        t = 1.0
        shrinking = dc < 0
        if np.any(shrinking):
            t = min(1.0, FRACTION_TO_BOUNDARY * float(np.min(-c[shrinking] / dc[shrinking])))
        current = self._barrier_value(z, mu)
        slope = float(grad @ step)
        # below this decrement the Armijo test only sees round-off
        if dec2 < 1e-13 * max(1.0, abs(current)):
            return t
        while t > MIN_STEP:
            if self._barrier_value(z + t * step, mu) <= current + ARMIJO_SLOPE * t * slope:
                return t
            t *= ARMIJO_SHRINK
        return 0.0

    def _center(self, z, mu, tol):
        eq_mult = np.zeros(self.n_eq)
        while True:
            step, grad, eq_mult = self._newton_step(z, mu)
            dec2 = float(-grad @ step)
            scale = max(1.0, abs(self.problem.objective(z)))
            if dec2 / 2.0 <= tol * scale:
                return z, eq_mult
            if self.iterations >= self.opts.max_iter:
                raise SolverError(
                    f"barrier Newton did not converge within {self.opts.max_iter} iterations",
                    best_iterate=z, diagnostics={"iterations": self.iterations, "barrier_weight": mu})
            t = self._line_search(z, step, grad, mu, dec2)
            self.iterations += 1
            if t == 0.0:
                if dec2 <= 1e-8 * scale:
                    return z, eq_mult
                raise SolverError(
                    "line search failed to find a decrease", best_iterate=z,
                    diagnostics={"iterations": self.iterations, "barrier_weight": mu, "decrement": dec2})
            z = z + t * step

    def kkt_residual(self, z, mu, eq_mult):
        prob = self.problem
        grad_f = prob.gradient(z)
        resid = grad_f - mu * (prob.ineq_matrix.T @ (1.0 / prob.slacks(z)))
        if self.n_eq:
            resid = resid + prob.eq_matrix.T @ eq_mult
        return float(np.max(np.abs(resid)) / max(1.0, float(np.max(np.abs(grad_f)))))

    def solve(self, z0):
        """Run barrier continuation from a strictly feasible z0."""
        prob = self.problem
        if np.any(prob.slacks(z0) <= 0):
            raise SolverError("starting point is not strictly feasible", best_iterate=z0)
        opts = self.opts
        z = np.array(z0, dtype=float)
        mu = opts.barrier_start
        stages = []
        while True:
            last = mu <= opts.barrier_end * (1.0 + 1e-12)
            tol = opts.tol if last else CENTERING_TOL
            z, eq_mult = self._center(z, mu, tol)
            stages.append({"barrier_weight": mu, "iterations": self.iterations})
            logger.debug(f"Barrier stage mu={mu:.1e} done after {self.iterations} Newton steps")
            if last:
                break
            mu = max(mu * opts.barrier_decay, opts.barrier_end)
        mult = mu / prob.slacks(z)
        return BarrierResult(
            z=z, multipliers=mult, eq_multipliers=eq_mult, iterations=self.iterations, mu=mu,
            kkt_residual=self.kkt_residual(z, mu, eq_mult), stages=stages)
