"""Solvers for the gradient-constrained elliptic problem.

Two routes to the same constrained solution:

* `solve_penalized` — the production path.  The pointwise bound
  |D^sigma u| <= g is replaced by an added diffusion coefficient
  kappa = k_eps(|D^sigma u|^2 - g^2) with the piecewise-linear capped
  penalty k_eps, driven to zero over a geometric eps ladder with warm
  starts.  Each level runs a damped lagged-coefficient (Picard) iteration
  whose inner linear solves are matrix-free Krylov iterations
  preconditioned by the inverse fractional Laplacian.  The penalty
  density at the final level is the discrete Lagrange multiplier
  approximant; its L1 norm, the constraint violation and the
  complementarity pairing are recorded together with the a-priori bounds
  they must satisfy.

* `solve_primal_dual` — an independent first-order oracle for symmetric
  coefficients, iterating pointwise ball projections of the dual variable
  against proximal (shifted elliptic) primal solves.

Dirichlet conditions are enforced by hard masking: every operator
application projects to zero off the domain, which keeps the operator
symmetric positive on the masked subspace.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, lgmres

from .checks import EstimateCheck
from .errors import CoercivityViolation, NonConvergence, NotSymmetric, ValidationError
from .field_core import (DomainMask, Grid, NormSuite, ScalarField, VectorField,
                         lp_norm, random_smooth_field)
from .riesz_ops import FracOrder, div_apply, grad_apply, symbol_table

# ---------------------------------------------------------------------------
# problem data


@dataclass
class Coefficients:
    """Coefficient matrix A(x) with its coercivity/boundedness audit.

    `entries` is either a constant (dim, dim) matrix or a per-node array
    of shape (dim, dim, *grid.shape).  The audit verifies at every node
    that the symmetric part has smallest eigenvalue >= a_star and that
    the operator norm is <= a_upper.
    """

    grid: Grid
    entries: np.ndarray
    a_star: float
    a_upper: float
    symmetric: bool = dc_field(init=False)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        d = self.grid.dim
        if self.entries.shape not in ((d, d), (d, d) + self.grid.shape):
            raise ValidationError(f"coefficient entries must have shape ({d},{d}[,nodes])")
        if self.a_star <= 0 or self.a_upper <= 0:
            raise ValidationError("a_star and a_upper must be positive")
        self.symmetric = bool(np.array_equal(self.entries, self._transposed()))
        self.is_identity = self.entries.shape == (d, d) and np.array_equal(self.entries, np.eye(d))
        self.audit()

    def _transposed(self):
        return np.swapaxes(self.entries, 0, 1)

    def audit(self) -> None:
        """Raise unless coercivity and boundedness hold pointwise."""
        A = self.entries
        tol = 1e-12 * max(1.0, self.a_upper)
        if self.grid.dim == 1:
            lam_min = A[0, 0]
            op_norm = np.abs(A[0, 0])
        else:
            S = 0.5 * (A + self._transposed())
            tr_half = 0.5 * (S[0, 0] + S[1, 1])
            disc = np.sqrt((0.5 * (S[0, 0] - S[1, 1])) ** 2 + S[0, 1] ** 2)
            lam_min = tr_half - disc
            # spectral norm via the Gram matrix of the 2x2 block
            G00 = A[0, 0] ** 2 + A[1, 0] ** 2
            G11 = A[0, 1] ** 2 + A[1, 1] ** 2
            G01 = A[0, 0] * A[0, 1] + A[1, 0] * A[1, 1]
            gmax = 0.5 * (G00 + G11) + np.sqrt((0.5 * (G00 - G11)) ** 2 + G01 ** 2)
            op_norm = np.sqrt(gmax)
        if np.min(lam_min) < self.a_star - tol:
            raise ValidationError(
                f"coercivity audit failed: min eigenvalue of symmetric part "
                f"{np.min(lam_min):.6g} < a_star={self.a_star}")
        if np.max(op_norm) > self.a_upper + tol:
            raise ValidationError(
                f"boundedness audit failed: operator norm {np.max(op_norm):.6g} "
                f"> a_upper={self.a_upper}")

    def apply(self, p: np.ndarray) -> np.ndarray:
        """A(x) p for a component stack p of shape (dim, *grid.shape)."""
        if self.is_identity:
            return p
        if self.entries.ndim == 2:
            if self.grid.dim == 1:
                return self.entries[0, 0] * p
            return np.einsum("ij,j...->i...", self.entries, p)
        return np.einsum("ij...,j...->i...", self.entries, p)


def identity_coefficients(grid: Grid) -> Coefficients:
    return Coefficients(grid, np.eye(grid.dim), a_star=1.0, a_upper=1.0)


def diagonal_coefficients(grid: Grid, diag) -> Coefficients:
    d = np.atleast_1d(np.asarray(diag, dtype=float))
    if d.size != grid.dim:
        raise ValidationError(f"diagonal needs {grid.dim} entries, got {d.size}")
    return Coefficients(grid, np.diag(d), a_star=float(d.min()), a_upper=float(d.max()))


def rotation_coefficients(grid: Grid, angle: float, a_star: float, a_upper: float) -> Coefficients:
    """Nonsymmetric test matrix s*R(angle) with symmetric part a_star*Id.

    The scale s = a_star / cos(angle) is also the operator norm, so the
    declared a_upper must dominate it.
    """
    if grid.dim != 2:
        raise ValidationError("rotation coefficients require dim = 2")
    c = np.cos(angle)
    if c <= 0:
        raise ValidationError("rotation angle must satisfy cos(angle) > 0 for coercivity")
    s = a_star / c
    if s > a_upper * (1 + 1e-12):
        raise ValidationError(
            f"rotation({angle}) has operator norm {s:.6g} > a_upper={a_upper}")
    A = s * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    return Coefficients(grid, A, a_star=a_star, a_upper=a_upper)


@dataclass
class Obstacle:
    """Gradient threshold g on the whole box, with its positivity regime.

    regime "uniform": 0 < g_star <= g <= g_upper everywhere (the strong
    assumption used by the multiplier theory).  regime "local": g >= 0
    with a recorded strictly positive lower bound on the working ball.
    """

    g: ScalarField
    g_star: float = dc_field(init=False)
    g_upper: float = dc_field(init=False)
    regime: str = dc_field(init=False)
    ball_radius: float | None = None
    ball_lower: float = dc_field(init=False, default=0.0)

    def __post_init__(self):
        gv = self.g.values
        if np.min(gv) < 0:
            raise ValidationError("obstacle must be nonnegative")
        self.g_star = float(np.min(gv))
        self.g_upper = float(np.max(gv))
        if self.g_star > 0:
            self.regime = "uniform"
            self.ball_lower = self.g_star
        else:
            if self.ball_radius is None:
                raise ValidationError(
                    "obstacle has zeros: need a strictly positive lower bound "
                    "on a working ball (pass ball_radius) or a uniformly "
                    "positive threshold")
            pts = self.g.grid.coords()
            r = np.sqrt(sum(x ** 2 for x in pts))
            inside = r <= self.ball_radius
            low = float(np.min(gv[inside]))
            if low <= 0:
                raise ValidationError(
                    f"obstacle is not strictly positive on the ball of radius "
                    f"{self.ball_radius}")
            self.regime = "local"
            self.ball_lower = low

    @property
    def positive_lower(self) -> float:
        """g_star in the uniform regime, else the recorded ball bound."""
        return self.ball_lower


@dataclass
class SourceData:
    """Scalar source supported in the domain plus a vector source on the box."""

    f_sharp: ScalarField
    f_vec: VectorField
    norms: dict = dc_field(init=False)

    def __post_init__(self):
        w = self.f_sharp.grid.cell_volume
        mag = self.f_vec.magnitude()
        self.norms = {
            "f_sharp_l1": lp_norm(self.f_sharp.values, 1.0, w),
            "f_sharp_l2": lp_norm(self.f_sharp.values, 2.0, w),
            "f_vec_l1": float(np.sum(mag) * w),
            "f_vec_l2": float(np.sqrt(np.sum(mag ** 2) * w)),
        }
        if not all(np.isfinite(v) for v in self.norms.values()):
            raise ValidationError("source data has non-finite norms")


@dataclass
class ProblemSpec:
    """One full instance of the constrained problem."""

    grid: Grid
    mask: DomainMask
    coeffs: Coefficients
    data: SourceData
    obstacle: Obstacle
    sigma: FracOrder

    def __post_init__(self):
        if isinstance(self.sigma, (int, float)):
            self.sigma = FracOrder(float(self.sigma))
        for other, what in ((self.mask.grid, "mask"), (self.coeffs.grid, "coefficients"),
                            (self.data.f_sharp.grid, "f_sharp"),
                            (self.data.f_vec.grid, "f_vec"), (self.obstacle.g.grid, "obstacle")):
            if other is not self.grid and other != self.grid:
                raise ValidationError(f"{what} lives on a different grid")
        off = ~self.mask.indicator
        if np.any(self.data.f_sharp.values[off] != 0.0):
            raise ValidationError("f_sharp must be supported in the domain")

    def with_data(self, data: SourceData) -> "ProblemSpec":
        return ProblemSpec(self.grid, self.mask, self.coeffs, data, self.obstacle, self.sigma)

    def with_obstacle(self, obstacle: Obstacle) -> "ProblemSpec":
        return ProblemSpec(self.grid, self.mask, self.coeffs, self.data, obstacle, self.sigma)

    def with_sigma(self, sigma) -> "ProblemSpec":
        return ProblemSpec(self.grid, self.mask, self.coeffs, self.data, self.obstacle,
                           FracOrder(float(sigma) if not isinstance(sigma, FracOrder) else sigma.sigma))

    def rhs_array(self) -> np.ndarray:
        """Strong-form right side restricted to the domain: f_# - D^sigma . f."""
        table = symbol_table(self.grid, self.sigma)
        divf = div_apply(self.data.f_vec.components, table)
        return np.where(self.mask.indicator, self.data.f_sharp.values - divf, 0.0)

    def linear_form(self, v: ScalarField) -> float:
        """<f', v> = int f_# v + int f . D^sigma v."""
        w = self.grid.cell_volume
        table = symbol_table(self.grid, self.sigma)
        dv = grad_apply(v.values, table)
        return float((np.sum(self.data.f_sharp.values * v.values)
                      + np.sum(self.data.f_vec.components * dv)) * w)


@dataclass
class PenaltySchedule:
    """Geometric eps ladder and the iteration/tolerance knobs of one solve."""

    eps_initial: float = 0.1
    factor: float = 0.5
    levels: int = 10
    picard_tol: float = 1e-8
    picard_max_iters: int = 200
    damping: float = 0.7
    krylov_tol: float = 1e-10
    krylov_max_iters: int = 5000

    def __post_init__(self):
        if not 0.0 < self.eps_initial < 1.0:
            raise ValidationError("eps_initial must lie in (0, 1)")
        if not 0.0 < self.factor < 1.0:
            raise ValidationError("factor must lie in (0, 1)")
        if self.levels < 1:
            raise ValidationError("levels must be >= 1")
        if min(self.picard_tol, self.krylov_tol) <= 0 or not 0.0 < self.damping <= 1.0:
            raise ValidationError("tolerances must be positive and damping in (0, 1]")

    def eps_values(self) -> list[float]:
        return [self.eps_initial * self.factor ** k for k in range(self.levels)]


@dataclass
class PDConfig:
    """Knobs of the first-order primal-dual oracle."""

    max_iters: int = 40000
    tol: float = 1e-9
    check_every: int = 25
    active_tol: float = 1e-3
    step_balance: float = 1.0
    krylov_tol: float = 1e-11


@dataclass
class LevelRecord:
    """Per-eps-level diagnostics of the penalized continuation.

    `pairings_vec[i]` is int kappa D^sigma u . D^sigma phi_i and
    `pairings_scalar[i]` is int kappa phi_i for the caller's test panel.
    """

    eps: float
    picard_iters: int
    krylov_iters: int
    rel_change: float
    violation_sup: float
    violation_measure: float
    kappa_l1: float
    comp_signed: float
    comp_abs: float
    energy: float
    damping_final: float
    pairings_vec: list = dc_field(default_factory=list)
    pairings_scalar: list = dc_field(default_factory=list)
    u_snapshot: np.ndarray | None = None


@dataclass
class SolveReport:
    """Converged fields with every diagnostic the estimates need."""

    u: ScalarField
    lambda_eps: ScalarField
    gamma: ScalarField
    Lambda: VectorField
    norms: dict
    constraint_violation_sup: float
    complementarity_residual: float
    complementarity_abs: float
    energy_residual: float
    iterations: list
    levels: list
    wall_time: float
    solver: str
    converged: bool
    eps_final: float | None
    c_sigma: float
    c_star: float
    seed: int
    apriori: list
    extras: dict = dc_field(default_factory=dict)

    def scalar_summary(self) -> dict:
        """Flat mapping of every deterministic scalar in the report."""
        out = {
            "solver": self.solver,
            "converged": self.converged,
            "constraint_violation_sup": self.constraint_violation_sup,
            "complementarity_residual": self.complementarity_residual,
            "complementarity_abs": self.complementarity_abs,
            "energy_residual": self.energy_residual,
            "eps_final": self.eps_final if self.eps_final is not None else float("nan"),
            "c_sigma": self.c_sigma,
            "c_star": self.c_star,
            "seed": self.seed,
        }
        for name, ns in self.norms.items():
            if isinstance(ns, NormSuite):
                out[f"{name}.l1"] = ns.l1
                out[f"{name}.l2"] = ns.l2
                out[f"{name}.linf"] = ns.linf
                out[f"{name}.h_sigma"] = ns.h_sigma
            else:
                out[name] = ns
        for chk in self.apriori:
            out[f"check.{chk.name}.lhs"] = chk.lhs
            out[f"check.{chk.name}.rhs"] = chk.rhs
            out[f"check.{chk.name}.passed"] = chk.passed
        for k, v in self.extras.items():
            if isinstance(v, (int, float, bool, str)):
                out[f"extra.{k}"] = v
        return out


# ---------------------------------------------------------------------------
# penalty function

def penalty_k(t, eps: float):
    """Capped linear penalty: 0 for t<=0, t/eps up to 1/eps, then 1/eps^2."""
    if not 0.0 < eps < 1.0:
        raise ValidationError(f"penalty eps must lie in (0, 1), got {eps}")
    return np.clip(t, 0.0, 1.0 / eps) / eps


def penalty_primitive(t, eps: float):
    """Antiderivative of penalty_k vanishing on t <= 0."""
    if not 0.0 < eps < 1.0:
        raise ValidationError(f"penalty eps must lie in (0, 1), got {eps}")
    tc = np.clip(t, 0.0, 1.0 / eps)
    return tc * tc / (2.0 * eps) + np.maximum(t - 1.0 / eps, 0.0) / eps ** 2


# ---------------------------------------------------------------------------
# operator context and Krylov machinery

class _OperatorContext:
    """Precomputed symbols, mask and coefficient action for one solve."""

    def __init__(self, spec: ProblemSpec, krylov_tol: float, krylov_max_iters: int):
        self.spec = spec
        self.grid = spec.grid
        self.mask = spec.mask.indicator
        self.table = symbol_table(spec.grid, spec.sigma)
        self.sym = spec.coeffs.symmetric
        self.w = spec.grid.cell_volume
        self.tol = krylov_tol
        self.maxiter = krylov_max_iters
        self.krylov_iters = 0
        # rfft half-spectrum duplicate weights for Parseval sums
        dup = np.full(self.table.lap.shape, 2.0)
        dup[..., 0] = 1.0
        dup[..., -1] = 1.0
        self._dup = dup

    def h_sigma_sq(self, values: np.ndarray) -> float:
        """||D^sigma v||_{L2}^2 evaluated spectrally (one transform)."""
        spec = np.fft.rfftn(values)
        power = spec.real ** 2 + spec.imag ** 2
        return float(np.sum(self._dup * self.table.lap * power)
                     * self.w / self.grid.num_nodes)

    def grad(self, values: np.ndarray) -> np.ndarray:
        return grad_apply(values, self.table)

    def div(self, components: np.ndarray) -> np.ndarray:
        return div_apply(components, self.table)

    def op(self, values: np.ndarray, kappa: np.ndarray | None, shift: float = 0.0) -> np.ndarray:
        """mask(-D^sigma.((A + kappa I) D^sigma u) + shift*u); identity off-mask."""
        vm = np.where(self.mask, values, 0.0)
        p = self.grad(vm)
        if self.spec.coeffs.is_identity:
            q = p if kappa is None else (1.0 + kappa) * p
        else:
            q = self.spec.coeffs.apply(p)
            if kappa is not None:
                q = q + kappa * p
        out = -self.div(q)
        if shift:
            out = out + shift * vm
        return np.where(self.mask, out, values)

    def precond(self, shift: float = 0.0) -> np.ndarray:
        denom = self.table.lap + shift
        safe = np.where(denom > 0, denom, 1.0)
        return np.where(denom > 0, 1.0 / safe, 0.0)

    def solve(self, kappa: np.ndarray | None, rhs: np.ndarray, x0: np.ndarray | None,
              shift: float = 0.0, tol: float | None = None) -> np.ndarray:
        tol = self.tol if tol is None else tol
        grid = self.grid
        axes = tuple(range(grid.dim))
        pm = self.precond(shift)
        # symmetric diagonal split absorbing the penalty spikes
        if kappa is None:
            scale = None
        else:
            scale = 1.0 / np.sqrt(self.spec.coeffs.a_star + kappa)

        def matvec(v):
            return self.op(v.reshape(grid.shape), kappa, shift).ravel()

        def psolve(r):
            rm = np.where(self.mask, r.reshape(grid.shape), 0.0)
            if scale is not None:
                rm = rm * scale
            z = np.fft.irfftn(pm * np.fft.rfftn(rm), s=grid.shape, axes=axes)
            if scale is not None:
                z = z * scale
            return np.where(self.mask, z, r.reshape(grid.shape)).ravel()

        N = grid.num_nodes
        A = LinearOperator((N, N), matvec=matvec)
        M = LinearOperator((N, N), matvec=psolve)
        count = [0]

        def cb(_):
            count[0] += 1

        b = rhs.ravel()
        x0v = None if x0 is None else x0.ravel()
        if self.sym:
            sol, info = cg(A, b, x0=x0v, rtol=tol, atol=0.0, maxiter=self.maxiter, M=M, callback=cb)
        else:
            sol, info = lgmres(A, b, x0=x0v, rtol=tol, atol=0.0, maxiter=self.maxiter, M=M, callback=cb)
        self.krylov_iters += count[0]
        if info != 0:
            res = float(np.linalg.norm(matvec(sol) - b) / max(np.linalg.norm(b), 1e-300))
            raise NonConvergence("linear solve stalled", residual=res, iterations=count[0])
        return sol.reshape(grid.shape)


def apply_operator(u: ScalarField, spec: ProblemSpec, kappa: ScalarField | None = None) -> ScalarField:
    """Restriction to the domain of -D^sigma.((A + kappa I) D^sigma u)."""
    ctx = _OperatorContext(spec, 1.0, 1)
    kv = None if kappa is None else kappa.values
    vm = np.where(ctx.mask, u.values, 0.0)
    p = ctx.grad(vm)
    q = spec.coeffs.apply(p)
    if kv is not None:
        q = q + kv * p
    out = np.where(ctx.mask, -ctx.div(q), 0.0)
    return ScalarField(spec.grid, out)


def solve_linear(spec: ProblemSpec, kappa: ScalarField | None, rhs: ScalarField, *,
                 tol: float = 1e-10, max_iters: int = 5000,
                 x0: ScalarField | None = None) -> ScalarField:
    """Masked solve of -D^sigma.((A + kappa I) D^sigma u) = rhs.

    Conjugate gradients for symmetric coefficients (kappa held frozen),
    LGMRES otherwise, both preconditioned by the masked inverse
    fractional Laplacian.
    """
    if kappa is not None and np.min(kappa.values) < 0:
        raise CoercivityViolation("kappa must be nonnegative")
    ctx = _OperatorContext(spec, tol, max_iters)
    rhs_m = np.where(ctx.mask, rhs.values, 0.0)
    sol = ctx.solve(None if kappa is None else kappa.values, rhs_m,
                    None if x0 is None else x0.values)
    return ScalarField(spec.grid, sol)


# ---------------------------------------------------------------------------
# empirically measured constants for the a-priori bounds

def dual_exponents(dim: int, sigma: float) -> tuple[float, float]:
    """Exponent pair (q, q') used to pair f_# against the solution.

    Above the embedding threshold 2*sigma > dim the pairing is L1 x Linf;
    at the threshold any conjugate pair works and (4/3, 4) is used.
    """
    if 2.0 * sigma > dim:
        return 1.0, np.inf
    if 2.0 * sigma == dim:
        return 4.0 / 3.0, 4.0
    return 2.0 * dim / (dim + 2.0 * sigma), 2.0 * dim / (dim - 2.0 * sigma)


def measure_sobolev_constant(grid: Grid, mask: DomainMask, sigma: float, *,
                             n_fields: int = 100, seed: int = 0,
                             safety: float = 2.0,
                             extra_fields: list | None = None) -> tuple[float, float]:
    """Empirical Sobolev constant sup ||v||_{L^{q'}} / ||D^sigma v||_{L^2}.

    Maximized over seeded random smooth fields supported in the domain
    (plus any caller-supplied candidates) and multiplied by a safety
    factor, since the true constant is a supremum over the whole space.
    Returns (safety * measured, measured).
    """
    rng = np.random.default_rng(seed)
    _, p_star = dual_exponents(grid.dim, sigma)
    table = symbol_table(grid, sigma)
    w = grid.cell_volume
    best = 0.0
    candidates = [random_smooth_field(grid, rng, mask).values for _ in range(n_fields)]
    for f in extra_fields or []:
        candidates.append(np.asarray(f))
    for v in candidates:
        dv = grad_apply(v, table)
        h = np.sqrt(np.sum(dv ** 2) * w)
        if h == 0:
            continue
        best = max(best, lp_norm(v, p_star, w) / h)
    return safety * best, best


def c_sigma_bound(spec: ProblemSpec, c_star: float) -> float:
    """Data-side bound on ||u||_{H^sigma}: (C_*/a_*)||f_#||_{2#} + ||f||_2/a_*."""
    q, _ = dual_exponents(spec.grid.dim, spec.sigma.sigma)
    w = spec.grid.cell_volume
    f_sharp_q = lp_norm(spec.data.f_sharp.values, q, w)
    return (c_star / spec.coeffs.a_star) * f_sharp_q \
        + spec.data.norms["f_vec_l2"] / spec.coeffs.a_star


# ---------------------------------------------------------------------------
# penalized continuation

def _energy(ctx: _OperatorContext, spec: ProblemSpec, u: np.ndarray, rhs: np.ndarray,
            eps: float, g2: np.ndarray) -> float:
    p = ctx.grad(np.where(ctx.mask, u, 0.0))
    ap = spec.coeffs.apply(p)
    m2 = np.sum(p * p, axis=0)
    quad = 0.5 * np.sum(np.sum(ap * p, axis=0))
    pen = 0.5 * np.sum(penalty_primitive(m2 - g2, eps))
    load = np.sum(rhs * u)
    return float((quad + pen - load) * ctx.w)


def _nonlinear_residual(ctx: _OperatorContext, u: np.ndarray, rhs: np.ndarray,
                        eps: float, g2: np.ndarray) -> float:
    p = ctx.grad(np.where(ctx.mask, u, 0.0))
    kap = penalty_k(np.sum(p * p, axis=0) - g2, eps)
    r = ctx.op(u, kap) - rhs
    return float(np.linalg.norm(np.where(ctx.mask, r, 0.0))
                 / max(np.linalg.norm(rhs), 1e-300))


def extract_multiplier(u_eps: ScalarField, spec: ProblemSpec, eps: float) -> ScalarField:
    """Penalty density k_eps(|D^sigma u|^2 - g^2): the multiplier approximant."""
    table = symbol_table(spec.grid, spec.sigma)
    p = grad_apply(np.where(spec.mask.indicator, u_eps.values, 0.0), table)
    t = np.sum(p * p, axis=0) - spec.obstacle.g.values ** 2
    return ScalarField(spec.grid, penalty_k(t, eps))


def compute_gamma(spec: ProblemSpec, u: ScalarField, *, tol: float = 1e-10,
                  max_iters: int = 5000) -> ScalarField:
    """Hilbertian potential: D^sigma-Poisson solve of the residual functional.

    gamma is supported in the domain and satisfies
    int D^sigma gamma . D^sigma v = <f', v> - int A D^sigma u . D^sigma v
    for every test field v supported in the domain.
    """
    ident = ProblemSpec(spec.grid, spec.mask, identity_coefficients(spec.grid),
                        spec.data, spec.obstacle, spec.sigma)
    ctx = _OperatorContext(ident, tol, max_iters)
    rhs = spec.rhs_array() - apply_operator(u, spec).values
    rhs = np.where(ctx.mask, rhs, 0.0)
    if np.linalg.norm(rhs) == 0.0:
        return ScalarField(spec.grid, np.zeros(spec.grid.shape))
    sol = ctx.solve(None, rhs, None)
    return ScalarField(spec.grid, np.where(ctx.mask, sol, 0.0))


def _assemble_report(spec: ProblemSpec, ctx: _OperatorContext, u: np.ndarray,
                     rhs: np.ndarray, eps_final: float | None, lam: np.ndarray,
                     levels: list, iterations: list, wall: float, solver: str,
                     seed: int, c_star_pair: tuple[float, float],
                     energy_residual: float, extras: dict) -> SolveReport:
    sigma = spec.sigma.sigma
    g = spec.obstacle.g.values
    w = ctx.w
    uf = ScalarField(spec.grid, np.where(ctx.mask, u, 0.0))
    du = ctx.grad(uf.values)
    mag = np.sqrt(np.sum(du ** 2, axis=0))
    lam_f = ScalarField(spec.grid, lam)
    Lambda = VectorField(spec.grid, lam * du)
    gamma = compute_gamma(spec, uf, tol=ctx.tol, max_iters=ctx.maxiter)
    viol = float(np.max(mag - g))
    comp_signed = float(np.sum(lam * (g - mag)) * w)
    comp_abs = float(np.sum(lam * np.abs(g - mag)) * w)

    from .field_core import norms as field_norms
    nrm = {
        "u": field_norms(uf, sigma),
        "lambda_eps": field_norms(lam_f, sigma),
        "gamma": field_norms(gamma, sigma),
        "Lambda_l1": float(np.sum(np.sqrt(np.sum(Lambda.components ** 2, axis=0))) * w),
        "grad_sup": float(np.max(mag)),
    }
    nrm.update({f"data.{k}": v for k, v in spec.data.norms.items()})

    c_star, c_star_raw = c_star_pair
    c_sig = c_sigma_bound(spec, c_star)
    a_star = spec.coeffs.a_star
    g_low = spec.obstacle.positive_lower
    apriori = [
        EstimateCheck.compare("solution_h_sigma_bound", nrm["u"].h_sigma, c_sig,
                              context={"eps": eps_final, "sigma": sigma}),
        EstimateCheck.compare("multiplier_l1_bound", nrm["lambda_eps"].l1,
                              a_star * c_sig ** 2 / (2.0 * g_low ** 2),
                              context={"eps": eps_final, "sigma": sigma}),
    ]
    return SolveReport(
        u=uf, lambda_eps=lam_f, gamma=gamma, Lambda=Lambda, norms=nrm,
        constraint_violation_sup=max(viol, 0.0),
        complementarity_residual=comp_signed,
        complementarity_abs=comp_abs,
        energy_residual=energy_residual,
        iterations=iterations, levels=levels, wall_time=wall, solver=solver,
        converged=True, eps_final=eps_final, c_sigma=c_sig, c_star=c_star,
        seed=seed, apriori=apriori,
        extras=dict(extras, c_star_raw=c_star_raw),
    )


def solve_penalized(spec: ProblemSpec, schedule: PenaltySchedule | None = None, *,
                    seed: int = 0, panel: list | None = None,
                    store_levels: bool = False,
                    c_star: float | None = None) -> SolveReport:
    """Penalization route: eps continuation over damped Picard iterations.

    Each level freezes kappa = k_eps(|D^sigma u|^2 - g^2), solves the
    linearized problem, and damps the update; the damping is halved
    whenever the level energy (symmetric coefficients) or the nonlinear
    residual (nonsymmetric) would increase.  Levels warm-start from the
    previous solution.  `panel` is an optional list of test fields
    against which the per-level multiplier pairings are recorded.
    """
    schedule = schedule or PenaltySchedule()
    if spec.obstacle.positive_lower <= 0:
        raise ValidationError("penalized solve needs a strictly positive obstacle "
                              "lower bound (uniform or recorded on a ball)")
    if schedule.picard_max_iters < 1:
        raise ValidationError("picard_max_iters must be >= 1")
    t0 = time.perf_counter()
    ctx = _OperatorContext(spec, schedule.krylov_tol, schedule.krylov_max_iters)
    rhs = spec.rhs_array()
    g = spec.obstacle.g.values
    g2 = g * g
    if c_star is None:
        c_pair = measure_sobolev_constant(spec.grid, spec.mask, spec.sigma.sigma, seed=seed)
    else:
        c_pair = (c_star, c_star)

    def merit(v: np.ndarray, eps: float) -> float:
        if ctx.sym:
            return _energy(ctx, spec, v, rhs, eps, g2)
        return _nonlinear_residual(ctx, v, rhs, eps, g2)

    u = ctx.solve(None, rhs, None)
    iterations = []
    levels: list[LevelRecord] = []
    panel_grads = None
    if panel:
        panel_grads = [ctx.grad(np.where(ctx.mask, phi.values, 0.0)) for phi in panel]

    eps = None
    # merit slack per accepted step; kept at rounding level so the line
    # search is forced to damp the free-boundary flip modes
    slack = 1e-14
    stall_window = 8
    stall_tol = 3e-13
    aa_depth = 3
    for level, eps in enumerate(schedule.eps_values()):
        m_curr = merit(u, eps)
        k0 = ctx.krylov_iters
        rel = np.inf
        converged = False
        stall = 0
        damping = schedule.damping
        d_start = schedule.damping
        hist_u: list[np.ndarray] = []
        hist_r: list[np.ndarray] = []
        for it in range(schedule.picard_max_iters):
            p = ctx.grad(np.where(ctx.mask, u, 0.0))
            kap = penalty_k(np.sum(p * p, axis=0) - g2, eps)
            if np.min(kap) < 0:
                raise CoercivityViolation("negative penalty coefficient")
            # inexact inner solves: the forcing tolerance tracks the outer
            # progress and tightens to the full krylov_tol as the level
            # converges, so accepted final iterates are at full precision
            tol_k = max(schedule.krylov_tol, min(1e-3, 0.01 * rel))
            unew = ctx.solve(kap, rhs, u, tol=tol_k)
            # backtracking line search on the level merit: halve until the
            # step stops increasing it (the energy is convex for symmetric
            # A, so this always terminates with a descent step); start from
            # twice the previously accepted damping
            damping = d_start
            while damping > 1e-6:
                cand = (1.0 - damping) * u + damping * unew
                m_cand = merit(cand, eps)
                if m_cand <= m_curr + slack * max(1.0, abs(m_curr)):
                    break
                damping *= 0.5
            d_start = min(schedule.damping, 2.0 * damping)
            # Anderson extrapolation through the damped-map history; the
            # candidate must pass the same monotone merit test, otherwise
            # the plain damped step stands
            hist_u.append(u.copy())
            hist_r.append(cand - u)
            if len(hist_u) > aa_depth + 1:
                hist_u.pop(0)
                hist_r.pop(0)
            if len(hist_u) >= 2:
                r_last = hist_r[-1].ravel()
                dR = np.stack([(hist_r[i] - hist_r[-1]).ravel()
                               for i in range(len(hist_r) - 1)], axis=1)
                beta, *_ = np.linalg.lstsq(dR, -r_last, rcond=None)
                mix = cand.copy()
                for i, b in enumerate(beta):
                    mix += b * ((hist_u[i] + hist_r[i]) - cand)
                m_mix = merit(mix, eps)
                if np.isfinite(m_mix) and m_mix <= m_curr + slack * max(1.0, abs(m_curr)) \
                        and m_mix < m_cand:
                    cand, m_cand = mix, m_mix
            rel = float(np.sqrt(ctx.h_sigma_sq(np.where(ctx.mask, cand - u, 0.0))
                                / max(ctx.h_sigma_sq(np.where(ctx.mask, cand, 0.0)), 1e-300)))
            drop = m_curr - m_cand
            u, m_curr = cand, m_cand
            if rel < schedule.picard_tol:
                converged = True
                break
            # merit floor: the iterate cycles at rounding amplitude around
            # the level minimizer (convexity bounds its distance), accept
            stall = stall + 1 if drop < stall_tol * max(1.0, abs(m_curr)) else 0
            if stall >= stall_window:
                converged = True
                break
        if not converged:
            raise NonConvergence("Picard iteration did not converge",
                                 residual=rel, iterations=schedule.picard_max_iters,
                                 level=level,
                                 last_iterate=ScalarField(spec.grid, np.where(ctx.mask, u, 0.0)))
        p = ctx.grad(np.where(ctx.mask, u, 0.0))
        mag2 = np.sum(p * p, axis=0)
        t = mag2 - g2
        kap = penalty_k(t, eps)
        mag = np.sqrt(mag2)
        pair_vec, pair_scalar = [], []
        if panel_grads is not None:
            for phi, dphi in zip(panel, panel_grads):
                pair_vec.append(float(np.sum(kap * np.sum(p * dphi, axis=0)) * ctx.w))
                pair_scalar.append(float(np.sum(kap * phi.values) * ctx.w))
        rec = LevelRecord(
            eps=eps,
            picard_iters=it + 1,
            krylov_iters=ctx.krylov_iters - k0,
            rel_change=rel,
            violation_sup=float(max(np.max(mag - g), 0.0)),
            violation_measure=float(np.sum(t > np.sqrt(eps)) * ctx.w),
            kappa_l1=float(np.sum(kap) * ctx.w),
            comp_signed=float(np.sum(kap * (g - mag)) * ctx.w),
            comp_abs=float(np.sum(kap * np.abs(g - mag)) * ctx.w),
            energy=_energy(ctx, spec, u, rhs, eps, g2) if ctx.sym else float("nan"),
            damping_final=damping,
            pairings_vec=pair_vec,
            pairings_scalar=pair_scalar,
            u_snapshot=u.copy() if store_levels else None,
        )
        levels.append(rec)
        iterations.append((it + 1, ctx.krylov_iters - k0))

    lam = penalty_k(np.sum(ctx.grad(np.where(ctx.mask, u, 0.0)) ** 2, axis=0) - g2, eps)
    energy_res = _nonlinear_residual(ctx, u, rhs, eps, g2)
    wall = time.perf_counter() - t0
    return _assemble_report(spec, ctx, u, rhs, eps, lam, levels, iterations, wall,
                            "penalized", seed, c_pair, energy_res,
                            extras={"krylov_total": ctx.krylov_iters})


# ---------------------------------------------------------------------------
# primal-dual oracle (symmetric coefficients)

def _operator_norm_bound(spec: ProblemSpec) -> float:
    """Exact spectral norm of the masked gradient: (2*pi*|xi|_max)^sigma."""
    grid = spec.grid
    xi_max = np.sqrt(grid.dim) * grid.n / (4.0 * grid.half_length)
    return (2.0 * np.pi * xi_max) ** spec.sigma.sigma


def solve_primal_dual(spec: ProblemSpec, config: PDConfig | None = None, *,
                      seed: int = 0, c_star: float | None = None) -> SolveReport:
    """First-order primal-dual solve of the constrained convex problem.

    Dual update: pointwise shrink of the running gradient variable to the
    ball of radius g (the projection residual is the multiplier charge).
    Primal update: proximal elliptic solve with shift 1/tau.  Requires
    symmetric coefficients so the problem is a convex minimization.
    """
    config = config or PDConfig()
    if not spec.coeffs.symmetric:
        raise NotSymmetric("primal-dual oracle requires symmetric coefficients")
    t0 = time.perf_counter()
    ctx = _OperatorContext(spec, config.krylov_tol, 10000)
    rhs = spec.rhs_array()
    g = spec.obstacle.g.values
    if c_star is None:
        c_pair = measure_sobolev_constant(spec.grid, spec.mask, spec.sigma.sigma, seed=seed)
    else:
        c_pair = (c_star, c_star)

    Kn = _operator_norm_bound(spec)
    tau_d = config.step_balance / Kn
    tau_p = 1.0 / (config.step_balance * Kn)
    shift = 1.0 / tau_p

    u = ctx.solve(None, rhs, None)
    ubar = u.copy()
    q = np.zeros((spec.grid.dim,) + spec.grid.shape)
    rhs_norm = max(np.linalg.norm(rhs), 1e-300)
    gap = np.inf
    it = 0
    for it in range(1, config.max_iters + 1):
        w = q + tau_d * ctx.grad(np.where(ctx.mask, ubar, 0.0))
        wmag = np.sqrt(np.sum(w * w, axis=0))
        scale = np.minimum(1.0, tau_d * g / np.where(wmag > 0, wmag, 1.0))
        q = w * (1.0 - scale)
        u_old = u
        # prox step: (shift + L_A) u = shift*(u_old) - K^T q + rhs
        prox_rhs = np.where(ctx.mask, shift * u_old + ctx.div(q) + rhs, 0.0)
        u = ctx.solve(None, prox_rhs, u_old, shift=shift)
        ubar = 2.0 * u - u_old
        if it % config.check_every == 0:
            du = ctx.grad(np.where(ctx.mask, u, 0.0))
            mag = np.sqrt(np.sum(du * du, axis=0))
            stat = ctx.op(u, None) - np.where(ctx.mask, ctx.div(q), 0.0) - rhs
            r_stat = np.linalg.norm(np.where(ctx.mask, stat, 0.0)) / rhs_norm
            r_feas = max(float(np.max(mag - g)), 0.0) / max(spec.obstacle.g_upper, 1e-300)
            qmag = np.sqrt(np.sum(q * q, axis=0))
            r_comp = float(np.sum(qmag * np.maximum(g - mag, 0.0)) * ctx.w) \
                / max(float(np.sum(qmag * g) * ctx.w), 1e-300)
            gap = max(r_stat, r_feas, r_comp)
            if gap < config.tol:
                break
    if gap >= config.tol:
        raise NonConvergence("primal-dual iteration did not converge",
                             residual=float(gap), iterations=it,
                             last_iterate=ScalarField(spec.grid, np.where(ctx.mask, u, 0.0)))

    du = ctx.grad(np.where(ctx.mask, u, 0.0))
    mag = np.sqrt(np.sum(du * du, axis=0))
    qmag = np.sqrt(np.sum(q * q, axis=0))
    active = mag > g * (1.0 - config.active_tol)
    lam = np.where(active & (mag > 0), qmag / np.where(mag > 0, mag, 1.0), 0.0)
    wall = time.perf_counter() - t0
    return _assemble_report(spec, ctx, u, rhs, None, lam, [], [(it, ctx.krylov_iters)],
                            wall, "primal_dual", seed, c_pair,
                            energy_residual=float(gap),
                            extras={"pd_iters": it, "krylov_total": ctx.krylov_iters,
                                    "gap": float(gap)})
