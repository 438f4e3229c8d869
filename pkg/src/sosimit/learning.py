"""Imitation learning of certified polynomial state-feedback controllers.

Given demonstrations ``(x_t, u_t)`` of an expert driving a control-affine
polynomial system, fit a controller ``u = K(x) Z(x)`` minimizing the
empirical imitation loss

    J(K) = (1/N) * sum_t || K(x_t) Z(x_t) - u_t ||^2

subject to the closed loop being certifiably globally stable.  The
certificate is carried by factors ``(F, P)`` with ``K = F P^{-1}`` whose
coefficients satisfy the compiled Gram equalities of :mod:`sosimit.sos`
(P uniformly positive definite, decrease matrix uniformly negative
definite).  Two algorithms are provided:

* :func:`run_admm` — alternating method of multipliers on the bilinear
  coupling ``F(x) = K(x) P(xt)``: an unconstrained least-squares step in the
  ``K`` coefficients, a convex conic step in ``(F, P)`` and the Gram
  matrices, and a scaled dual update;
* :func:`run_pgd` — projected gradient descent directly on ``(F, P)``, with
  analytic gradients of the loss through ``K = F P^{-1}`` and a Euclidean
  projection onto the certified set after every step.

Both initialize their decision matrices from the same seeded stream (all
``P`` coefficient blocks first, upper triangle row-major and mirrored, then
all ``F`` blocks row-major, each entry uniform on ``[-h, h]``; ADMM then
draws its initial ``K`` blocks the same way), so runs are reproducible and
the two algorithms start from the same ``(F, P)`` point for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from . import conic
from .conic import ConeProblem, ConeSolution, SolverConfig
from .poly import Polynomial, PolyMatrix, SystemDef, basis, closed_loop
from .rng import SplitMix64
from .sos import GramConstraintSet, compile_constraints
from .verify import LyapunovCertificate

__all__ = [
    "AdmmConfig",
    "AdmmState",
    "ControllerCoeffs",
    "CertifiedFactors",
    "Dataset",
    "IndexSets",
    "LearnResult",
    "LossSpec",
    "PgdConfig",
    "admm_dual_step",
    "admm_fp_step",
    "admm_k_step",
    "cone_problem_from",
    "extract_controller",
    "find_certificate",
    "generate_data",
    "imitation_loss",
    "index_sets",
    "pgd_gradient",
    "pgd_project",
    "run_admm",
    "run_pgd",
]


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Dataset:
    """Expert demonstrations: states (N, n) and applied inputs (N, m)."""

    states: np.ndarray
    inputs: np.ndarray
    seed: int
    sigma: float
    box: float

    def __post_init__(self):
        if self.states.ndim != 2 or self.inputs.ndim != 2:
            raise ValueError("states and inputs must be 2-D arrays")
        if self.states.shape[0] != self.inputs.shape[0]:
            raise ValueError("states and inputs disagree on sample count")
        if np.max(np.abs(self.states)) > self.box:
            raise ValueError("states fall outside the sampling box")

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]


def generate_data(sys: SystemDef, expert: PolyMatrix, n_samples: int,
                  sigma: float = 1.0, box: float = 10.0,
                  seed: int = 0) -> Dataset:
    """Sample expert demonstrations with isotropic gaussian noise.

    States are uniform on ``[-box, box]^n`` (drawn row-major: all of sample
    0, then sample 1, ...); inputs are ``expert(x) Z(x) + e`` with
    ``e ~ N(0, sigma * I)`` — ``sigma`` is the noise *covariance* scale, so
    the per-component standard deviation is ``sqrt(sigma)`` and the best
    achievable imitation loss approaches ``sigma * m`` for large N.  The
    noise block is drawn after all states, also row-major.
    """
    if expert.rows != sys.m or expert.cols != sys.p:
        raise ValueError(f"expert must be {sys.m} x {sys.p}")
    rng = SplitMix64(seed)
    X = rng.uniform(n_samples * sys.n, -box, box).reshape(n_samples, sys.n)
    noise = rng.normal(n_samples * sys.m, scale=math.sqrt(sigma))
    noise = noise.reshape(n_samples, sys.m)
    U = _controller_outputs(expert, sys, X) + noise
    return Dataset(states=X, inputs=U, seed=seed, sigma=float(sigma),
                   box=float(box))


@dataclass(frozen=True)
class ControllerCoeffs:
    """Polynomial state-feedback gain: the control law is u = K(x) Z(x)."""

    K: PolyMatrix

    def __call__(self, x) -> np.ndarray:
        return self.K(x)

    def outputs(self, sys: SystemDef, X: np.ndarray) -> np.ndarray:
        return _controller_outputs(self.K, sys, X)


def _controller_outputs(K: PolyMatrix, sys: SystemDef, X: np.ndarray) -> np.ndarray:
    """u_t = K(x_t) Z(x_t) for each row of X; returns (N, m)."""
    Kv = K.eval_many(X)          # (N, m, p)
    Zv = sys.z_many(X)           # (N, p)
    return np.einsum("tij,tj->ti", Kv, Zv)


@dataclass(frozen=True)
class LossSpec:
    """Imitation objective description; only least squares ships.

    The ``regularizer`` hook is carried for interface completeness and must
    be ``None``.
    """

    kind: str = "least_squares"
    regularizer: Callable | None = None

    def __post_init__(self):
        if self.kind != "least_squares":
            raise NotImplementedError(f"loss kind {self.kind!r}")
        if self.regularizer is not None:
            raise NotImplementedError("regularizers are not supported")


def imitation_loss(K, sys: SystemDef, data: Dataset) -> float:
    """Mean squared imitation error of a controller on a dataset.

    ``K`` may be a :class:`ControllerCoeffs`, a PolyMatrix gain, or a
    callable ``x -> (m, p)`` gain matrix (the form returned by
    :func:`extract_controller` for state-dependent ``P``).
    """
    if isinstance(K, ControllerCoeffs):
        pred = K.outputs(sys, data.states)
    elif isinstance(K, PolyMatrix):
        pred = _controller_outputs(K, sys, data.states)
    else:
        Zv = sys.z_many(data.states)
        pred = np.stack([np.asarray(K(x)) @ z
                         for x, z in zip(data.states, Zv)])
    r = pred - data.inputs
    return float(np.mean(np.sum(r * r, axis=1)))


# ---------------------------------------------------------------------------
# coefficient coupling F(x) = K(x) P(xt)


@dataclass(frozen=True)
class IndexSets:
    """Monomial bookkeeping for the coupling F(x) = K(x) P(xt).

    ``sets[k]`` lists the pairs ``(i, j)`` with
    ``k_exponents[i] + p_exponents[j] == f_exponents[k]``, so the coupling
    reads ``F_k = sum_{(i,j) in sets[k]} K_i P_j`` coefficient-block-wise.
    """

    k_exponents: tuple
    p_exponents: tuple
    f_exponents: tuple
    sets: dict

    @property
    def d_k(self) -> int:
        return max((sum(e) for e in self.k_exponents), default=0)


def index_sets(sys: SystemDef, d_p: int, d_f: int) -> IndexSets:
    """Build the coupling index sets for degrees (d_K = d_F - d_P, d_P, d_F).

    Requires ``d_f >= d_p`` (otherwise no controller degree works); the
    controller family takes the maximal degree ``d_f - d_p`` so that every
    product ``K_i P_j`` lands inside the ``F`` family.
    """
    if d_f < d_p:
        raise ValueError(f"need d_f >= d_p to couple the families "
                         f"(got d_f={d_f}, d_p={d_p})")
    d_k = d_f - d_p
    k_exps = basis(sys.n, d_k).exponents
    p_exps = basis(sys.n, d_p, variables=sys.reduced_vars).exponents
    f_exps = basis(sys.n, d_f).exponents
    f_index = {e: k for k, e in enumerate(f_exps)}
    sets = {k: [] for k in range(len(f_exps))}
    for i, ke in enumerate(k_exps):
        for j, pe in enumerate(p_exps):
            prod = tuple(a + b for a, b in zip(ke, pe))
            sets[f_index[prod]].append((i, j))
    return IndexSets(k_exponents=k_exps, p_exponents=p_exps,
                     f_exponents=f_exps, sets=sets)


# ---------------------------------------------------------------------------
# certified factors and the cone bridge


@dataclass(frozen=True)
class CertifiedFactors:
    """Controller factorization K = F P^{-1} plus its Gram certificate.

    ``certified`` records that the conic solve met its tolerances; the
    authoritative check of the resulting Lyapunov certificate is
    :func:`sosimit.verify.check_certificate`.
    """

    F: PolyMatrix
    P: PolyMatrix
    Q1: np.ndarray
    Q2: np.ndarray
    f_exponents: tuple
    p_exponents: tuple
    certified: bool = False

    def coefficient_list(self):
        """(F blocks, P blocks) as dense arrays in family order."""
        fb = [np.asarray(self.F.coeffs.get(e, np.zeros((self.F.rows, self.F.cols))))
              for e in self.f_exponents]
        pb = [np.asarray(self.P.coeffs.get(e, np.zeros((self.P.rows, self.P.cols))))
              for e in self.p_exponents]
        return fb, pb


def cone_problem_from(gcs: GramConstraintSet) -> ConeProblem:
    """Translate compiled Gram equalities into a ConeProblem skeleton.

    Blocks mirror the decision layout (``Q2`` enters negated as the PSD
    block ``Q2n``); symmetric ``P`` blocks get explicit symmetry equalities.
    Folded upper-triangle weights are split evenly across the two mirrored
    entries so the rows read correctly for any (possibly non-symmetric)
    intermediate iterate.
    """
    lay = gcs.layout
    prob = ConeProblem()
    for b in lay.blocks:
        if b.kind == "nsd":
            prob.add_block(b.name + "n", b.rows, b.cols, cone="psd")
        elif b.kind == "psd":
            prob.add_block(b.name, b.rows, b.cols, cone="psd")
        else:
            prob.add_block(b.name, b.rows, b.cols, cone="free")

    def cone_terms(terms):
        out = []
        for (h, r, c, w) in terms:
            b = lay.blocks[h]
            name = b.name
            sign = 1.0
            if b.kind == "nsd":
                name, sign = b.name + "n", -1.0
            if r != c and b.rows == b.cols and b.kind != "full":
                out.append((name, r, c, sign * w / 2.0))
                out.append((name, c, r, sign * w / 2.0))
            else:
                out.append((name, r, c, sign * w))
        return out

    for eq in gcs.equalities:
        terms = [(n, r, c, -w) for (n, r, c, w) in cone_terms(eq.rhs)]
        terms += cone_terms(eq.lhs)
        prob.add_equality(terms, -eq.constant)
    for h in lay.p_handles:
        b = lay.blocks[h]
        for r in range(b.rows):
            for c in range(r + 1, b.cols):
                prob.add_equality([(b.name, r, c, 1.0), (b.name, c, r, -1.0)], 0.0)
    return prob


def _factors_from_solution(gcs: GramConstraintSet, sol: ConeSolution,
                           prune_tol: float = 1e-14) -> CertifiedFactors:
    lay = gcs.layout
    values = {}
    for b in lay.blocks:
        key = b.name + "n" if b.kind == "nsd" else b.name
        v = sol.values[key]
        values[b.handle] = -v if b.kind == "nsd" else v
    P = lay.build_P(values).prune(prune_tol)
    if lay.f_exponents:
        F = lay.build_F(values).prune(prune_tol)
    else:
        F = PolyMatrix.zero(lay.nvars, lay.m or 1, lay.p)
    Q1 = values.get(lay.q1_handle, np.zeros((0, 0)))
    Q2 = values.get(lay.q2_handle, np.zeros((0, 0)))
    return CertifiedFactors(F=F, P=P, Q1=np.asarray(Q1), Q2=np.asarray(Q2),
                            f_exponents=lay.f_exponents,
                            p_exponents=lay.p_exponents,
                            certified=(sol.status == "solved"))


def extract_controller(cf: CertifiedFactors):
    """Realize the controller K = F P^{-1}.

    For constant ``P`` this is a :class:`ControllerCoeffs` with polynomial
    gain ``F(x) P^{-1}``; for state-dependent ``P`` it is a callable
    ``x -> F(x) P(xt)^{-1}`` evaluating the gain pointwise.
    """
    const_exp = (0,) * cf.P.nvars
    if set(cf.P.coeffs) <= {const_exp}:
        P0 = cf.P.coeffs.get(const_exp, np.zeros((cf.P.rows, cf.P.cols)))
        K = cf.F @ PolyMatrix.constant(cf.F.nvars, np.linalg.inv(P0))
        return ControllerCoeffs(K=K.prune())

    def gain(x):
        return cf.F(x) @ np.linalg.inv(cf.P(x))

    return gain


# ---------------------------------------------------------------------------
# configs and results


@dataclass
class AdmmConfig:
    rho: float = 1.0
    iters: int = 50
    d_p: int = 0
    d_f: int = 0
    eps: tuple = (1e-3, 1e-4)
    seed: int = 0
    init_halfwidth: float = 5.0
    loss: LossSpec = field(default_factory=LossSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class PgdConfig:
    alpha: float = 1e-5
    iters: int = 500
    d_p: int = 0
    d_f: int = 0
    eps: tuple = (1e-3, 1e-4)
    seed: int = 0
    init_halfwidth: float = 5.0
    minibatch: int | None = None
    loss: LossSpec = field(default_factory=LossSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class LearnResult:
    """Outcome of a learning run.

    ``loss_trace[t]`` is the imitation loss after iteration ``t + 1``;
    ``init_loss`` is the loss of the initial iterate (iteration 0).  For
    ADMM the primary trace follows the unconstrained ``K`` iterate and
    ``certified_loss_trace`` follows the certified controller
    ``F P^{-1}``; for PGD the iterate is always certified and the two
    traces coincide.
    """

    factors: CertifiedFactors
    controller: object            # ControllerCoeffs or callable gain
    init_loss: float
    loss_trace: list
    certified_loss_trace: list
    k_iterate: ControllerCoeffs | None = None
    solver_failures: int = 0


# ---------------------------------------------------------------------------
# initialization (shared draw order; see module docstring)


def _draw_symmetric(rng: SplitMix64, p: int, h: float) -> np.ndarray:
    out = np.zeros((p, p))
    for r in range(p):
        vals = rng.uniform(p - r, -h, h)
        out[r, r:] = vals
        out[r + 1:, r] = vals[1:]
    return out


def _draw_initial(rng: SplitMix64, idx: IndexSets, m: int, p: int, h: float):
    P0 = [_draw_symmetric(rng, p, h) for _ in idx.p_exponents]
    F0 = [rng.uniform(m * p, -h, h).reshape(m, p) for _ in idx.f_exponents]
    return F0, P0


def _blocks_to_polymatrix(nvars, rows, cols, exponents, blocks) -> PolyMatrix:
    return PolyMatrix(nvars, rows, cols,
                      {e: b for e, b in zip(exponents, blocks)})


# ---------------------------------------------------------------------------
# ADMM


@dataclass
class AdmmState:
    K: list           # controller coefficient blocks, order of k_exponents
    cf: CertifiedFactors
    Y: list           # scaled duals, one (m, p) block per f_exponent
    rho: float
    loss_trace: list = field(default_factory=list)


def _phi_matrix(sys: SystemDef, idx: IndexSets, X: np.ndarray) -> np.ndarray:
    """Data features: column (i*p + s) holds k_mono_i(x_t) * Z_s(x_t)."""
    Zv = sys.z_many(X)  # (N, p)
    cols = []
    for ke in idx.k_exponents:
        mono = np.ones(X.shape[0])
        for j, a in enumerate(ke):
            if a:
                mono = mono * X[:, j] ** a
        cols.append(mono[:, None] * Zv)
    return np.concatenate(cols, axis=1)


def _psi_matrix(idx: IndexSets, P_blocks: list, p: int) -> np.ndarray:
    """Coupling rows: row (k*p + c) maps theta to (sum K_i P_j)[., c] of F_k."""
    nK = len(idx.k_exponents)
    Psi = np.zeros((len(idx.f_exponents) * p, nK * p))
    for k, pairs in idx.sets.items():
        for (i, j) in pairs:
            Pj = P_blocks[j]
            for c in range(p):
                Psi[k * p + c, i * p:(i + 1) * p] += Pj[:, c]
    return Psi


def admm_k_step(state: AdmmState, sys: SystemDef, data: Dataset,
                idx: IndexSets, rho: float, phi: np.ndarray | None = None) -> list:
    """Exact minimizer of loss + (rho/2)||F - K*P + Y||^2 over K coefficients.

    The problem separates across controller output rows; each row solves the
    normal equations of a ridge-coupled least squares via a symmetric
    (Cholesky) factorization shared by all rows.
    """
    p, m = sys.p, sys.m
    N = data.n_samples
    Phi = _phi_matrix(sys, idx, data.states) if phi is None else phi
    _fb, pb = state.cf.coefficient_list()
    Psi = _psi_matrix(idx, pb, p)
    G = (2.0 / N) * (Phi.T @ Phi) + rho * (Psi.T @ Psi)
    cho = scipy.linalg.cho_factor(G)
    fb, _pb = state.cf.coefficient_list()
    K_new = [np.zeros((m, p)) for _ in idx.k_exponents]
    for r in range(m):
        g_r = np.concatenate([fb[k][r, :] + state.Y[k][r, :]
                              for k in range(len(idx.f_exponents))])
        rhs = (2.0 / N) * (Phi.T @ data.inputs[:, r]) + rho * (Psi.T @ g_r)
        theta = scipy.linalg.cho_solve(cho, rhs)
        for i in range(len(idx.k_exponents)):
            K_new[i][r, :] = theta[i * p:(i + 1) * p]
    return K_new


def admm_fp_step(state: AdmmState, gcs: GramConstraintSet, idx: IndexSets,
                 solver: SolverConfig,
                 warm: ConeSolution | None = None) -> tuple:
    """Conic step: min sum_k ||F_k - sum K_i P_j + Y_k||^2 over certified (F, P).

    (The rho/2 factor of the augmented Lagrangian scales the whole objective
    and cannot move the minimizer, so it is omitted from the assembled
    problem.)  Returns (CertifiedFactors, ConeSolution); warm-start with the
    previous step's solution.
    """
    lay = gcs.layout
    p, m = lay.p, lay.m
    prob = cone_problem_from(gcs)
    for k, fe in enumerate(lay.f_exponents):
        fname = lay.name_of(lay.f_handles[k])
        for r in range(m):
            for c in range(p):
                terms = {(fname, r, c): 1.0}
                for (i, j) in idx.sets[k]:
                    pname = lay.name_of(lay.p_handles[j])
                    for s in range(p):
                        key = (pname, s, c)
                        terms[key] = terms.get(key, 0.0) - state.K[i][r, s]
                prob.add_residual([(n, rr, cc, w) for (n, rr, cc), w in terms.items()],
                                  -state.Y[k][r, c])
    sol = conic.solve(prob, solver, init=warm)
    return _factors_from_solution(gcs, sol), sol


def admm_dual_step(state: AdmmState, idx: IndexSets) -> list:
    """Scaled dual ascent: Y_k += F_k - sum_{(i,j)} K_i P_j."""
    fb, pb = state.cf.coefficient_list()
    Y_new = []
    for k in range(len(idx.f_exponents)):
        resid = fb[k].copy()
        for (i, j) in idx.sets[k]:
            resid -= state.K[i] @ pb[j]
        Y_new.append(state.Y[k] + resid)
    return Y_new


def run_admm(sys: SystemDef, data: Dataset, cfg: AdmmConfig) -> LearnResult:
    """Alternating bilinear splitting; see module docstring.

    Each iteration runs the K-step, the certified (F, P) step, and the dual
    update; ``loss_trace`` follows the K iterate and
    ``certified_loss_trace`` the controller extracted from (F, P).
    """
    idx = index_sets(sys, cfg.d_p, cfg.d_f)
    gcs = compile_constraints(sys, cfg.d_p, cfg.d_f, cfg.eps)
    rng = SplitMix64(cfg.seed)
    F0, P0 = _draw_initial(rng, idx, sys.m, sys.p, cfg.init_halfwidth)
    K0 = [rng.uniform(sys.m * sys.p, -cfg.init_halfwidth,
                      cfg.init_halfwidth).reshape(sys.m, sys.p)
          for _ in idx.k_exponents]
    cf = CertifiedFactors(
        F=_blocks_to_polymatrix(sys.n, sys.m, sys.p, idx.f_exponents, F0),
        P=_blocks_to_polymatrix(sys.n, sys.p, sys.p, idx.p_exponents, P0),
        Q1=np.zeros((gcs.z1.dim,) * 2), Q2=np.zeros((gcs.z2.dim,) * 2),
        f_exponents=idx.f_exponents, p_exponents=idx.p_exponents,
        certified=False)
    state = AdmmState(K=K0, cf=cf,
                      Y=[np.zeros((sys.m, sys.p)) for _ in idx.f_exponents],
                      rho=cfg.rho)
    k_poly = _blocks_to_polymatrix(sys.n, sys.m, sys.p, idx.k_exponents, K0)
    init_loss = imitation_loss(ControllerCoeffs(k_poly), sys, data)
    phi = _phi_matrix(sys, idx, data.states)
    loss_trace, cert_trace = [], []
    warm = None
    failures = 0
    for _ in range(cfg.iters):
        state.K = admm_k_step(state, sys, data, idx, cfg.rho, phi=phi)
        k_poly = _blocks_to_polymatrix(sys.n, sys.m, sys.p,
                                       idx.k_exponents, state.K)
        loss_trace.append(imitation_loss(ControllerCoeffs(k_poly), sys, data))
        state.cf, warm = admm_fp_step(state, gcs, idx, cfg.solver, warm=warm)
        if not state.cf.certified:
            failures += 1
        state.Y = admm_dual_step(state, idx)
        cert_trace.append(imitation_loss(extract_controller(state.cf), sys, data))
        state.loss_trace.append(loss_trace[-1])
    return LearnResult(factors=state.cf,
                       controller=extract_controller(state.cf),
                       init_loss=init_loss,
                       loss_trace=loss_trace,
                       certified_loss_trace=cert_trace,
                       k_iterate=ControllerCoeffs(k_poly),
                       solver_failures=failures)


# ---------------------------------------------------------------------------
# projected gradient descent


def pgd_gradient(cf: CertifiedFactors, sys: SystemDef, data: Dataset,
                 sample_idx: np.ndarray | None = None) -> tuple:
    """Analytic gradients of the imitation loss in the (F, P) coefficients.

    With ``w_t = P(xt_t)^{-1} Z(x_t)`` and residual
    ``r_t = F(x_t) w_t - u_t``:

        dJ/dF_k = (2/B) sum_t f_mono_k(x_t) r_t w_t^T
        dJ/dP_j = -(2/B) sum_t p_mono_j(x_t)
                  (P^{-1} F(x_t)^T r_t) w_t^T

    (the P gradient treats the block as a free square matrix — no symmetry
    folding — matching entrywise finite differences).  Returns
    (F gradients, P gradients) as lists in family order.
    """
    X = data.states if sample_idx is None else data.states[sample_idx]
    U = data.inputs if sample_idx is None else data.inputs[sample_idx]
    B = X.shape[0]
    Pv = cf.P.eval_many(X)               # (B, p, p)
    Fv = cf.F.eval_many(X)               # (B, m, p)
    Zv = sys.z_many(X)                   # (B, p)
    Pinv = np.linalg.inv(Pv)
    w = np.einsum("tij,tj->ti", Pinv, Zv)          # (B, p)
    r = np.einsum("tij,tj->ti", Fv, w) - U          # (B, m)
    a = np.einsum("tij,tkj,tk->ti", Pinv, Fv, r)    # P^{-1} F^T r, (B, p)

    def monos(exponents):
        out = np.ones((len(exponents), B))
        for k, e in enumerate(exponents):
            for j, pw in enumerate(e):
                if pw:
                    out[k] = out[k] * X[:, j] ** pw
        return out

    fm = monos(cf.f_exponents)
    pm = monos(cf.p_exponents)
    gF = [(2.0 / B) * np.einsum("t,ti,tj->ij", fm[k], r, w)
          for k in range(len(cf.f_exponents))]
    gP = [(-2.0 / B) * np.einsum("t,ti,tj->ij", pm[j], a, w)
          for j in range(len(cf.p_exponents))]
    return gF, gP


def pgd_project(F_blocks: list, P_blocks: list, gcs: GramConstraintSet,
                solver: SolverConfig,
                warm: ConeSolution | None = None) -> tuple:
    """Euclidean projection of raw (F, P) coefficients onto the certified set."""
    lay = gcs.layout
    prob = cone_problem_from(gcs)
    for k, h in enumerate(lay.f_handles):
        name = lay.name_of(h)
        for r in range(lay.m):
            for c in range(lay.p):
                prob.add_residual([(name, r, c, 1.0)], F_blocks[k][r, c])
    for j, h in enumerate(lay.p_handles):
        name = lay.name_of(h)
        for r in range(lay.p):
            for c in range(lay.p):
                prob.add_residual([(name, r, c, 1.0)], P_blocks[j][r, c])
    sol = conic.solve(prob, solver, init=warm)
    return _factors_from_solution(gcs, sol), sol


def run_pgd(sys: SystemDef, data: Dataset, cfg: PgdConfig) -> LearnResult:
    """Projected gradient descent on certified (F, P); see module docstring.

    The initial (F, P) draw is projected onto the certified set before the
    first step, so every point of the trace (including ``init_loss``) is a
    certified controller.  With ``minibatch`` set, each step's gradient uses
    that many samples drawn (with replacement) from a derived stream, while
    traces always report the full-data loss.
    """
    idx = index_sets(sys, cfg.d_p, cfg.d_f)
    gcs = compile_constraints(sys, cfg.d_p, cfg.d_f, cfg.eps)
    rng = SplitMix64(cfg.seed)
    F0, P0 = _draw_initial(rng, idx, sys.m, sys.p, cfg.init_halfwidth)
    mb_rng = rng.derive(0x706764)  # minibatch substream
    cf, warm = pgd_project(F0, P0, gcs, cfg.solver, warm=None)
    failures = 0 if cf.certified else 1
    init_loss = imitation_loss(extract_controller(cf), sys, data)
    trace = []
    for _ in range(cfg.iters):
        sample_idx = None
        if cfg.minibatch:
            u = mb_rng.uniform(cfg.minibatch)
            sample_idx = np.minimum((u * data.n_samples).astype(int),
                                    data.n_samples - 1)
        gF, gP = pgd_gradient(cf, sys, data, sample_idx=sample_idx)
        fb, pb = cf.coefficient_list()
        F_t = [f - cfg.alpha * g for f, g in zip(fb, gF)]
        P_t = [p - cfg.alpha * g for p, g in zip(pb, gP)]
        cf, warm = pgd_project(F_t, P_t, gcs, cfg.solver, warm=warm)
        if not cf.certified:
            failures += 1
        trace.append(imitation_loss(extract_controller(cf), sys, data))
    return LearnResult(factors=cf, controller=extract_controller(cf),
                       init_loss=init_loss, loss_trace=trace,
                       certified_loss_trace=list(trace),
                       k_iterate=None, solver_failures=failures)


# ---------------------------------------------------------------------------
# certificates for a fixed controller


def find_certificate(sys: SystemDef, K, d_p: int,
                     eps: tuple = (1e-3, 1e-4),
                     solver: SolverConfig | None = None,
                     margin: float = 10.0) -> LyapunovCertificate | None:
    """Search for a Lyapunov certificate of the closed loop under ``u = K Z``.

    Substitutes the controller, compiles the Gram conditions for the
    autonomous system (shape matrix of degree ``d_p`` over the full state),
    and solves the feasibility problem.  Only the constant block of ``P`` is
    pulled toward the identity; the higher-degree blocks are left free, so
    the solve does not shrink them onto the thin-margin boundary of the
    feasible set.  The decrease condition is solved at the strengthened
    level ``margin * eps[2]`` — any point feasible there satisfies the
    requested ``eps`` with slack that absorbs the iterative solver's
    residual — while the returned certificate records the requested ``eps``.
    Returns a certificate on success, ``None`` when the conic solve fails
    to close (in particular when no certificate of this degree exists).
    """
    if isinstance(K, ControllerCoeffs):
        K = K.K
    cl = closed_loop(sys, K)
    eps_search = (eps[0], margin * eps[1])
    gcs = compile_constraints(cl, d_p, 0, eps_search, with_F=False)
    lay = gcs.layout
    prob = cone_problem_from(gcs)
    const_exp = (0,) * lay.nvars
    for j, h in enumerate(lay.p_handles):
        if lay.p_exponents[j] != const_exp:
            continue
        name = lay.name_of(h)
        for r in range(lay.p):
            for c in range(lay.p):
                prob.add_residual([(name, r, c, 1.0)],
                                  1.0 if r == c else 0.0)
    sol = conic.solve(prob, solver or SolverConfig())
    if sol.status != "solved":
        return None
    cf = _factors_from_solution(gcs, sol)
    return LyapunovCertificate(system=cl, P=cf.P,
                               F=PolyMatrix.zero(cl.n, cl.m, cl.p),
                               eps=tuple(eps))
