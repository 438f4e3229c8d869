"""Self-contained solver for block-structured conic least squares.

Solves problems of the form

    minimize    0.5 * ||W x - b||^2 + c^T x
    subject to  A x = d
                X_k positive semidefinite for designated blocks

where ``x`` is the concatenation of named matrix blocks (row-major).  This is
exactly the shape of the certified-controller subproblems: the projection and
ADMM inner steps are least-squares objectives over coefficient blocks tied
together by the Gram equalities, with the two Gram matrices living in the
PSD cone.

The method is operator splitting (ADMM on the splitting ``x = z``):

* x-step: an equality-constrained quadratic program, solved through a KKT
  system that is factorized once per penalty value and cached;
* z-step: Euclidean projection of each designated block onto the PSD cone
  (free blocks pass through), using the cyclic Jacobi eigensolver below;
* scaled dual update, with optional over-relaxation and residual-balancing
  penalty adaptation (x2 / /2 whenever one residual exceeds the other
  tenfold).

Equality rows are preprocessed by a rank-revealing QR factorization
(column-pivoted, relative threshold 1e-10) that drops linearly dependent
rows; an inconsistent dropped row marks the problem infeasible.

Everything here is deterministic: no randomness, fixed iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Block",
    "ConeProblem",
    "ConeSolution",
    "ConicError",
    "SolverConfig",
    "eigh_jacobi",
    "psd_project",
    "solve",
]


class ConicError(RuntimeError):
    """Raised for structural solver failures (singular KKT, no convergence)."""


def eigh_jacobi(S, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, V)`` with eigenvalues ascending and ``S ~ V diag(w) V^T``.
    Sweeps rotate every upper-triangle pair in row order until the
    off-diagonal Frobenius norm falls below ``tol * max(1, ||S||_F)``;
    raises :class:`ConicError` if ``max_sweeps`` doesn't get there.
    """
    A = np.array(S, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    if n == 1:
        return A[0, :1].copy(), np.ones((1, 1))
    V = np.eye(n)
    threshold = tol * max(1.0, float(np.linalg.norm(A)))
    skip = threshold / (n * n)
    converged = False
    for _ in range(max_sweeps):
        off = A.copy()
        off[np.diag_indices(n)] = 0.0
        if np.linalg.norm(off) <= threshold:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = cs * col_p - sn * col_q
                A[:, q] = sn * col_p + cs * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = cs * row_p - sn * row_q
                A[q, :] = sn * row_p + cs * row_q
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = cs * vp - sn * vq
                V[:, q] = sn * vp + cs * vq
    else:
        off = A.copy()
        off[np.diag_indices(n)] = 0.0
        if np.linalg.norm(off) > threshold:
            raise ConicError(f"jacobi eigensolver failed to converge in "
                             f"{max_sweeps} sweeps")
        converged = True
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def psd_project(S, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Nearest (Frobenius) positive semidefinite matrix to ``sym(S)``."""
    A = np.asarray(S, dtype=float)
    A = 0.5 * (A + A.T)
    w, V = eigh_jacobi(A, tol=tol, max_sweeps=max_sweeps)
    if w[0] >= 0.0:
        return A
    wc = np.maximum(w, 0.0)
    R = (V * wc) @ V.T
    return 0.5 * (R + R.T)


@dataclass(frozen=True)
class Block:
    name: str
    rows: int
    cols: int
    cone: str = "free"  # 'free' | 'psd'


@dataclass
class SolverConfig:
    max_iters: int = 20000
    tol_primal: float = 1e-7
    tol_dual: float = 1e-7
    penalty: float = 1.0
    over_relaxation: float = 1.0  # in [1, 2)
    adapt_penalty: bool = True
    qr_threshold: float = 1e-10   # dependent-row detection, relative


@dataclass
class ConeSolution:
    values: dict
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str  # 'solved' | 'max_iters' | 'infeasible'
    penalty: float = 1.0
    z: np.ndarray | None = None  # packed primal/dual state for warm restarts
    u: np.ndarray | None = None


class ConeProblem:
    """Incrementally assembled problem; see module docstring for the form.

    Terms are ``(block_name, row, col, weight)``; a residual row contributes
    ``(sum of terms - target)^2 / 2`` to the objective, an equality pins
    ``sum of terms == rhs``, and linear cost terms add ``weight * entry``.
    """

    def __init__(self):
        self.blocks: list[Block] = []
        self._offset: dict[str, int] = {}
        self._size = 0
        self._residuals: list = []   # (terms, target)
        self._linear: list = []      # terms
        self._equalities: list = []  # (terms, rhs)

    # -- construction ------------------------------------------------------

    def add_block(self, name: str, rows: int, cols: int, cone: str = "free"):
        if name in self._offset:
            raise ValueError(f"duplicate block {name!r}")
        if cone not in ("free", "psd"):
            raise ValueError(f"unknown cone {cone!r}")
        if cone == "psd" and rows != cols:
            raise ValueError("psd blocks must be square")
        self.blocks.append(Block(name, rows, cols, cone))
        self._offset[name] = self._size
        self._size += rows * cols

    def index(self, name: str, r: int, c: int) -> int:
        blk = self.block(name)
        if not (0 <= r < blk.rows and 0 <= c < blk.cols):
            raise IndexError(f"entry ({r},{c}) outside block {name}")
        return self._offset[name] + r * blk.cols + c

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def add_residual(self, terms: Sequence, target: float):
        self._residuals.append((tuple(terms), float(target)))

    def add_linear_cost(self, terms: Sequence):
        self._linear.append(tuple(terms))

    def add_equality(self, terms: Sequence, rhs: float):
        self._equalities.append((tuple(terms), float(rhs)))

    @property
    def size(self) -> int:
        return self._size

    @property
    def n_equalities(self) -> int:
        return len(self._equalities)

    # -- packing -----------------------------------------------------------

    def pack(self, values: dict) -> np.ndarray:
        x = np.zeros(self._size)
        for b in self.blocks:
            if b.name in values:
                v = np.asarray(values[b.name], dtype=float)
                if v.shape != (b.rows, b.cols):
                    raise ValueError(f"block {b.name} has shape {v.shape}, "
                                     f"expected {(b.rows, b.cols)}")
                o = self._offset[b.name]
                x[o:o + b.rows * b.cols] = v.ravel()
        return x

    def unpack(self, x: np.ndarray) -> dict:
        out = {}
        for b in self.blocks:
            o = self._offset[b.name]
            out[b.name] = x[o:o + b.rows * b.cols].reshape(b.rows, b.cols).copy()
        return out

    def _matrix_from(self, rows: list) -> tuple:
        A = np.zeros((len(rows), self._size))
        d = np.zeros(len(rows))
        for i, (terms, rhs) in enumerate(rows):
            for (name, r, c, w) in terms:
                A[i, self.index(name, r, c)] += w
            d[i] = rhs
        return A, d

    def assemble(self):
        """Dense (W, b, c, A, d) for the current problem."""
        W, b = self._matrix_from(self._residuals)
        A, d = self._matrix_from(self._equalities)
        cvec = np.zeros(self._size)
        for terms in self._linear:
            for (name, r, c, w) in terms:
                cvec[self.index(name, r, c)] += w
        return W, b, cvec, A, d

    def objective_value(self, values: dict) -> float:
        W, b, cvec, _, _ = self.assemble()
        x = self.pack(values)
        r = W @ x - b
        return 0.5 * float(r @ r) + float(cvec @ x)

    def dump_text(self) -> str:
        lines = [f"cone problem: {self._size} variables, "
                 f"{len(self._equalities)} equalities, "
                 f"{len(self._residuals)} residual rows"]
        for b in self.blocks:
            lines.append(f"block {b.name} {b.cone} {b.rows}x{b.cols}")

        def fmt(terms):
            return " + ".join(f"{w!r}*{n}[{r},{c}]" for (n, r, c, w) in terms) or "0"

        for terms, rhs in self._equalities:
            lines.append(f"eq: {fmt(terms)} = {rhs!r}")
        for terms, tgt in self._residuals:
            lines.append(f"res: {fmt(terms)} -> {tgt!r}")
        for terms in self._linear:
            lines.append(f"lin: {fmt(terms)}")
        return "\n".join(lines)


def _facial_zero_indices(A: np.ndarray, d: np.ndarray, psd_slices) -> tuple:
    """Entries provably zero at every feasible point (cheap facial reduction).

    An equality ``sum w_i * Q[k_i, k_i] = 0`` whose terms all sit on
    diagonals of PSD blocks with same-signed weights forces every such
    diagonal entry — and hence its whole row and column — to zero.  Zeroed
    entries are substituted and the scan repeated to fixpoint.  Returns the
    sorted flat indices of pinned entries, or raises nothing: an equality
    whose support is entirely pinned but whose target is nonzero marks the
    problem infeasible (second return value).
    """
    diag_of = {}
    entry_rc = {}
    for (off, dim) in psd_slices:
        for r in range(dim):
            for c in range(dim):
                entry_rc[off + r * dim + c] = (off, dim, r, c)
            diag_of[off + r * dim + r] = (off, dim, r)
    zero: set = set()
    supports = [np.flatnonzero(A[i]) for i in range(A.shape[0])]
    infeasible = False
    changed = True
    while changed:
        changed = False
        for i, sup in enumerate(supports):
            live = [j for j in sup if j not in zero]
            if not live:
                if abs(d[i]) > 1e-9:
                    infeasible = True
                continue
            if d[i] != 0.0:
                continue
            if not all(j in diag_of for j in live):
                continue
            signs = np.sign(A[i, live])
            if not (np.all(signs > 0) or np.all(signs < 0)):
                continue
            for j in live:
                off, dim, r = diag_of[j]
                for k in range(dim):
                    zero.add(off + r * dim + k)
                    zero.add(off + k * dim + r)
            changed = True
    return np.array(sorted(zero), dtype=int), infeasible


def _drop_dependent_rows(A: np.ndarray, d: np.ndarray, rel_tol: float):
    """Keep a maximal independent row subset via column-pivoted QR of A^T."""
    if A.shape[0] == 0:
        return A, d, np.array([], dtype=int), np.array([], dtype=int)
    _q, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(diag > rel_tol * diag[0]))
    keep = np.sort(piv[:rank])
    dropped = np.sort(piv[rank:])
    return A[keep], d[keep], keep, dropped


def solve(problem: ConeProblem, config: SolverConfig | None = None,
          init: "ConeSolution | dict | None" = None) -> ConeSolution:
    """Solve a :class:`ConeProblem`; see module docstring for the method.

    ``init`` warm-starts the splitting: pass a previous :class:`ConeSolution`
    (primal and dual state are reused, and the adapted penalty carries over)
    or a dict of block values.  Deterministic for fixed inputs.
    """
    cfg = config or SolverConfig()
    W, b, cvec, A_full, d_full = problem.assemble()
    nx = problem.size
    if nx == 0:
        raise ValueError("empty problem")
    H = W.T @ W if W.shape[0] else np.zeros((nx, nx))
    q = -(W.T @ b) if W.shape[0] else np.zeros(nx)
    q = q + cvec

    psd_slices = [(problem._offset[blk.name], blk.rows)
                  for blk in problem.blocks if blk.cone == "psd"]

    pinned, pin_infeasible = _facial_zero_indices(A_full, d_full, psd_slices)
    if pinned.size:
        pins = np.zeros((pinned.size, nx))
        pins[np.arange(pinned.size), pinned] = 1.0
        A_aug = np.vstack([A_full, pins])
        d_aug = np.concatenate([d_full, np.zeros(pinned.size)])
    else:
        A_aug, d_aug = A_full, d_full

    A, d, _keep, dropped = _drop_dependent_rows(A_aug, d_aug, cfg.qr_threshold)
    me = A.shape[0]

    def dropped_rows_consistent(x_exact):
        # the kept rows hold exactly at the KKT point; a dropped (dependent)
        # row that disagrees there means the equalities are inconsistent
        if pin_infeasible:
            return False
        if dropped.size == 0:
            return True
        viol = np.abs(A_aug[dropped] @ x_exact - d_aug[dropped])
        scale = 1.0 + (np.max(np.abs(d_aug)) if d_aug.size else 0.0)
        return float(np.max(viol)) <= 1e-6 * scale

    def finish(point, x_exact, pr, dr, iters, status, rho, u=None):
        values = problem.unpack(point)
        r = (W @ point - b) if W.shape[0] else np.zeros(0)
        obj = 0.5 * float(r @ r) + float(cvec @ point)
        if status == "solved" and not dropped_rows_consistent(x_exact):
            status = "infeasible"
        return ConeSolution(values=values, objective=obj,
                            primal_residual=pr, dual_residual=dr,
                            iterations=iters, status=status, penalty=rho,
                            z=point.copy(), u=None if u is None else u.copy())

    def kkt_solve_factory(rho):
        KKT = np.zeros((nx + me, nx + me))
        KKT[:nx, :nx] = H + rho * np.eye(nx)
        if me:
            KKT[:nx, nx:] = A.T
            KKT[nx:, :nx] = A
        lu, piv = scipy.linalg.lu_factor(KKT)
        udiag = np.abs(np.diag(lu))
        if udiag.min() <= 1e-14 * max(1.0, udiag.max()):
            raise ConicError("singular KKT system; equalities are degenerate "
                             "after preprocessing")
        return lu, piv

    # -- no cone blocks: exact equality-constrained least squares ----------
    if not psd_slices:
        lu, piv = kkt_solve_factory(0.0)
        rhs = np.concatenate([-q, d])
        x = scipy.linalg.lu_solve((lu, piv), rhs)[:nx]
        pr = float(np.linalg.norm(A_full @ x - d_full) /
                   np.sqrt(max(1, A_full.shape[0]))) if A_full.shape[0] else 0.0
        return finish(x, x, pr, 0.0, 0, "solved", cfg.penalty)

    # -- operator splitting -------------------------------------------------
    rho = cfg.penalty
    z = np.zeros(nx)
    u = np.zeros(nx)
    if isinstance(init, ConeSolution):
        if init.z is not None and init.z.shape == (nx,):
            z = init.z.copy()
        if init.u is not None and init.u.shape == (nx,):
            u = init.u.copy()
        rho = init.penalty or rho
    elif isinstance(init, dict):
        z = problem.pack(init)

    factor_cache = {}

    def kkt(rho):
        if rho not in factor_cache:
            factor_cache[rho] = kkt_solve_factory(rho)
        return factor_cache[rho]

    gamma = cfg.over_relaxation
    sqrt_nx = np.sqrt(nx)
    rho_min, rho_max = 1e-4, 1e4
    pr = dr = np.inf
    x = z.copy()
    it = 0
    for it in range(1, cfg.max_iters + 1):
        lu_piv = kkt(rho)
        rhs = np.concatenate([-q + rho * (z - u), d])
        x = scipy.linalg.lu_solve(lu_piv, rhs)[:nx]
        xh = gamma * x + (1.0 - gamma) * z if gamma != 1.0 else x
        z_old = z
        t = xh + u
        z = t.copy()
        for (off, dim) in psd_slices:
            blockm = t[off:off + dim * dim].reshape(dim, dim)
            z[off:off + dim * dim] = psd_project(blockm).ravel()
        u = u + xh - z
        pr = float(np.linalg.norm(x - z)) / sqrt_nx
        dr = float(rho * np.linalg.norm(z - z_old)) / sqrt_nx
        if pr <= cfg.tol_primal and dr <= cfg.tol_dual:
            return finish(z, x, pr, dr, it, "solved", rho, u)
        if cfg.adapt_penalty and it % 5 == 0:
            if pr > 10.0 * dr and rho < rho_max:
                rho *= 2.0
                u = u / 2.0
            elif dr > 10.0 * pr and rho > rho_min:
                rho /= 2.0
                u = u * 2.0
    return finish(z, x, pr, dr, it, "max_iters", rho, u)
