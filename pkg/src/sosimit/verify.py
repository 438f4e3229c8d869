"""Numeric verification of stability certificates and trajectory simulation.

This module is the package's independent check on everything the symbolic
compiler and the solvers produce: it works purely by evaluating matrices at
points (dense grids, random samples, integrated trajectories) and never
reuses the compiled linear equalities.

A certificate ``(system, P, F, eps)`` asserts that
``V(x) = Z(x)^T P(xt)^{-1} Z(x)`` strictly decreases along the closed loop
``u = F P^{-1} Z``; :func:`check_certificate` tests the two matrix
inequalities behind that claim on a grid, and :func:`lyapunov_rate` exposes
the identity ``Vdot(x) = w^T S(x) w`` with ``w = P^{-1} Z`` used throughout
the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .poly import (PolyMatrix, SystemDef, polymatrix_from_text,
                   stability_matrix_at, _split_polymatrix_blocks)

__all__ = [
    "CertificateReport",
    "LyapunovCertificate",
    "TrajectoryRecord",
    "check_certificate",
    "contour_grid",
    "load_certificate",
    "lyapunov_rate",
    "lyapunov_value",
    "save_certificate",
    "simulate",
]

DIVERGENCE_NORM = 1e9


@dataclass(frozen=True)
class LyapunovCertificate:
    """Certified Lyapunov factors for a system under ``u = F P^{-1} Z``."""

    system: SystemDef
    P: PolyMatrix
    F: PolyMatrix
    eps: tuple  # (eps1, eps2)

    def __post_init__(self):
        if self.P.rows != self.system.p or self.P.cols != self.system.p:
            raise ValueError("P must be p x p")
        if self.F.rows != self.system.m or self.F.cols != self.system.p:
            raise ValueError("F must be m x p")

    @property
    def is_global(self) -> bool:
        """Constant shape matrices certify global asymptotic stability."""
        return self.P.degree == 0


def lyapunov_value(cert: LyapunovCertificate, x) -> float:
    """V(x) = Z(x)^T P(xt)^{-1} Z(x)."""
    z = cert.system.z_at(x)
    return float(z @ np.linalg.solve(cert.P(x), z))


def lyapunov_rate(cert: LyapunovCertificate, x) -> float:
    """Vdot along the closed loop, via the identity w^T S(x) w, w = P^{-1} Z."""
    z = cert.system.z_at(x)
    w = np.linalg.solve(cert.P(x), z)
    S = stability_matrix_at(cert.system, cert.P, cert.F, x)
    return float(w @ S @ w)


@dataclass(frozen=True)
class CertificateReport:
    passed: bool
    min_p_eig: float
    max_s_eig: float
    eps: tuple
    box: float
    points_per_axis: int
    tol: float
    is_global: bool

    def to_text(self) -> str:
        return "\n".join([
            f"passed {self.passed}",
            f"min_eig_P {self.min_p_eig!r}",
            f"max_eig_S {self.max_s_eig!r}",
            f"eps1 {self.eps[0]!r}",
            f"eps2 {self.eps[1]!r}",
            f"box {self.box!r}",
            f"points_per_axis {self.points_per_axis}",
            f"tol {self.tol!r}",
            f"global {self.is_global}",
        ])


def _grid_points(n: int, box: float, points: int) -> np.ndarray:
    axes = [np.linspace(-box, box, points) for _ in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _stability_matrices(sys: SystemDef, P: PolyMatrix, F: PolyMatrix,
                        X: np.ndarray) -> np.ndarray:
    """Decrease matrices at every row of X, batched; returns (G, p, p)."""
    Av = sys.A.eval_many(X)            # (G, n, p)
    Mv = sys.M.eval_many(X)            # (G, p, n)
    Pv = P.eval_many(X)                # (G, p, p)
    T1 = np.einsum("gpn,gnq,gqr->gpr", Mv, Av, Pv)
    S = T1 + np.transpose(T1, (0, 2, 1))
    if not F.is_zero():
        Bv = sys.B.eval_many(X)        # (G, n, m)
        Fv = F.eval_many(X)            # (G, m, p)
        T2 = np.einsum("gpn,gnm,gmq->gpq", Mv, Bv, Fv)
        S = S + T2 + np.transpose(T2, (0, 2, 1))
    if sys.zero_rows:
        Zv = sys.z_many(X)             # (G, p)
        for j in sys.zero_rows:
            dP = P.partial(j)
            if dP.is_zero():
                continue
            xdot_j = np.einsum("gq,gq->g", Av[:, j, :], Zv)
            S = S - dP.eval_many(X) * xdot_j[:, None, None]
    return S


def check_certificate(cert: LyapunovCertificate, box: float = 10.0,
                      points: int = 41, tol: float = 1e-8) -> CertificateReport:
    """Test both certificate inequalities on a uniform grid over the box.

    Requires min eig of ``P`` at least ``eps1 - tol`` and max eig of the
    decrease matrix at most ``-eps2 + tol`` at every grid point (a numeric
    spot-check of conditions the Gram form asserts everywhere).
    """
    eps1, eps2 = cert.eps
    X = _grid_points(cert.system.n, box, points)
    Pv = cert.P.eval_many(X)
    Pv = 0.5 * (Pv + np.transpose(Pv, (0, 2, 1)))
    min_p = float(np.min(np.linalg.eigvalsh(Pv)[:, 0]))
    S = _stability_matrices(cert.system, cert.P, cert.F, X)
    S = 0.5 * (S + np.transpose(S, (0, 2, 1)))
    max_s = float(np.max(np.linalg.eigvalsh(S)[:, -1]))
    passed = (min_p >= eps1 - tol) and (max_s <= -eps2 + tol)
    return CertificateReport(passed=passed, min_p_eig=min_p, max_s_eig=max_s,
                             eps=(eps1, eps2), box=box, points_per_axis=points,
                             tol=tol, is_global=cert.is_global)


@dataclass(frozen=True)
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    v_values: np.ndarray | None
    diverged: bool


def _gain_fn(controller, sys: SystemDef):
    if controller is None:
        return lambda x: None
    if isinstance(controller, PolyMatrix):
        return lambda x: controller(x)
    if hasattr(controller, "K") and isinstance(controller.K, PolyMatrix):
        K = controller.K
        return lambda x: K(x)
    return lambda x: np.asarray(controller(x), dtype=float)


def simulate(sys: SystemDef, controller, x0, t_end: float, dt: float = 1e-3,
             cert: LyapunovCertificate | None = None) -> TrajectoryRecord:
    """Integrate the (closed-loop) dynamics with fixed-step RK4.

    ``controller`` is a gain (ControllerCoeffs, PolyMatrix, or callable
    ``x -> (m, p)``) applied as ``u = K(x) Z(x)``, or ``None`` for zero
    input.  Records states and inputs at every step; if ``cert`` is given,
    also records ``V`` along the way.  Integration aborts (``diverged``)
    once the state norm exceeds 1e9.
    """
    gain = _gain_fn(controller, sys)

    def u_of(x):
        g = gain(x)
        if g is None:
            return np.zeros(sys.m)
        return g @ sys.z_at(x)

    def f(x):
        return sys.rhs(x, u_of(x))

    steps = int(round(t_end / dt))
    x = np.asarray(x0, dtype=float).copy()
    times = [0.0]
    states = [x.copy()]
    inputs = [u_of(x)]
    diverged = False
    for k in range(steps):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            diverged = True
            break
        times.append((k + 1) * dt)
        states.append(x.copy())
        inputs.append(u_of(x))
    times = np.array(times)
    states = np.array(states)
    inputs = np.array(inputs)
    v_values = None
    if cert is not None:
        v_values = np.array([lyapunov_value(cert, xk) for xk in states])
    return TrajectoryRecord(times=times, states=states, inputs=inputs,
                            v_values=v_values, diverged=diverged)


def contour_grid(cert: LyapunovCertificate, box: float = 10.0,
                 points: int = 41):
    """(points^n, n) grid and V values, for contour-style artifacts."""
    X = _grid_points(cert.system.n, box, points)
    Pv = cert.P.eval_many(X)
    Zv = cert.system.z_many(X)
    W = np.linalg.solve(Pv, Zv[:, :, None])[:, :, 0]
    V = np.einsum("gp,gp->g", Zv, W)
    return X, V


# ---------------------------------------------------------------------------
# certificate files


def save_certificate(cert: LyapunovCertificate) -> str:
    """Self-contained text form (system + factors + margins); re-loadable."""
    return "\n".join([
        "certificate v1",
        f"eps1 {cert.eps[0]!r}",
        f"eps2 {cert.eps[1]!r}",
        cert.system.to_text(),
        cert.P.to_text(),
        cert.F.to_text(),
    ])


def load_certificate(text: str) -> LyapunovCertificate:
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != "certificate v1":
        raise ValueError("not a certificate file")
    eps1 = float(lines[1].split()[1])
    eps2 = float(lines[2].split()[1])
    blocks = _split_polymatrix_blocks("\n".join(lines[3:]))
    if len(blocks) != 5:
        raise ValueError(f"expected 5 polymatrix blocks, got {len(blocks)}")
    A = polymatrix_from_text(blocks[0])
    B = polymatrix_from_text(blocks[1])
    Zm = polymatrix_from_text(blocks[2])
    Z = [Zm.entry(i, 0) for i in range(Zm.rows)]
    system = SystemDef(A, B, Z)
    P = polymatrix_from_text(blocks[3])
    F = polymatrix_from_text(blocks[4])
    return LyapunovCertificate(system=system, P=P, F=F, eps=(eps1, eps2))
