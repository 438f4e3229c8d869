"""Compile matrix sum-of-squares stability conditions into linear equalities.

For a system ``xdot = A(x) Z(x) + B(x) u`` with controller ``u = K(x) Z(x)``,
``K = F P^{-1}``, global asymptotic stability of the origin is certified by
``V(x) = Z(x)^T P(xt)^{-1} Z(x)`` once two polynomial matrix inequalities
hold everywhere (``xt`` is the part of the state whose rows of ``B`` vanish):

* positivity:    ``P(xt) - eps1 * I  >= 0``
* decrease:      ``S(x) + eps2 * I <= 0`` where
  ``S = P A^T M^T + M A P + F^T B^T M^T + M B F
  - sum_{j in zero_rows} dP/dx_j * (row_j(A) Z)`` and ``M`` is the Jacobian
  of ``Z``.

Each inequality is reduced to a Gram form: with ``v`` a vector of ``p``
auxiliary variables and ``z`` a monomial basis in ``x``,

    v^T [P(xt) - eps1 I] v   = [z1 (x) v]^T Q1 [z1 (x) v],   Q1 >= 0
    v^T [S(x)  + eps2 I] v   = [z2 (x) v]^T Q2 [z2 (x) v],   Q2 <= 0

where ``(x)`` denotes the Kronecker product.  Matching coefficients of every
monomial ``x^a * v_i * v_l`` on both sides yields one
:class:`LinearEquality` per monomial; the unknowns are the coefficient
matrices of ``P`` and ``F`` on their monomial families plus the two Gram
matrices.  Both sides are affine in those unknowns, so the compiler extracts
each equality by probing: set a single decision entry to one, expand the
polynomial identity symbolically, and read off the coefficients.

:func:`verify_compiled` is the deliberately independent check: it evaluates
the original matrix expressions numerically at random points (via
:func:`sosimit.poly.stability_matrix_at`) and compares against the Gram
quadratic forms, sharing none of the symbolic expansion above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import SplitMix64
from .poly import (Exponent, MonomialBasis, Polynomial, PolyMatrix, SystemDef,
                   basis, stability_matrix_at)

__all__ = [
    "BlockInfo",
    "DecisionLayout",
    "GramBasis",
    "GramBasisError",
    "GramConstraintSet",
    "LinearEquality",
    "choose_gram_basis",
    "compile_P_constraint",
    "compile_constraints",
    "compile_stability_constraint",
    "eval_equality_residuals",
    "verify_compiled",
]


class GramBasisError(ValueError):
    """A Gram basis is too small to express the requested identity."""


def _exp_text(exp: Exponent) -> str:
    if not any(exp):
        return "1"
    parts = []
    for j, a in enumerate(exp):
        if a == 1:
            parts.append(f"x{j + 1}")
        elif a >= 2:
            parts.append(f"x{j + 1}^{a}")
    return "*".join(parts)


def _eval_exp(exp: Exponent, x: np.ndarray) -> float:
    v = 1.0
    for j, a in enumerate(exp):
        if a:
            v *= x[j] ** a
    return v


@dataclass(frozen=True)
class GramBasis:
    """Monomial basis ``z`` paired with the auxiliary vector dimension ``p``.

    The Gram vector is ``z (x) v`` with entries ordered monomial-major:
    index ``a * block_dim + i`` holds ``z_a(x) * v_i``.
    """

    exponents: tuple
    block_dim: int

    @property
    def size(self) -> int:
        return len(self.exponents)

    @property
    def dim(self) -> int:
        return len(self.exponents) * self.block_dim

    def kron_entries(self):
        """(x-exponent, v-index) per Gram-vector entry, in storage order."""
        return [(e, i) for e in self.exponents for i in range(self.block_dim)]

    def kron_at(self, x, v) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        vals = np.array([_eval_exp(e, x) for e in self.exponents])
        return (vals[:, None] * v[None, :]).ravel()


def choose_gram_basis(target_degree: int, variables, p: int, nvars: int) -> GramBasis:
    """Smallest degree-complete Gram basis for identities of ``target_degree``.

    Takes all monomials of degree <= ceil(target_degree / 2) in the given
    variables; products of pairs then cover every monomial of the target
    degree over those variables.
    """
    half = (int(target_degree) + 1) // 2
    b = basis(nvars, half, variables)
    return GramBasis(exponents=b.exponents, block_dim=int(p))


@dataclass(frozen=True)
class BlockInfo:
    """One decision block: a named matrix variable with a cone tag."""

    handle: int
    name: str
    kind: str  # 'sym' (free symmetric), 'full' (free), 'psd', 'nsd'
    rows: int
    cols: int
    exponent: tuple | None = None  # family monomial for P/F blocks


class DecisionLayout:
    """Handle table for the decision blocks of one constraint system.

    Handles are dense ints ordered: the ``P`` coefficient blocks on the
    monomial family of ``P`` (symmetric p x p), then the ``F`` blocks on the
    family of ``F`` (full m x p), then ``Q1`` (PSD), then ``Q2`` (NSD).
    """

    def __init__(self, nvars: int, p: int, m: int,
                 p_exponents: Sequence, f_exponents: Sequence = (),
                 q1_dim: int = 0, q2_dim: int = 0):
        self.nvars = nvars
        self.p = p
        self.m = m
        self.p_exponents = tuple(tuple(e) for e in p_exponents)
        self.f_exponents = tuple(tuple(e) for e in f_exponents)
        blocks = []
        for j, e in enumerate(self.p_exponents):
            blocks.append(BlockInfo(len(blocks), f"P{j}", "sym", p, p, e))
        self.f_offset = len(blocks)
        for k, e in enumerate(self.f_exponents):
            blocks.append(BlockInfo(len(blocks), f"F{k}", "full", m, p, e))
        self.q1_handle = None
        if q1_dim:
            self.q1_handle = len(blocks)
            blocks.append(BlockInfo(len(blocks), "Q1", "psd", q1_dim, q1_dim))
        self.q2_handle = None
        if q2_dim:
            self.q2_handle = len(blocks)
            blocks.append(BlockInfo(len(blocks), "Q2", "nsd", q2_dim, q2_dim))
        self.blocks = tuple(blocks)

    @property
    def p_handles(self):
        return tuple(range(len(self.p_exponents)))

    @property
    def f_handles(self):
        return tuple(range(self.f_offset, self.f_offset + len(self.f_exponents)))

    def name_of(self, handle: int) -> str:
        return self.blocks[handle].name

    def build_P(self, values: dict) -> PolyMatrix:
        coeffs = {e: np.asarray(values[h], dtype=float)
                  for h, e in zip(self.p_handles, self.p_exponents)}
        return PolyMatrix(self.nvars, self.p, self.p, coeffs)

    def build_F(self, values: dict) -> PolyMatrix:
        coeffs = {e: np.asarray(values[h], dtype=float)
                  for h, e in zip(self.f_handles, self.f_exponents)}
        return PolyMatrix(self.nvars, self.m, self.p, coeffs)

    def values_for(self, P: PolyMatrix | None = None,
                   F: PolyMatrix | None = None) -> dict:
        """Map concrete coefficient matrices onto handles (support must fit)."""
        values = {}
        if P is not None:
            fam = dict(zip(self.p_exponents, self.p_handles))
            for e, mcoef in P.coeffs.items():
                if e not in fam:
                    raise ValueError(f"P monomial {e} outside the family")
                values[fam[e]] = np.array(mcoef, dtype=float)
            for h in self.p_handles:
                values.setdefault(h, np.zeros((self.p, self.p)))
        if F is not None:
            fam = dict(zip(self.f_exponents, self.f_handles))
            for e, mcoef in F.coeffs.items():
                if e not in fam:
                    raise ValueError(f"F monomial {e} outside the family")
                values[fam[e]] = np.array(mcoef, dtype=float)
            for h in self.f_handles:
                values.setdefault(h, np.zeros((self.m, self.p)))
        return values


@dataclass(frozen=True)
class LinearEquality:
    """One coefficient-matching row: sum(lhs) + constant == sum(rhs).

    Terms are ``(handle, row, col, weight)`` referencing the upper triangle
    of symmetric blocks (weights already fold the mirrored entry in).
    ``monomial`` records which coefficient this row matches:
    an x-exponent plus an unordered ``v_i * v_l`` pair.
    """

    monomial: tuple  # (x-exponent, (i, l)) with i <= l
    lhs: tuple       # ((handle, r, c, w), ...)
    constant: float
    rhs: tuple

    def text(self, layout: DecisionLayout) -> str:
        def side(terms):
            if not terms:
                return "0"
            return " + ".join(f"{w!r}*{layout.name_of(h)}[{r},{c}]"
                              for (h, r, c, w) in terms)
        e, (i, l) = self.monomial
        return (f"{_exp_text(e)} ; v{i + 1}*v{l + 1} ; "
                f"lhs: {side(self.lhs)} ; const: {self.constant!r} ; "
                f"rhs: {side(self.rhs)}")


@dataclass(frozen=True)
class GramConstraintSet:
    """Compiled linear-equality form of the positivity/decrease conditions."""

    layout: DecisionLayout
    equalities: tuple
    z1: GramBasis | None
    z2: GramBasis | None
    eps: tuple  # (eps1, eps2); entry is None when that side is absent

    @property
    def n_equalities(self) -> int:
        return len(self.equalities)

    def merge(self, other: "GramConstraintSet") -> "GramConstraintSet":
        if self.layout is not other.layout:
            raise ValueError("can only merge constraint sets sharing a layout")
        return GramConstraintSet(
            layout=self.layout,
            equalities=self.equalities + other.equalities,
            z1=self.z1 or other.z1,
            z2=self.z2 or other.z2,
            eps=(self.eps[0] if self.eps[0] is not None else other.eps[0],
                 self.eps[1] if self.eps[1] is not None else other.eps[1]),
        )

    def dump_text(self) -> str:
        lines = [f"gram constraint set: {len(self.equalities)} equalities"]
        for b in self.layout.blocks:
            fam = f" on {_exp_text(b.exponent)}" if b.exponent is not None else ""
            lines.append(f"block {b.name} {b.kind} {b.rows}x{b.cols}{fam}")
        for eq in self.equalities:
            lines.append(eq.text(self.layout))
        return "\n".join(lines)


def _sym_probe_unit(p: int, r: int, c: int) -> np.ndarray:
    """Unit direction for entry (r, c) of a symmetric matrix (r <= c)."""
    E = np.zeros((p, p))
    E[r, c] = 1.0
    E[c, r] = 1.0  # no-op when r == c
    return E


def _quad_coeff_weights(mat: np.ndarray):
    """Coefficients of v_i v_l (i <= l) in v^T mat v, for symmetric mat."""
    p = mat.shape[0]
    out = {}
    for i in range(p):
        for l in range(i, p):
            w = mat[i, i] if i == l else mat[i, l] + mat[l, i]
            if w != 0.0:
                out[(i, l)] = w
    return out


def _stability_symbolic(sys: SystemDef, P: PolyMatrix, F: PolyMatrix) -> PolyMatrix:
    """Symbolically expanded decrease matrix S(x); see module docstring."""
    T1 = sys.M @ (sys.A @ P)
    S = T1 + T1.T
    if not F.is_zero():
        T2 = sys.M @ (sys.B @ F)
        S = S + T2 + T2.T
    if sys.zero_rows and not P.is_zero():
        Zcol = PolyMatrix.from_column(sys.Z)
        for j in sys.zero_rows:
            fj = (sys.A.row(j) @ Zcol).entry(0, 0)  # xdot_j (row j of B is zero)
            if not fj.is_zero():
                dP = P.partial(j)
                if not dP.is_zero():
                    S = S - dP * fj
    return S


def _extract_rows(S: PolyMatrix):
    """Map a symmetric PolyMatrix to {(x-exponent, (i, l)): weight}."""
    out = {}
    for e, mat in S.coeffs.items():
        for pair, w in _quad_coeff_weights(mat).items():
            out[(e, pair)] = w
    return out


def _gram_rhs_rows(gb: GramBasis, handle: int):
    """RHS terms of every monomial of [z (x) v]^T Q [z (x) v].

    Returns {(x-exponent, (i, l)): [(handle, r, c, w), ...]} over the upper
    triangle of Q, with off-diagonal weights folded to 2.
    """
    entries = gb.kron_entries()
    rows = {}
    for r in range(len(entries)):
        er, ir = entries[r]
        for s in range(r, len(entries)):
            es, is_ = entries[s]
            e = tuple(a + b for a, b in zip(er, es))
            pair = (ir, is_) if ir <= is_ else (is_, ir)
            w = 1.0 if r == s else 2.0
            rows.setdefault((e, pair), []).append((handle, r, s, w))
    return rows


def _rows_to_equalities(lhs_rows: dict, const_rows: dict, rhs_rows: dict,
                        context: str):
    missing = [key for key in lhs_rows if key not in rhs_rows]
    missing += [key for key in const_rows if key not in rhs_rows]
    if missing:
        e, (i, l) = sorted(missing, key=lambda k: (sum(k[0]), k[0]))[0]
        raise GramBasisError(
            f"{context}: monomial {_exp_text(e)}*v{i + 1}*v{l + 1} cannot be "
            f"expressed in the Gram basis; enlarge it")
    eqs = []
    for key in sorted(rhs_rows, key=lambda k: ((sum(k[0]), tuple(-a for a in k[0])), k[1])):
        lhs = tuple(lhs_rows.get(key, ()))
        eqs.append(LinearEquality(
            monomial=key,
            lhs=lhs,
            constant=const_rows.get(key, 0.0),
            rhs=tuple(rhs_rows[key]),
        ))
    return eqs


def _emit_positivity(layout: DecisionLayout, z1: GramBasis, eps1: float):
    lhs_rows = {}
    for h, e in zip(layout.p_handles, layout.p_exponents):
        for r in range(layout.p):
            for c in range(r, layout.p):
                # v^T (unit sym direction) v contributes to pair (r, c) only
                w = 1.0 if r == c else 2.0
                lhs_rows.setdefault((e, (r, c)), []).append((h, r, c, w))
    zero = (0,) * layout.nvars
    const_rows = {(zero, (i, i)): -float(eps1) for i in range(layout.p)}
    rhs_rows = _gram_rhs_rows(z1, layout.q1_handle)
    return _rows_to_equalities(lhs_rows, const_rows, rhs_rows, "positivity")


def _probe_stability(sys: SystemDef, layout: DecisionLayout):
    """Affine coefficients of S(x) in each decision entry, found by probing."""
    p, m, nvars = layout.p, layout.m, layout.nvars
    zeroP = PolyMatrix.zero(nvars, p, p)
    zeroF = PolyMatrix.zero(nvars, m, p)
    lhs_rows = {}
    for h, e in zip(layout.p_handles, layout.p_exponents):
        for r in range(p):
            for c in range(r, p):
                probe = PolyMatrix(nvars, p, p, {e: _sym_probe_unit(p, r, c)})
                for key, w in _extract_rows(_stability_symbolic(sys, probe, zeroF)).items():
                    lhs_rows.setdefault(key, []).append((h, r, c, w))
    for h, e in zip(layout.f_handles, layout.f_exponents):
        for r in range(m):
            for c in range(p):
                unit = np.zeros((m, p))
                unit[r, c] = 1.0
                probe = PolyMatrix(nvars, m, p, {e: unit})
                for key, w in _extract_rows(_stability_symbolic(sys, zeroP, probe)).items():
                    lhs_rows.setdefault(key, []).append((h, r, c, w))
    return lhs_rows


def _emit_stability(layout: DecisionLayout, lhs_rows: dict, z2: GramBasis,
                    eps2: float):
    zero = (0,) * layout.nvars
    const_rows = {(zero, (i, i)): float(eps2) for i in range(layout.p)}
    rhs_rows = _gram_rhs_rows(z2, layout.q2_handle)
    return _rows_to_equalities(lhs_rows, const_rows, rhs_rows, "stability")


def compile_constraints(sys: SystemDef, d_p: int, d_f: int,
                        eps: tuple = (1e-3, 1e-4), with_F: bool = True,
                        z1: GramBasis | None = None,
                        z2: GramBasis | None = None) -> GramConstraintSet:
    """Compile both Gram conditions for the coefficient families of P and F.

    ``P`` lives on all monomials of degree <= ``d_p`` in the reduced
    variables, ``F`` on all monomials of degree <= ``d_f`` in the full state
    (omitted entirely when ``with_F`` is false, as when certifying an
    autonomous closed loop).  Gram bases are chosen automatically from the
    structural degree of each identity unless supplied.
    """
    eps1, eps2 = eps
    nvars, p, m = sys.n, sys.p, sys.m
    p_exps = basis(nvars, d_p, variables=sys.reduced_vars).exponents
    f_exps = basis(nvars, d_f).exponents if with_F else ()

    if z1 is None:
        z1 = choose_gram_basis(d_p, sys.reduced_vars, p, nvars)

    # probe against a temporary layout to learn the stability support
    pre = DecisionLayout(nvars, p, m, p_exps, f_exps)
    lhs_rows = _probe_stability(sys, pre)
    if z2 is None:
        support = [e for (e, _pair) in lhs_rows]
        deg = max((sum(e) for e in support), default=0)
        svars = sorted({j for e in support for j, a in enumerate(e) if a})
        z2 = choose_gram_basis(deg, svars, p, nvars)

    layout = DecisionLayout(nvars, p, m, p_exps, f_exps,
                            q1_dim=z1.dim, q2_dim=z2.dim)
    # probe handles coincide between pre and layout (Q handles come last)
    eqs = tuple(_emit_positivity(layout, z1, eps1)) + \
        tuple(_emit_stability(layout, lhs_rows, z2, eps2))
    return GramConstraintSet(layout=layout, equalities=eqs, z1=z1, z2=z2,
                             eps=(float(eps1), float(eps2)))


def compile_P_constraint(P: PolyMatrix, eps1: float,
                         gram_basis: GramBasis | None = None) -> GramConstraintSet:
    """Compile only the positivity condition for a concrete ``P`` structure.

    The coefficient family is every monomial of degree <= deg(P) over the
    variables present in ``P``; use ``layout.values_for(P=P)`` to map the
    concrete coefficients onto handles.
    """
    p = P.rows
    if P.rows != P.cols:
        raise ValueError("P must be square")
    fam = basis(P.nvars, P.degree, variables=P.variables_present()).exponents
    if gram_basis is None:
        gram_basis = choose_gram_basis(P.degree, P.variables_present(), p, P.nvars)
    layout = DecisionLayout(P.nvars, p, 0, fam, (), q1_dim=gram_basis.dim)
    eqs = tuple(_emit_positivity(layout, gram_basis, eps1))
    return GramConstraintSet(layout=layout, equalities=eqs, z1=gram_basis,
                             z2=None, eps=(float(eps1), None))


def compile_stability_constraint(sys: SystemDef, P: PolyMatrix, F: PolyMatrix,
                                 eps2: float,
                                 gram_basis: GramBasis | None = None) -> GramConstraintSet:
    """Compile only the decrease condition for concrete ``P``, ``F`` structure."""
    p_fam = basis(sys.n, P.degree, variables=P.variables_present()).exponents
    f_fam = basis(sys.n, F.degree).exponents if not F.is_zero() else ()
    pre = DecisionLayout(sys.n, sys.p, sys.m, p_fam, f_fam)
    lhs_rows = _probe_stability(sys, pre)
    if gram_basis is None:
        support = [e for (e, _pair) in lhs_rows]
        deg = max((sum(e) for e in support), default=0)
        svars = sorted({j for e in support for j, a in enumerate(e) if a})
        gram_basis = choose_gram_basis(deg, svars, sys.p, sys.n)
    layout = DecisionLayout(sys.n, sys.p, sys.m, p_fam, f_fam,
                            q2_dim=gram_basis.dim)
    eqs = tuple(_emit_stability(layout, lhs_rows, gram_basis, eps2))
    return GramConstraintSet(layout=layout, equalities=eqs, z1=None,
                             z2=gram_basis, eps=(None, float(eps2)))


def eval_equality_residuals(gcs: GramConstraintSet, values: dict) -> np.ndarray:
    """Algebraic residual (lhs + const - rhs) of every equality row."""

    def side(terms):
        return sum(w * float(np.asarray(values[h])[r, c]) for (h, r, c, w) in terms)

    return np.array([side(eq.lhs) + eq.constant - side(eq.rhs)
                     for eq in gcs.equalities])


def verify_compiled(gcs: GramConstraintSet, values: dict,
                    sys: SystemDef | None = None, samples: int = 20,
                    seed: int = 2024, halfwidth: float = 2.0) -> float:
    """Cross-check compiled equalities by numeric evaluation at random points.

    Reconstructs P, F (and the Gram matrices) from ``values``, then compares
    both sides of each Gram identity evaluated at ``samples`` random
    ``(x, v)`` pairs.  This route never touches the symbolic expansion used
    by the compiler — matrices are evaluated pointwise and multiplied
    numerically — so agreement here certifies the compilation.  Returns the
    largest absolute mismatch.
    """
    layout = gcs.layout
    eps1, eps2 = gcs.eps
    if gcs.z2 is not None and sys is None:
        raise ValueError("stability rows present: the system is required")
    P = layout.build_P(values)
    F = layout.build_F(values) if layout.f_exponents else \
        PolyMatrix.zero(layout.nvars, layout.m or 1, layout.p)
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(samples):
        x = rng.uniform(layout.nvars, -halfwidth, halfwidth)
        v = rng.uniform(layout.p, -1.0, 1.0)
        if gcs.z1 is not None:
            lhs = v @ (P(x) - eps1 * np.eye(layout.p)) @ v
            k1 = gcs.z1.kron_at(x, v)
            rhs = k1 @ np.asarray(values[layout.q1_handle]) @ k1
            worst = max(worst, abs(lhs - rhs))
        if gcs.z2 is not None:
            S = stability_matrix_at(sys, P, F, x)
            lhs = v @ (S + eps2 * np.eye(layout.p)) @ v
            k2 = gcs.z2.kron_at(x, v)
            rhs = k2 @ np.asarray(values[layout.q2_handle]) @ k2
            worst = max(worst, abs(lhs - rhs))
    return worst
