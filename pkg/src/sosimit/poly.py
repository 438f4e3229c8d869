"""Sparse multivariate polynomials, monomial bases, and polynomial matrices.

Conventions used throughout the package:

* An exponent is a tuple of ``nvars`` nonnegative ints, one power per
  variable; variables are written ``x1 .. xn`` (1-based) in text form.
* Monomial bases are graded lexicographic: degree first, then lexicographic
  with earlier variables dominating (``x1 > x2 > ...``), giving the order
  ``1, x1, x2, x1^2, x1*x2, x2^2, ...`` in two variables.
* A :class:`Polynomial` stores a dict mapping exponent -> float coefficient;
  exact-zero coefficients are dropped on construction.
* A :class:`PolyMatrix` stores a dict mapping exponent -> dense numpy
  coefficient matrix, i.e. ``M(x) = sum_e coeffs[e] * x^e``.

Text serialization (round-trips exactly; coefficients use Python float repr):

* polynomial:  ``0`` or terms joined by `` + ``, each term
  ``<coeff>`` or ``<coeff> * x<i>[^<k>] * ...`` with powers >= 2 written
  ``x<i>^<k>`` and power 1 written bare, e.g. ``2.5 * x1^2 * x3``;
* matrix: a header line ``polymatrix <rows> <cols> <nvars>`` followed by
  ``rows * cols`` polynomial lines in row-major order.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

Exponent = tuple  # tuple[int, ...]; one power per variable

__all__ = [
    "Exponent",
    "MonomialBasis",
    "Polynomial",
    "PolyMatrix",
    "SystemDef",
    "basis",
    "closed_loop",
    "eval_poly",
    "jacobian",
    "mul",
    "partial",
    "poly_from_text",
    "polymatrix_from_text",
    "stability_matrix_at",
]


def _grlex_key(exp: Exponent):
    # degree first; within a degree, descending lex so x1 outranks x2
    return (sum(exp), tuple(-a for a in exp))


def _count_monomials(nvars_active: int, max_degree: int) -> int:
    return sum(math.comb(i + nvars_active - 1, nvars_active - 1)
               for i in range(max_degree + 1))


class MonomialBasis:
    """All monomials of total degree <= ``max_degree`` over a variable subset.

    ``variables`` selects which of the ``nvars`` ambient variables may appear
    (default: all of them); exponent tuples always have ambient length
    ``nvars`` so monomials from different subsets compose directly.
    """

    def __init__(self, nvars: int, max_degree: int, variables=None):
        if nvars < 1:
            raise ValueError("need at least one variable")
        if max_degree < 0:
            raise ValueError("max_degree must be nonnegative")
        if variables is None:
            variables = range(nvars)
        vs = tuple(sorted(set(int(v) for v in variables)))
        if vs and (vs[0] < 0 or vs[-1] >= nvars):
            raise ValueError("variable index out of range")
        self.nvars = nvars
        self.max_degree = max_degree
        self.variables = vs
        self.exponents = tuple(sorted(self._generate(), key=_grlex_key))
        expected = _count_monomials(len(vs), max_degree) if vs else 1
        assert len(self.exponents) == expected
        self._index = {e: i for i, e in enumerate(self.exponents)}

    def _generate(self):
        out = []

        def rec(pos, remaining, current):
            if pos == len(self.variables):
                out.append(tuple(current))
                return
            v = self.variables[pos]
            for a in range(remaining + 1):
                current[v] = a
                rec(pos + 1, remaining - a, current)
                current[v] = 0

        rec(0, self.max_degree, [0] * self.nvars)
        return out

    def index_of(self, exp: Exponent) -> int:
        return self._index[tuple(exp)]

    def __contains__(self, exp):
        return tuple(exp) in self._index

    def __len__(self):
        return len(self.exponents)

    def __iter__(self):
        return iter(self.exponents)

    def __getitem__(self, i):
        return self.exponents[i]

    def __repr__(self):
        return (f"MonomialBasis(nvars={self.nvars}, max_degree={self.max_degree}, "
                f"variables={self.variables}, size={len(self)})")


def basis(nvars: int, max_degree: int, variables=None) -> MonomialBasis:
    """Graded-lex monomial basis of degree <= ``max_degree``; see module doc."""
    return MonomialBasis(nvars, max_degree, variables)


class Polynomial:
    """Sparse polynomial with float coefficients over ``nvars`` variables."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms=None):
        self.nvars = int(nvars)
        clean = {}
        if terms:
            for exp, c in dict(terms).items():
                e = tuple(int(a) for a in exp)
                if len(e) != self.nvars:
                    raise ValueError(f"exponent {e} has wrong length for nvars={nvars}")
                if any(a < 0 for a in e):
                    raise ValueError(f"negative exponent in {e}")
                c = float(c)
                if c != 0.0:
                    clean[e] = clean.get(e, 0.0) + c
                    if clean[e] == 0.0:
                        del clean[e]
        self.terms = clean

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(nvars: int) -> "Polynomial":
        return Polynomial(nvars)

    @staticmethod
    def constant(nvars: int, value: float) -> "Polynomial":
        return Polynomial(nvars, {(0,) * nvars: value})

    @staticmethod
    def variable(nvars: int, index: int) -> "Polynomial":
        """The polynomial ``x_{index}`` (0-based index)."""
        if not 0 <= index < nvars:
            raise ValueError("variable index out of range")
        exp = [0] * nvars
        exp[index] = 1
        return Polynomial(nvars, {tuple(exp): 1.0})

    @staticmethod
    def monomial(nvars: int, exp: Exponent, coeff: float = 1.0) -> "Polynomial":
        return Polynomial(nvars, {tuple(exp): coeff})

    # -- structure ---------------------------------------------------------

    @property
    def degree(self) -> int:
        """Total degree; the zero polynomial has degree 0 by convention."""
        return max((sum(e) for e in self.terms), default=0)

    def variables_present(self) -> tuple:
        present = set()
        for e in self.terms:
            for j, a in enumerate(e):
                if a:
                    present.add(j)
        return tuple(sorted(present))

    def is_zero(self) -> bool:
        return not self.terms

    def coeff(self, exp: Exponent) -> float:
        return self.terms.get(tuple(exp), 0.0)

    def prune(self, tol: float = 1e-14) -> "Polynomial":
        """Drop coefficients with magnitude <= ``tol``."""
        return Polynomial(self.nvars,
                          {e: c for e, c in self.terms.items() if abs(c) > tol})

    # -- algebra -----------------------------------------------------------

    def _check(self, other: "Polynomial"):
        if self.nvars != other.nvars:
            raise ValueError("mixed variable counts")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        self._check(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + c
        return Polynomial(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.nvars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(self.nvars,
                              {e: c * other for e, c in self.terms.items()})
        self._check(other)
        out = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0.0) + c1 * c2
        return Polynomial(self.nvars, out)

    __rmul__ = __mul__

    def __pow__(self, k):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only nonnegative integer powers")
        out = Polynomial.constant(self.nvars, 1.0)
        for _ in range(k):
            out = out * self
        return out

    def diff(self, index: int) -> "Polynomial":
        """Partial derivative with respect to variable ``index`` (0-based)."""
        out = {}
        for e, c in self.terms.items():
            a = e[index]
            if a:
                de = list(e)
                de[index] = a - 1
                out[tuple(de)] = out.get(tuple(de), 0.0) + c * a
        return Polynomial(self.nvars, out)

    # -- evaluation --------------------------------------------------------

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        total = 0.0
        for e, c in self.terms.items():
            v = c
            for j, a in enumerate(e):
                if a:
                    v *= x[j] ** a
            total += v
        return total

    def eval_many(self, X: np.ndarray) -> np.ndarray:
        """Evaluate at each row of ``X`` (shape (N, nvars)); returns (N,)."""
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0])
        for e, c in self.terms.items():
            v = np.full(X.shape[0], c)
            for j, a in enumerate(e):
                if a:
                    v = v * X[:, j] ** a
            out += v
        return out

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for e in sorted(self.terms, key=_grlex_key):
            c = self.terms[e]
            factors = [repr(c)]
            for j, a in enumerate(e):
                if a == 1:
                    factors.append(f"x{j + 1}")
                elif a >= 2:
                    factors.append(f"x{j + 1}^{a}")
            parts.append(" * ".join(factors))
        return " + ".join(parts)

    def __repr__(self):
        return f"Polynomial({self.nvars}, {self.to_text()})"

    def __eq__(self, other):
        return (isinstance(other, Polynomial) and self.nvars == other.nvars
                and self.terms == other.terms)

    def __hash__(self):
        return hash((self.nvars, frozenset(self.terms.items())))


def poly_from_text(text: str, nvars: int) -> Polynomial:
    """Parse the polynomial grammar emitted by :meth:`Polynomial.to_text`."""
    text = text.strip()
    if text == "0":
        return Polynomial.zero(nvars)
    terms = {}
    for part in text.split(" + "):
        factors = [f.strip() for f in part.split("*")]
        coeff = float(factors[0])
        exp = [0] * nvars
        for f in factors[1:]:
            if not f.startswith("x"):
                raise ValueError(f"bad factor {f!r}")
            if "^" in f:
                name, power = f.split("^")
                a = int(power)
            else:
                name, a = f, 1
            j = int(name[1:]) - 1
            if not 0 <= j < nvars:
                raise ValueError(f"variable {f!r} out of range for nvars={nvars}")
            exp[j] += a
        e = tuple(exp)
        terms[e] = terms.get(e, 0.0) + coeff
    return Polynomial(nvars, terms)


# -- module-level operation aliases ---------------------------------------


def eval_poly(f: Polynomial, x) -> float:
    return f(x)


def mul(f: Polynomial, g: Polynomial) -> Polynomial:
    return f * g


def partial(obj, index: int):
    """Partial derivative of a Polynomial or PolyMatrix."""
    if isinstance(obj, Polynomial):
        return obj.diff(index)
    return obj.partial(index)


def jacobian(Z: Sequence[Polynomial]) -> "PolyMatrix":
    """Jacobian matrix of a polynomial vector: entry (i, j) = dZ_i/dx_j."""
    Z = list(Z)
    if not Z:
        raise ValueError("empty polynomial vector")
    nvars = Z[0].nvars
    rows = [[Zi.diff(j) for j in range(nvars)] for Zi in Z]
    return PolyMatrix.from_entries(nvars, rows)


class PolyMatrix:
    """Matrix with polynomial entries, stored as exponent -> coefficient matrix."""

    __slots__ = ("nvars", "rows", "cols", "coeffs")

    def __init__(self, nvars: int, rows: int, cols: int, coeffs=None):
        self.nvars = int(nvars)
        self.rows = int(rows)
        self.cols = int(cols)
        clean = {}
        if coeffs:
            for exp, mat in dict(coeffs).items():
                e = tuple(int(a) for a in exp)
                if len(e) != self.nvars or any(a < 0 for a in e):
                    raise ValueError(f"bad exponent {e}")
                m = np.array(mat, dtype=float)
                if m.shape != (self.rows, self.cols):
                    raise ValueError(f"coefficient for {e} has shape {m.shape}, "
                                     f"expected {(self.rows, self.cols)}")
                if np.any(m != 0.0):
                    clean[e] = m
        self.coeffs = clean

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(nvars: int, rows: int, cols: int) -> "PolyMatrix":
        return PolyMatrix(nvars, rows, cols)

    @staticmethod
    def constant(nvars: int, mat) -> "PolyMatrix":
        mat = np.array(mat, dtype=float)
        if mat.ndim != 2:
            raise ValueError("constant matrix must be 2-D")
        return PolyMatrix(nvars, mat.shape[0], mat.shape[1],
                          {(0,) * nvars: mat})

    @staticmethod
    def identity(nvars: int, n: int) -> "PolyMatrix":
        return PolyMatrix.constant(nvars, np.eye(n))

    @staticmethod
    def from_entries(nvars: int, entries) -> "PolyMatrix":
        """Build from a nested list of Polynomial / float entries."""
        rows = len(entries)
        cols = len(entries[0])
        coeffs = {}
        for i, row in enumerate(entries):
            if len(row) != cols:
                raise ValueError("ragged entry rows")
            for j, v in enumerate(row):
                if isinstance(v, (int, float)):
                    v = Polynomial.constant(nvars, v)
                if v.nvars != nvars:
                    raise ValueError("entry has wrong variable count")
                for e, c in v.terms.items():
                    m = coeffs.setdefault(e, np.zeros((rows, cols)))
                    m[i, j] += c
        return PolyMatrix(nvars, rows, cols, coeffs)

    @staticmethod
    def from_column(Z: Sequence[Polynomial]) -> "PolyMatrix":
        """Column vector (p x 1) from a sequence of polynomials."""
        return PolyMatrix.from_entries(Z[0].nvars, [[z] for z in Z])

    # -- structure ---------------------------------------------------------

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.coeffs), default=0)

    def entry(self, i: int, j: int) -> Polynomial:
        return Polynomial(self.nvars,
                          {e: m[i, j] for e, m in self.coeffs.items() if m[i, j] != 0.0})

    def row(self, i: int) -> "PolyMatrix":
        return PolyMatrix(self.nvars, 1, self.cols,
                          {e: m[i:i + 1, :] for e, m in self.coeffs.items()})

    def variables_present(self) -> tuple:
        present = set()
        for e in self.coeffs:
            for j, a in enumerate(e):
                if a:
                    present.add(j)
        return tuple(sorted(present))

    def is_zero(self) -> bool:
        return not self.coeffs

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.rows != self.cols:
            return False
        return all(np.max(np.abs(m - m.T)) <= tol for m in self.coeffs.values())

    def prune(self, tol: float = 1e-14) -> "PolyMatrix":
        out = {}
        for e, m in self.coeffs.items():
            m2 = np.where(np.abs(m) > tol, m, 0.0)
            if np.any(m2 != 0.0):
                out[e] = m2
        return PolyMatrix(self.nvars, self.rows, self.cols, out)

    # -- algebra -----------------------------------------------------------

    def __add__(self, other: "PolyMatrix") -> "PolyMatrix":
        if (self.nvars, self.rows, self.cols) != (other.nvars, other.rows, other.cols):
            raise ValueError("shape/variable mismatch in matrix addition")
        out = {e: m.copy() for e, m in self.coeffs.items()}
        for e, m in other.coeffs.items():
            if e in out:
                out[e] = out[e] + m
            else:
                out[e] = m.copy()
        return PolyMatrix(self.nvars, self.rows, self.cols, out)

    def __sub__(self, other: "PolyMatrix") -> "PolyMatrix":
        return self + (other * -1.0)

    def __mul__(self, other):
        """Scale by a scalar or multiply entrywise by a scalar Polynomial."""
        if isinstance(other, (int, float)):
            return PolyMatrix(self.nvars, self.rows, self.cols,
                              {e: m * other for e, m in self.coeffs.items()})
        if isinstance(other, Polynomial):
            out = {}
            for e1, m in self.coeffs.items():
                for e2, c in other.terms.items():
                    e = tuple(a + b for a, b in zip(e1, e2))
                    if e in out:
                        out[e] = out[e] + m * c
                    else:
                        out[e] = m * c
            return PolyMatrix(self.nvars, self.rows, self.cols, out)
        return NotImplemented

    __rmul__ = __mul__

    def __matmul__(self, other: "PolyMatrix") -> "PolyMatrix":
        if isinstance(other, np.ndarray):
            other = PolyMatrix.constant(self.nvars, other)
        if self.nvars != other.nvars:
            raise ValueError("mixed variable counts in matmul")
        if self.cols != other.rows:
            raise ValueError(f"shape mismatch {self.shape} @ {other.shape}")
        out = {}
        for e1, m1 in self.coeffs.items():
            for e2, m2 in other.coeffs.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                prod = m1 @ m2
                if e in out:
                    out[e] = out[e] + prod
                else:
                    out[e] = prod
        return PolyMatrix(self.nvars, self.rows, other.cols, out)

    def __rmatmul__(self, other):
        if isinstance(other, np.ndarray):
            return PolyMatrix.constant(self.nvars, other) @ self
        return NotImplemented

    @property
    def T(self) -> "PolyMatrix":
        return PolyMatrix(self.nvars, self.cols, self.rows,
                          {e: m.T for e, m in self.coeffs.items()})

    def partial(self, index: int) -> "PolyMatrix":
        """Entrywise partial derivative with respect to variable ``index``."""
        out = {}
        for e, m in self.coeffs.items():
            a = e[index]
            if a:
                de = list(e)
                de[index] = a - 1
                de = tuple(de)
                if de in out:
                    out[de] = out[de] + m * a
                else:
                    out[de] = m * a
        return PolyMatrix(self.nvars, self.rows, self.cols, out)

    # -- evaluation --------------------------------------------------------

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros((self.rows, self.cols))
        for e, m in self.coeffs.items():
            v = 1.0
            for j, a in enumerate(e):
                if a:
                    v *= x[j] ** a
            out += v * m
        return out

    def eval_many(self, X: np.ndarray) -> np.ndarray:
        """Evaluate at each row of ``X``; returns shape (N, rows, cols)."""
        X = np.asarray(X, dtype=float)
        out = np.zeros((X.shape[0], self.rows, self.cols))
        for e, m in self.coeffs.items():
            v = np.ones(X.shape[0])
            for j, a in enumerate(e):
                if a:
                    v = v * X[:, j] ** a
            out += v[:, None, None] * m
        return out

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"polymatrix {self.rows} {self.cols} {self.nvars}"]
        for i in range(self.rows):
            for j in range(self.cols):
                lines.append(self.entry(i, j).to_text())
        return "\n".join(lines)

    def __repr__(self):
        return f"PolyMatrix({self.rows}x{self.cols}, nvars={self.nvars}, degree={self.degree})"

    def __eq__(self, other):
        if not isinstance(other, PolyMatrix):
            return NotImplemented
        if (self.nvars, self.rows, self.cols) != (other.nvars, other.rows, other.cols):
            return False
        if set(self.coeffs) != set(other.coeffs):
            return False
        return all(np.array_equal(self.coeffs[e], other.coeffs[e]) for e in self.coeffs)


def polymatrix_from_text(text: str) -> PolyMatrix:
    """Parse the block grammar emitted by :meth:`PolyMatrix.to_text`."""
    lines = [ln for ln in text.strip().splitlines()]
    header = lines[0].split()
    if len(header) != 4 or header[0] != "polymatrix":
        raise ValueError(f"bad polymatrix header: {lines[0]!r}")
    rows, cols, nvars = int(header[1]), int(header[2]), int(header[3])
    if len(lines) != 1 + rows * cols:
        raise ValueError(f"expected {rows * cols} entry lines, got {len(lines) - 1}")
    entries = []
    k = 1
    for _ in range(rows):
        row = []
        for _ in range(cols):
            row.append(poly_from_text(lines[k], nvars))
            k += 1
        entries.append(row)
    return PolyMatrix.from_entries(nvars, entries)


class SystemDef:
    """Control-affine polynomial system ``xdot = A(x) Z(x) + B(x) u``.

    ``A`` is n x p, ``B`` is n x m, and ``Z`` is a vector of p polynomials in
    the state with ``Z(0) = 0`` (so the origin is an equilibrium).  Derived
    fields computed at construction:

    * ``M``: the p x n Jacobian of ``Z``;
    * ``zero_rows``: indices of rows of ``B`` that are identically zero —
      the state components the input cannot reach directly;
    * ``reduced_vars``: the same indices viewed as the variables that the
      Lyapunov shape matrix ``P`` is allowed to depend on.

    Instances are treated as immutable after construction.
    """

    def __init__(self, A: PolyMatrix, B: PolyMatrix, Z: Sequence[Polynomial]):
        Z = tuple(Z)
        if not Z:
            raise ValueError("Z must be nonempty")
        nvars = Z[0].nvars
        if any(z.nvars != nvars for z in Z):
            raise ValueError("Z entries disagree on variable count")
        if A.nvars != nvars or B.nvars != nvars:
            raise ValueError("A/B variable count must match Z")
        n = A.rows
        p = len(Z)
        if A.cols != p:
            raise ValueError(f"A has {A.cols} columns but Z has {p} entries")
        if B.rows != n:
            raise ValueError("B row count must match A")
        if nvars != n:
            raise ValueError(f"state dimension {n} != variable count {nvars}")
        origin = np.zeros(n)
        for i, z in enumerate(Z):
            if z(origin) != 0.0:
                raise ValueError(f"Z[{i}] does not vanish at the origin")
        self.A = A
        self.B = B
        self.Z = Z
        self.n = n
        self.p = p
        self.m = B.cols
        self.M = jacobian(Z)
        self.zero_rows = tuple(i for i in range(n) if B.row(i).is_zero())
        self.reduced_vars = self.zero_rows

    def z_at(self, x) -> np.ndarray:
        return np.array([z(x) for z in self.Z])

    def z_many(self, X: np.ndarray) -> np.ndarray:
        """Z evaluated at each row of X; returns (N, p)."""
        return np.column_stack([z.eval_many(X) for z in self.Z])

    def rhs(self, x, u) -> np.ndarray:
        """State derivative ``A(x) Z(x) + B(x) u``."""
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return self.A(x) @ self.z_at(x) + self.B(x) @ u

    def to_text(self) -> str:
        return "\n".join([
            self.A.to_text(),
            self.B.to_text(),
            PolyMatrix.from_column(self.Z).to_text(),
        ])

    @staticmethod
    def from_text(text: str) -> "SystemDef":
        blocks = _split_polymatrix_blocks(text)
        if len(blocks) != 3:
            raise ValueError(f"expected 3 polymatrix blocks, got {len(blocks)}")
        A = polymatrix_from_text(blocks[0])
        B = polymatrix_from_text(blocks[1])
        Zmat = polymatrix_from_text(blocks[2])
        if Zmat.cols != 1:
            raise ValueError("Z block must be a column vector")
        Z = [Zmat.entry(i, 0) for i in range(Zmat.rows)]
        return SystemDef(A, B, Z)

    def __repr__(self):
        return f"SystemDef(n={self.n}, m={self.m}, p={self.p}, zero_rows={self.zero_rows})"


def _split_polymatrix_blocks(text: str):
    """Split concatenated polymatrix blocks on their header lines."""
    blocks = []
    current = None
    for ln in text.strip().splitlines():
        if ln.startswith("polymatrix "):
            if current:
                blocks.append("\n".join(current))
            current = [ln]
        elif current is not None:
            current.append(ln)
        elif ln.strip():
            raise ValueError(f"unexpected line before first block: {ln!r}")
    if current:
        blocks.append("\n".join(current))
    return blocks


def closed_loop(sys: SystemDef, K: PolyMatrix) -> SystemDef:
    """Autonomous system obtained by substituting ``u = K(x) Z(x)``.

    Returns a :class:`SystemDef` with dynamics ``(A + B K)(x) Z(x)`` and a
    zero input matrix, so every state row is input-free and a Lyapunov shape
    matrix for it may depend on the full state.
    """
    if K.rows != sys.m or K.cols != sys.p:
        raise ValueError(f"controller must be {sys.m} x {sys.p}, got {K.shape}")
    A_cl = sys.A + sys.B @ K
    B_cl = PolyMatrix.zero(sys.n, sys.n, sys.m)
    return SystemDef(A_cl, B_cl, sys.Z)


def stability_matrix_at(sys: SystemDef, P: PolyMatrix, F: PolyMatrix,
                        x) -> np.ndarray:
    """Numerically evaluate the closed-loop Lyapunov decrease matrix at ``x``.

    Returns ``P A^T M^T + M A P + F^T B^T M^T + M B F
    - sum_{j in zero_rows} dP/dx_j * (row_j(A) Z)`` with every factor
    evaluated pointwise — this is the evaluation route used to cross-check
    the symbolic constraint compiler, so it deliberately avoids symbolic
    expansion.
    """
    x = np.asarray(x, dtype=float)
    A = sys.A(x)
    B = sys.B(x)
    M = sys.M(x)
    Pv = P(x)
    Fv = F(x)
    S = Pv @ A.T @ M.T + M @ A @ Pv + Fv.T @ B.T @ M.T + M @ B @ Fv
    if sys.zero_rows:
        Zv = sys.z_at(x)
        for j in sys.zero_rows:
            xdot_j = float(A[j, :] @ Zv)  # row j of B is zero by definition
            S = S - P.partial(j)(x) * xdot_j
    return S
