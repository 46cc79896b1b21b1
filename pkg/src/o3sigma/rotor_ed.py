"""Truncated O(3) rotor Hamiltonian in the spherical-harmonic product basis.

Each site carries states |l, m> with l <= l_max, ordered by l ascending and
then m from -l to l.  The full basis is site-major (site 0 is the slowest
index), so a product state maps to a flat index in base (l_max+1)**2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

DENSE_LIMIT = 2000
DEFAULT_MAX_DIM = 2_000_000
EIG_TOL = 1e-10


class DimensionError(ValueError):
    """Requested Hilbert space exceeds the configured cap."""


class EigensolverError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ModelParams:
    n_sites: int
    g_sq: float
    l_max: int = 3
    boundary: str = "periodic"

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites < 2:
            raise ValueError(f"n_sites must be an integer >= 2, got {self.n_sites}")
        if not self.g_sq > 0:
            raise ValueError(f"g_sq must be positive, got {self.g_sq}")
        if int(self.l_max) != self.l_max or self.l_max < 0:
            raise ValueError(f"l_max must be a non-negative integer, got {self.l_max}")
        if self.boundary != "periodic":
            raise ValueError("only periodic boundaries are supported")

    @property
    def local_dim(self) -> int:
        return (self.l_max + 1) ** 2

    @property
    def dim(self) -> int:
        return self.local_dim**self.n_sites

    def links(self) -> list[tuple[int, int]]:
        """Nearest-neighbour pairs (x, x+1 mod L), one per site."""
        return [(x, (x + 1) % self.n_sites) for x in range(self.n_sites)]


def local_states(l_max: int) -> list[tuple[int, int]]:
    return [(l, m) for l in range(l_max + 1) for m in range(-l, l + 1)]


def local_index(l: int, m: int) -> int:
    return l * l + (m + l)


@dataclass(frozen=True)
class AngularBasisState:
    quanta: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for l, m in self.quanta:
            if l < 0 or abs(m) > l:
                raise ValueError(f"invalid (l, m) = ({l}, {m})")

    def index(self, l_max: int) -> int:
        d = (l_max + 1) ** 2
        idx = 0
        for l, m in self.quanta:
            if l > l_max:
                raise ValueError(f"l = {l} exceeds l_max = {l_max}")
            idx = idx * d + local_index(l, m)
        return idx

    @classmethod
    def from_index(cls, index: int, n_sites: int, l_max: int) -> "AngularBasisState":
        d = (l_max + 1) ** 2
        if not 0 <= index < d**n_sites:
            raise ValueError(f"index {index} out of range")
        states = local_states(l_max)
        digits = []
        for _ in range(n_sites):
            index, r = divmod(index, d)
            digits.append(states[r])
        return cls(tuple(reversed(digits)))


# ---------------------------------------------------------------------------
# Wigner 3j symbols

@lru_cache(maxsize=None)
def _log_factorial(n: int) -> float:
    return math.lgamma(n + 1)


def _twice(x, name: str) -> int:
    t = 2 * x
    ti = int(round(t))
    if abs(t - ti) > 1e-9:
        raise ValueError(f"{name} = {x} is not an integer or half-integer")
    return ti


@lru_cache(maxsize=65536)
def _w3j_twice(a: int, b: int, c: int, d: int, e: int, f: int) -> float:
    # arguments are 2*j1, 2*j2, 2*j3, 2*m1, 2*m2, 2*m3
    if d + e + f != 0:
        return 0.0
    if c < abs(a - b) or c > a + b or (a + b + c) % 2:
        return 0.0
    if (a + d) % 2 or (b + e) % 2 or (c + f) % 2:
        return 0.0
    if d == 0 and e == 0 and f == 0 and ((a + b + c) // 2) % 2:
        return 0.0
    lf = _log_factorial
    # everything below is an integer once halved
    t1 = (c - b + d) // 2
    t2 = (c - a - e) // 2
    t3 = (a + b - c) // 2
    t4 = (a - d) // 2
    t5 = (b + e) // 2
    kmin = max(0, -t1, -t2)
    kmax = min(t3, t4, t5)
    if kmin > kmax:
        return 0.0
    log_pre = 0.5 * (
        lf((a + b - c) // 2) + lf((a - b + c) // 2) + lf((-a + b + c) // 2) - lf((a + b + c) // 2 + 1)
        + lf((a + d) // 2) + lf((a - d) // 2) + lf((b + e) // 2) + lf((b - e) // 2)
        + lf((c + f) // 2) + lf((c - f) // 2)
    )
    total = 0.0
    for k in range(kmin, kmax + 1):
        log_den = lf(k) + lf(t1 + k) + lf(t2 + k) + lf(t3 - k) + lf(t4 - k) + lf(t5 - k)
        total += (-1) ** k * math.exp(log_pre - log_den)
    phase = (a - b - f) // 2
    return -total if phase % 2 else total


def wigner_3j(j1, j2, j3, m1, m2, m3) -> float:
    """Wigner 3j symbol via the Racah sum; half-integer arguments allowed."""
    tw = [_twice(v, n) for v, n in zip((j1, j2, j3, m1, m2, m3), ("j1", "j2", "j3", "m1", "m2", "m3"))]
    for j, m, n in ((tw[0], tw[3], 1), (tw[1], tw[4], 2), (tw[2], tw[5], 3)):
        if j < 0:
            raise ValueError(f"j{n} must be non-negative")
        if abs(m) > j:
            raise ValueError(f"|m{n}| exceeds j{n}")
    return _w3j_twice(*tw)


def x_matrix_element(l1: int, m1: int, M: int, l2: int, m2: int) -> float:
    """<l1 m1| X_M |l2 m2> for the rank-one spherical components of the unit vector."""
    if M not in (-1, 0, 1):
        raise ValueError("M must be -1, 0 or 1")
    for l, m in ((l1, m1), (l2, m2)):
        if l < 0 or abs(m) > l:
            raise ValueError(f"invalid (l, m) = ({l}, {m})")
    if abs(l1 - l2) != 1 or -m1 + M + m2 != 0:
        return 0.0
    sign = -1.0 if m1 % 2 else 1.0
    return (sign * math.sqrt((2 * l1 + 1) * (2 * l2 + 1))
            * wigner_3j(l1, 1, l2, 0, 0, 0) * wigner_3j(l1, 1, l2, -m1, M, m2))


@lru_cache(maxsize=32)
def _site_operators(l_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    states = local_states(l_max)
    d = len(states)
    X = {M: np.zeros((d, d)) for M in (-1, 0, 1)}
    for i, (l1, m1) in enumerate(states):
        for j, (l2, m2) in enumerate(states):
            if abs(l1 - l2) != 1:
                continue
            M = m1 - m2
            if M in X:
                X[M][i, j] = x_matrix_element(l1, m1, M, l2, m2)
    n_plus, n_minus, n_z = -X[1], X[-1], X[0]
    for a in (n_plus, n_minus, n_z):
        a.setflags(write=False)
    return n_plus, n_minus, n_z


def site_operators(l_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Truncated (n+, n-, n_z) on one site."""
    return _site_operators(l_max)


def link_operator(l_max: int) -> sp.csr_matrix:
    """n_x . n_y = n+ n- + n- n+ + n_z n_z on a pair of sites."""
    n_plus, n_minus, n_z = site_operators(l_max)
    op = (sp.kron(n_plus, n_minus) + sp.kron(n_minus, n_plus) + sp.kron(n_z, n_z)).tocsr()
    op.eliminate_zeros()
    return op


def kinetic_diagonal(params: ModelParams) -> np.ndarray:
    ll = np.array([l * (l + 1) for l, _ in local_states(params.l_max)], dtype=float)
    d = params.local_dim
    diag = np.zeros(params.dim)
    for x in range(params.n_sites):
        shape = [1] * params.n_sites
        shape[x] = d
        diag = (diag.reshape((d,) * params.n_sites) + ll.reshape(shape)).ravel()
    return diag / (2.0 * params.g_sq)


def _embed_pair(op2: sp.spmatrix, x: int, y: int, n_sites: int, d: int) -> sp.csr_matrix:
    """Embed a two-site operator acting on sites (x, y) into the full chain."""
    if y < x:
        # swap the tensor factors of the pair operator
        perm = np.arange(d * d).reshape(d, d).T.ravel()
        op2 = op2.tocsr()[perm][:, perm]
        x, y = y, x
    if y == x + 1:
        left = sp.identity(d**x, format="csr")
        right = sp.identity(d ** (n_sites - y - 1), format="csr")
        return sp.kron(sp.kron(left, op2), right, format="csr")
    # non-adjacent pair (periodic wrap for L >= 3): go through coordinates
    coo = op2.tocoo()
    dim = d**n_sites
    idx = np.arange(dim).reshape((d,) * n_sites)
    rows, cols, vals = [], [], []
    for r, c, v in zip(coo.row, coo.col, coo.data):
        rx, ry = divmod(r, d)
        cx, cy = divmod(c, d)
        sel_r = [slice(None)] * n_sites
        sel_c = [slice(None)] * n_sites
        sel_r[x], sel_r[y] = rx, ry
        sel_c[x], sel_c[y] = cx, cy
        rr = idx[tuple(sel_r)].ravel()
        cc = idx[tuple(sel_c)].ravel()
        rows.append(rr)
        cols.append(cc)
        vals.append(np.full(rr.size, v))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim))


def interaction_operator(params: ModelParams) -> sp.csr_matrix:
    """Sum over links of n_x . n_{x+1} (without the -g^2 prefactor)."""
    d = params.local_dim
    op2 = link_operator(params.l_max)
    total = sp.csr_matrix((params.dim, params.dim))
    for x, y in params.links():
        total = total + _embed_pair(op2, x, y, params.n_sites, d)
    return total.tocsr()


@dataclass(frozen=True)
class SparseHermitian:
    """Hermitian matrix stored as its upper triangle (row <= col)."""

    dimension: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    _full: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if np.any(self.rows > self.cols):
            raise ValueError("stored entries must satisfy row <= col")
        diag = self.rows == self.cols
        if np.any(np.abs(np.imag(self.values[diag])) > 0):
            raise ValueError("diagonal entries must be real")

    @classmethod
    def from_matrix(cls, m, tol: float = 0.0) -> "SparseHermitian":
        m = sp.csr_matrix(m)
        if abs(m - m.getH()).max() > 1e-12 * max(1.0, abs(m).max()):
            raise ValueError("matrix is not Hermitian")
        upper = sp.triu(m).tocoo()
        keep = np.abs(upper.data) > tol
        rows, cols, vals = upper.row[keep], upper.col[keep], upper.data[keep]
        vals = vals.astype(complex)
        d = rows == cols
        vals[d] = vals[d].real
        order = np.lexsort((cols, rows))
        return cls(m.shape[0], rows[order].astype(np.int64), cols[order].astype(np.int64), vals[order])

    @property
    def is_real(self) -> bool:
        return not np.any(np.imag(self.values))

    def to_sparse(self) -> sp.csr_matrix:
        if self._full is not None:
            return self._full
        vals = self.values.real if self.is_real else self.values
        upper = sp.csr_matrix((vals, (self.rows, self.cols)), shape=(self.dimension, self.dimension))
        strict = sp.triu(upper, k=1)
        full = (upper + strict.getH()).tocsr()
        object.__setattr__(self, "_full", full)
        return full

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def write_triplets(self, path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"dim {self.dimension} hermitian upper\n")
            for r, c, v in zip(self.rows, self.cols, self.values):
                fh.write(f"{r} {c} {v.real:.17g} {v.imag:.17g}\n")

    @classmethod
    def read_triplets(cls, path) -> "SparseHermitian":
        with Path(path).open(encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 4 or header[0] != "dim" or header[2:] != ["hermitian", "upper"]:
                raise ValueError(f"bad header: {' '.join(header)}")
            dim = int(header[1])
            data = np.loadtxt(fh, ndmin=2) if dim else np.zeros((0, 4))
        if data.size == 0:
            data = np.zeros((0, 4))
        return cls(dim, data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2] + 1j * data[:, 3])


def build_rotor_hamiltonian(params: ModelParams, max_dim: int = DEFAULT_MAX_DIM) -> SparseHermitian:
    """H = (1/2g^2) sum_x L^2(x) - g^2 sum_x n(x).n(x+1) in the truncated basis."""
    if params.dim > max_dim:
        raise DimensionError(f"dimension {params.dim} exceeds cap {max_dim}")
    h = sp.diags(kinetic_diagonal(params)) - params.g_sq * interaction_operator(params)
    return SparseHermitian.from_matrix(h)


def low_spectrum(h: SparseHermitian, k: int, tol: float = EIG_TOL,
                 maxiter: int | None = None) -> list[tuple[float, np.ndarray]]:
    """The k lowest eigenpairs, ascending."""
    n = h.dimension
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if n <= DENSE_LIMIT or k >= n - 1:
        w, v = scipy.linalg.eigh(h.to_dense(), subset_by_index=(0, k - 1))
    else:
        m = h.to_sparse()
        try:
            w, v = eigsh(m, k=k, which="SA", tol=tol, maxiter=maxiter,
                         ncv=min(n, max(2 * k + 1, 40)))
        except ArpackNoConvergence as exc:
            raise EigensolverError(
                "Lanczos iteration did not converge",
                {"requested": k, "converged": len(exc.eigenvalues), "tol": tol, "maxiter": maxiter},
            ) from exc
        order = np.argsort(w)
        w, v = w[order], v[:, order]
    return [(float(w[i]), v[:, i]) for i in range(k)]


def ground_energy(params: ModelParams) -> float:
    return low_spectrum(build_rotor_hamiltonian(params), 1)[0][0]


def _gap(params: ModelParams) -> float:
    spec = low_spectrum(build_rotor_hamiltonian(params), 2)
    return spec[1][0] - spec[0][0]


def mass_gap(params: ModelParams) -> tuple[float, float]:
    """Gap E1 - E0 at l_max, and its change from l_max - 1 as the truncation error."""
    if params.l_max < 2:
        raise ValueError("mass_gap needs l_max >= 2")
    gap = _gap(params)
    lower = ModelParams(params.n_sites, params.g_sq, params.l_max - 1, params.boundary)
    return gap, abs(gap - _gap(lower))


def flip_m_permutation(n_sites: int, l_max: int) -> np.ndarray:
    """Basis permutation implementing m(x) -> -m(x) on every site."""
    local = np.array([local_index(l, -m) for l, m in local_states(l_max)])
    d = len(local)
    idx = np.arange(d**n_sites).reshape((d,) * n_sites)
    for ax in range(n_sites):
        idx = np.take(idx, local, axis=ax)
    return idx.ravel()


def total_m(n_sites: int, l_max: int) -> np.ndarray:
    """Total magnetic quantum number of each product basis state."""
    ms = np.array([m for _, m in local_states(l_max)])
    d = len(ms)
    tot = np.zeros((d,) * n_sites, dtype=int)
    for x in range(n_sites):
        shape = [1] * n_sites
        shape[x] = d
        tot = tot + ms.reshape(shape)
    return tot.ravel()


def sector_indices(params: ModelParams, m_total: int = 0) -> np.ndarray:
    return np.flatnonzero(total_m(params.n_sites, params.l_max) == m_total)


def validate_states(states: Sequence[AngularBasisState], n_sites: int, l_max: int) -> None:
    for s in states:
        if len(s.quanta) != n_sites:
            raise ValueError("state length does not match n_sites")
        s.index(l_max)
