"""Fock-truncated continuous-variable simulator.

Each mode keeps photon numbers 0 .. n_max-1.  Quadratures are
q = (a + a^dag)/sqrt(2) and p = i (a^dag - a)/sqrt(2), so [q, p] = i.

Gate conventions:
    Squeeze(r)        exp(r (a^dag^2 - a^2) / 2)
    Displace(x)       exp(-i p x), shifts q -> q + x
    Rotate(theta)     exp(i N theta);  Fourier = Rotate(pi/2)
    QuadPhase(s)      exp(i s q^2 / 2)
    CubicPhase(s)     exp(i s q^3 / 3)
    Kerr(s)           exp(i s N^2)
    CrossKerr(s)      exp(i s N_1 N_2)
    BeamSplitter(th)  exp(th (a b^dag - a^dag b)), a -> a cos(th) - b sin(th)
    CX(s)             exp(-i s q_a p_b), q_b -> q_b + s q_a
    CZ(s)             exp(i s q_a q_b)

Non-diagonal gates are exponentiated on an enlarged space of n_max + pad
levels (exactly unitary there) and restricted to the first n_max levels;
the norm lost by that restriction is booked as leakage on the register.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MAX_AMPLITUDES = 200_000_000
DEFAULT_LEAKAGE_LIMIT = 1e-3
POSTSELECT_MIN = 1e-12


class MemoryCapError(MemoryError):
    pass


class LeakageError(RuntimeError):
    pass


class PostSelectionError(RuntimeError):
    pass


class GateKind(str, Enum):
    SQUEEZE = "Squeeze"
    DISPLACE = "Displace"
    ROTATE = "Rotate"
    FOURIER = "Fourier"
    QUAD_PHASE = "QuadPhase"
    CUBIC_PHASE = "CubicPhase"
    KERR = "Kerr"
    CROSS_KERR = "CrossKerr"
    BEAM_SPLITTER = "BeamSplitter"
    CX = "CX"
    CZ = "CZ"


TWO_MODE = {GateKind.CROSS_KERR, GateKind.BEAM_SPLITTER, GateKind.CX, GateKind.CZ}
DIAGONAL = {GateKind.ROTATE, GateKind.FOURIER, GateKind.KERR, GateKind.CROSS_KERR}
N_PARAMS = {GateKind.FOURIER: 0}


@dataclass(frozen=True)
class GateSpec:
    kind: GateKind
    param: float = 0.0
    targets: tuple[int, ...] = (0,)
    dagger: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", GateKind(self.kind))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        arity = 2 if self.kind in TWO_MODE else 1
        if len(self.targets) != arity:
            raise ValueError(f"{self.kind.value} acts on {arity} mode(s), got targets {self.targets}")
        if arity == 2 and self.targets[0] == self.targets[1]:
            raise ValueError("two-mode gate needs distinct targets")
        if any(t < 0 for t in self.targets):
            raise ValueError("targets must be non-negative")

    def inverse(self) -> "GateSpec":
        if self.kind == GateKind.FOURIER:
            return GateSpec(self.kind, 0.0, self.targets, not self.dagger)
        return GateSpec(self.kind, -self.param, self.targets, self.dagger)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "params": [] if self.kind == GateKind.FOURIER else [self.param],
             "targets": list(self.targets)}
        if self.dagger:
            d["dagger"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GateSpec":
        params = d.get("params", [])
        if isinstance(params, (int, float)):
            params = [params]
        kind = GateKind(d["kind"])
        if kind != GateKind.FOURIER and len(params) != 1:
            raise ValueError(f"{kind.value} takes exactly one parameter")
        return cls(kind, float(params[0]) if params else 0.0, tuple(d["targets"]), bool(d.get("dagger", False)))


# ---------------------------------------------------------------------------
# single-mode operators

def annihilation(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1)


def quadratures(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncated (q, p) matrices."""
    a = annihilation(n)
    ad = a.T
    return (a + ad) / math.sqrt(2), 1j * (ad - a) / math.sqrt(2)


def _expm_hermitian(h: np.ndarray) -> np.ndarray:
    """exp(-i h) for Hermitian h."""
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w)) @ v.conj().T


def default_pad(n_max: int) -> int:
    return n_max


@lru_cache(maxsize=512)
def _gate_matrix_cached(kind: GateKind, param: float, dagger: bool, n_max: int, pad: int) -> np.ndarray:
    n = np.arange(n_max, dtype=float)
    if kind in DIAGONAL:
        if kind == GateKind.ROTATE:
            ph = param * n
        elif kind == GateKind.FOURIER:
            ph = (-0.5 if dagger else 0.5) * math.pi * n
        elif kind == GateKind.KERR:
            ph = param * n * n
        else:
            ph = param * np.outer(n, n).ravel()
        return np.diag(np.exp(1j * ph))
    big = n_max + pad
    a = annihilation(big)
    ad = a.T
    q, p = quadratures(big)
    if kind == GateKind.SQUEEZE:
        # exp(G) with G = r (ad^2 - a^2)/2 anti-Hermitian; h = i G
        h = 1j * param * (ad @ ad - a @ a) / 2
    elif kind == GateKind.DISPLACE:
        h = param * p
    elif kind == GateKind.QUAD_PHASE:
        h = -param * (q @ q) / 2
    elif kind == GateKind.CUBIC_PHASE:
        h = -param * (q @ q @ q) / 3
    elif kind == GateKind.BEAM_SPLITTER:
        h = 1j * param * (np.kron(a, ad) - np.kron(ad, a))
    elif kind == GateKind.CX:
        h = param * np.kron(q, p)
    elif kind == GateKind.CZ:
        h = -param * np.kron(q, q)
    else:  # pragma: no cover
        raise ValueError(kind)
    u = _expm_hermitian(h)
    if kind in TWO_MODE:
        u = u.reshape(big, big, big, big)[:n_max, :n_max, :n_max, :n_max].reshape(n_max**2, n_max**2)
    else:
        u = u[:n_max, :n_max]
    return np.ascontiguousarray(u)


def gate_matrix(spec: GateSpec, n_max: int, pad: int | None = None) -> np.ndarray:
    """Truncated gate matrix (n_max x n_max, or n_max^2 x n_max^2 for two-mode gates).

    Two-mode matrices use the row-major pair index (i_first_target, i_second_target).
    """
    pad = default_pad(n_max) if pad is None else int(pad)
    m = _gate_matrix_cached(spec.kind, float(spec.param), bool(spec.dagger), int(n_max), pad)
    m.setflags(write=False)
    return m


# ---------------------------------------------------------------------------
# registers

@dataclass
class QumodeRegister:
    n_modes: int
    n_max: int
    amplitudes: np.ndarray
    norm_sq: float = 1.0
    leakage: float = 0.0
    leakage_limit: float | None = DEFAULT_LEAKAGE_LIMIT
    postselection_probability: float = 1.0
    max_amplitudes: int = field(default=DEFAULT_MAX_AMPLITUDES, repr=False)

    def __post_init__(self):
        check_memory(self.n_modes, self.n_max, self.max_amplitudes)
        shape = (self.n_max,) * self.n_modes
        if self.amplitudes.shape != shape:
            raise ValueError(f"amplitude shape {self.amplitudes.shape} does not match {shape}")

    def copy(self) -> "QumodeRegister":
        return QumodeRegister(self.n_modes, self.n_max, self.amplitudes.copy(), self.norm_sq, self.leakage,
                              self.leakage_limit, self.postselection_probability, self.max_amplitudes)

    def current_norm_sq(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def normalize(self) -> "QumodeRegister":
        n = self.current_norm_sq()
        self.amplitudes /= math.sqrt(n)
        self.norm_sq = 1.0
        return self

    def _book(self, before: float) -> None:
        after = self.current_norm_sq()
        self.leakage += max(0.0, before - after) / max(before, 1e-300)
        self.norm_sq = after
        if self.leakage_limit is not None and self.leakage > self.leakage_limit:
            raise LeakageError(f"cumulative leakage {self.leakage:.3e} exceeds limit {self.leakage_limit:.1e}")


def check_memory(n_modes: int, n_max: int, cap: int = DEFAULT_MAX_AMPLITUDES) -> None:
    if n_max < 1 or n_modes < 1:
        raise ValueError("need n_modes >= 1 and n_max >= 1")
    if n_max**n_modes > cap:
        raise MemoryCapError(f"{n_max}^{n_modes} amplitudes exceed the cap of {cap}")


def vacuum_register(n_modes: int, n_max: int, leakage_limit: float | None = DEFAULT_LEAKAGE_LIMIT,
                    max_amplitudes: int = DEFAULT_MAX_AMPLITUDES) -> QumodeRegister:
    check_memory(n_modes, n_max, max_amplitudes)
    amp = np.zeros((n_max,) * n_modes, dtype=complex)
    amp[(0,) * n_modes] = 1.0
    return QumodeRegister(n_modes, n_max, amp, 1.0, 0.0, leakage_limit, 1.0, max_amplitudes)


def fock_register(occupations: Sequence[int], n_max: int, **kw) -> QumodeRegister:
    reg = vacuum_register(len(occupations), n_max, **kw)
    reg.amplitudes[(0,) * len(occupations)] = 0.0
    reg.amplitudes[tuple(occupations)] = 1.0
    return reg


def register_from_amplitudes(amplitudes: np.ndarray, leakage_limit: float | None = DEFAULT_LEAKAGE_LIMIT) -> QumodeRegister:
    amplitudes = np.asarray(amplitudes, dtype=complex)
    n_max = amplitudes.shape[0]
    reg = QumodeRegister(amplitudes.ndim, n_max, amplitudes.copy(), 1.0, 0.0, leakage_limit)
    reg.norm_sq = reg.current_norm_sq()
    return reg


def apply_matrix(reg: QumodeRegister, u: np.ndarray, targets: Sequence[int]) -> QumodeRegister:
    """Contract a k-mode matrix (n^k x n^k) into the target axes, in place."""
    k = len(targets)
    n = reg.n_max
    if any(t >= reg.n_modes for t in targets):
        raise ValueError(f"target out of range for {reg.n_modes} modes")
    before = reg.current_norm_sq()
    ut = u.reshape((n,) * (2 * k))
    out = np.tensordot(ut, reg.amplitudes, axes=(list(range(k, 2 * k)), list(targets)))
    reg.amplitudes = np.moveaxis(out, list(range(k)), list(targets))
    reg._book(before)
    return reg


def apply_gate(reg: QumodeRegister, spec: GateSpec, pad: int | None = None) -> QumodeRegister:
    return apply_matrix(reg, gate_matrix(spec, reg.n_max, pad), spec.targets)


def apply_circuit(reg: QumodeRegister, gates: Iterable[GateSpec], pad: int | None = None) -> QumodeRegister:
    for g in gates:
        apply_gate(reg, g, pad)
    return reg


def project_mode(reg: QumodeRegister, mode: int, n: int) -> tuple[QumodeRegister, float]:
    """Post-select `mode` on photon number n; returns the reduced, renormalised register."""
    if not 0 <= n < reg.n_max:
        raise ValueError(f"photon number {n} outside [0, {reg.n_max})")
    if not 0 <= mode < reg.n_modes:
        raise ValueError("mode out of range")
    if reg.n_modes == 1:
        raise ValueError("cannot project the last remaining mode")
    total = reg.current_norm_sq()
    kept = np.take(reg.amplitudes, n, axis=mode)
    part = float(np.vdot(kept, kept).real)
    prob = part / total
    if prob < POSTSELECT_MIN:
        raise PostSelectionError(f"post-selection probability {prob:.3e} below {POSTSELECT_MIN}")
    out = QumodeRegister(reg.n_modes - 1, reg.n_max, kept / math.sqrt(part), 1.0, reg.leakage,
                         reg.leakage_limit, reg.postselection_probability * prob, reg.max_amplitudes)
    return out, prob


def tensor(*regs: QumodeRegister) -> QumodeRegister:
    n_max = regs[0].n_max
    if any(r.n_max != n_max for r in regs):
        raise ValueError("all registers need the same n_max")
    n_modes = sum(r.n_modes for r in regs)
    check_memory(n_modes, n_max, regs[0].max_amplitudes)
    amp = regs[0].amplitudes
    for r in regs[1:]:
        amp = np.multiply.outer(amp, r.amplitudes)
    out = QumodeRegister(n_modes, n_max, amp, float(np.prod([r.norm_sq for r in regs])),
                         sum(r.leakage for r in regs), regs[0].leakage_limit,
                         float(np.prod([r.postselection_probability for r in regs])), regs[0].max_amplitudes)
    return out


def append_vacuum(reg: QumodeRegister, count: int = 1) -> QumodeRegister:
    return tensor(reg, vacuum_register(count, reg.n_max, reg.leakage_limit, reg.max_amplitudes))


# ---------------------------------------------------------------------------
# expectation values

def _marginal_weights(reg: QumodeRegister, modes: Sequence[int]) -> np.ndarray:
    p = np.abs(reg.amplitudes) ** 2
    other = tuple(i for i in range(reg.n_modes) if i not in modes)
    w = p.sum(axis=other) if other else p
    # sum keeps remaining axes in ascending order; reorder to `modes`
    order = np.argsort(np.argsort(list(modes)))
    w = np.transpose(w, order) if len(modes) > 1 else w
    return w / p.sum()


def expectation_number(reg: QumodeRegister, mode: int) -> float:
    w = _marginal_weights(reg, [mode])
    return float(np.arange(reg.n_max) @ w)


def expectation_number_sq(reg: QumodeRegister, mode: int) -> float:
    w = _marginal_weights(reg, [mode])
    n = np.arange(reg.n_max)
    return float((n * n) @ w)


def expectation_cross_number(reg: QumodeRegister, mode_i: int, mode_j: int) -> float:
    if mode_i == mode_j:
        return expectation_number_sq(reg, mode_i)
    w = _marginal_weights(reg, [mode_i, mode_j])
    n = np.arange(reg.n_max, dtype=float)
    return float(n @ w @ n)


def number_moment(reg: QumodeRegister, coeffs: dict[int, int], power: int) -> float:
    """<(sum_m c_m N_m)^power> for integer coefficients."""
    modes = sorted(coeffs)
    w = _marginal_weights(reg, modes)
    grids = np.meshgrid(*[np.arange(reg.n_max)] * len(modes), indexing="ij")
    val = sum(coeffs[m] * g for m, g in zip(modes, grids))
    return float(np.sum(w * val.astype(float) ** power))


def expectation_operator(reg: QumodeRegister, op: np.ndarray, modes: Sequence[int]) -> complex:
    """<op> for a k-mode operator given as an n^k x n^k matrix, normalised by the state norm."""
    tmp = reg.copy()
    tmp.leakage_limit = None
    before = reg.current_norm_sq()
    apply_matrix(tmp, op, modes)
    return complex(np.vdot(reg.amplitudes, tmp.amplitudes) / before)


def overlap(reg1: QumodeRegister, reg2: QumodeRegister) -> complex:
    if reg1.amplitudes.shape != reg2.amplitudes.shape:
        raise ValueError("register shapes differ")
    return complex(np.vdot(reg1.amplitudes, reg2.amplitudes))


# ---------------------------------------------------------------------------
# file formats

def load_circuit(path) -> list[GateSpec]:
    with Path(path).open(encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("circuit file must hold a JSON array")
    return [GateSpec.from_dict(d) for d in data]


def save_circuit(gates: Sequence[GateSpec], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump([g.to_dict() for g in gates], fh, indent=1)


def save_register(reg: QumodeRegister, path, dtype: str = "complex128") -> None:
    """Raw little-endian amplitudes in `path` plus a JSON header in `path`.json."""
    path = Path(path)
    if dtype not in ("complex64", "complex128"):
        raise ValueError("dtype must be complex64 or complex128")
    arr = reg.amplitudes.astype(np.dtype(dtype).newbyteorder("<"))
    path.write_bytes(arr.tobytes(order="C"))
    header = {"n_modes": reg.n_modes, "n_max": reg.n_max, "dtype": dtype, "byteorder": "little",
              "shape": list(reg.amplitudes.shape), "norm_sq": reg.norm_sq, "leakage": reg.leakage,
              "postselection_probability": reg.postselection_probability}
    path.with_name(path.name + ".json").write_text(json.dumps(header, indent=1), encoding="utf-8")


def load_register(path) -> QumodeRegister:
    path = Path(path)
    header = json.loads(path.with_name(path.name + ".json").read_text(encoding="utf-8"))
    arr = np.frombuffer(path.read_bytes(), dtype=np.dtype(header["dtype"]).newbyteorder("<"))
    amp = arr.reshape(header["shape"]).astype(complex)
    reg = QumodeRegister(header["n_modes"], header["n_max"], amp, header["norm_sq"], header["leakage"],
                         DEFAULT_LEAKAGE_LIMIT, header["postselection_probability"])
    return reg
