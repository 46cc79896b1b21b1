"""Circuits for the field model on qumodes: state preparation, energy
measurement and Trotterised time evolution.

Mode layout: the three field components of site x live on modes 3x, 3x+1, 3x+2.
Ancillas are never kept in the register.  An ancilla that is attached in
vacuum, touched by a few two-mode gates and then post-selected is folded into
an equivalent operator on the system modes (its Kraus operator), built from
the same truncated gate matrices, so the result equals the full simulation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import cv_core as cv
from .cv_core import GateKind, GateSpec, QumodeRegister
from .rotor_ed import ModelParams
from .sphere_field import SphereBasisSpec

KINETIC_PAIRS = ((0, 1, 2), (1, 2, 0), (2, 0, 1))   # (a, b, component of L measured)
HALF_PI = 0.5 * math.pi
QUARTER_PI = 0.25 * math.pi
HALF_GAMMA_RTOL = 1e-3


class TruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    params: ModelParams
    spec: SphereBasisSpec
    n_max: int = 10
    gamma: float = 1e-3
    capital_gamma: float = 0.1
    dt: float = 0.0
    trotter_steps: int = 1
    pad: int | None = None
    leakage_limit: float | None = cv.DEFAULT_LEAKAGE_LIMIT
    prep_method: str = "decomposed"
    trotter_order: str = "interaction_first"

    def __post_init__(self):
        if self.spec.n_sites != self.params.n_sites:
            raise ValueError("spec and params disagree on n_sites")
        if not math.isclose(self.spec.g**2, self.params.g_sq, rel_tol=1e-12):
            raise ValueError("spec and params disagree on g")
        if self.n_max < 2:
            raise ValueError("n_max must be at least 2")
        if self.trotter_steps < 1:
            raise ValueError("trotter_steps must be >= 1")
        if self.prep_method not in ("decomposed", "direct"):
            raise ValueError("prep_method must be 'decomposed' or 'direct'")
        if self.trotter_order not in ("interaction_first", "kinetic_first"):
            raise ValueError("trotter_order must be 'interaction_first' or 'kinetic_first'")

    @property
    def n_modes(self) -> int:
        return 3 * self.params.n_sites


def mode(x: int, a: int) -> int:
    return 3 * x + a


def _mat(cfg: ProtocolConfig, kind: GateKind, param: float = 0.0, dagger: bool = False) -> np.ndarray:
    two = kind in cv.TWO_MODE
    return cv.gate_matrix(GateSpec(kind, param, (0, 1) if two else (0,), dagger), cfg.n_max, cfg.pad)


def _on_first(u: np.ndarray, n: int) -> np.ndarray:
    return np.kron(u, np.eye(n))


def _on_second(u: np.ndarray, n: int) -> np.ndarray:
    return np.kron(np.eye(n), u)


# ---------------------------------------------------------------------------
# ancilla folding

def ancilla_kraus(couplings: Sequence[np.ndarray], n: int, c_in: int = 0, c_out: int = 0):
    """Fold an ancilla through gates G_k acting on (system mode k, ancilla).

    Each G_k is an n^2 x n^2 matrix in (system, ancilla) order, applied in sequence.
    Returns (M, E): M = <c_out| G_K ... G_1 |c_in> on the K system modes and
    E = sum_c T_c^dag T_c, whose expectation is the norm left after the gates.
    """
    T = np.zeros((n, 1, 1), dtype=complex)
    T[c_in, 0, 0] = 1.0
    for G in couplings:
        G4 = G.reshape(n, n, n, n)                    # [o, c', i, c]
        T = np.einsum("acbd,dxy->cxayb", G4, T)
        c, X, _, Y, _ = T.shape
        T = T.reshape(c, X * n, Y * n)
    E = np.einsum("cxi,cxj->ij", T.conj(), T)
    return T[c_out], E


def apply_kraus(reg: QumodeRegister, M: np.ndarray, E: np.ndarray, modes: Sequence[int]) -> float:
    """Apply a post-selected Kraus operator in place; returns the success probability."""
    before = reg.current_norm_sq()
    k = len(modes)
    n = reg.n_max
    psi = reg.amplitudes
    Et = E.reshape((n,) * (2 * k))
    epsi = np.moveaxis(np.tensordot(Et, psi, axes=(list(range(k, 2 * k)), list(modes))), list(range(k)), list(modes))
    kept_norm = float(np.vdot(psi, epsi).real)
    out = np.moveaxis(np.tensordot(M.reshape((n,) * (2 * k)), psi, axes=(list(range(k, 2 * k)), list(modes))),
                      list(range(k)), list(modes))
    after = float(np.vdot(out, out).real)
    prob = after / kept_norm
    if prob < cv.POSTSELECT_MIN:
        raise cv.PostSelectionError(f"post-selection probability {prob:.3e} below {cv.POSTSELECT_MIN}")
    reg.leakage += max(0.0, before - kept_norm) / before
    reg.amplitudes = out / math.sqrt(after)
    reg.norm_sq = 1.0
    reg.postselection_probability *= prob
    if reg.leakage_limit is not None and reg.leakage > reg.leakage_limit:
        raise cv.LeakageError(f"cumulative leakage {reg.leakage:.3e} exceeds limit {reg.leakage_limit:.1e}")
    return prob


# ---------------------------------------------------------------------------
# state preparation

def _uab_gates(a: int, b: int, lam: float, g: float) -> list[GateSpec]:
    """exp(-i (lam / (sqrt2 g)) q_a^2 p_b) from cubic phase gates, beam splitters and Fourier gates.

    Uses 6 q_a^2 q_b = (q_a + q_b)^3 - (q_a - q_b)^3 - 2 q_b^3 in the Fourier frame of b.
    """
    s = lam / g
    return [
        GateSpec(GateKind.FOURIER, 0.0, (b,)),
        GateSpec(GateKind.CUBIC_PHASE, -s / math.sqrt(2), (b,)),
        GateSpec(GateKind.BEAM_SPLITTER, QUARTER_PI, (a, b)),
        GateSpec(GateKind.CUBIC_PHASE, s, (b,)),
        GateSpec(GateKind.CUBIC_PHASE, -s, (a,)),
        GateSpec(GateKind.BEAM_SPLITTER, QUARTER_PI, (b, a)),
        GateSpec(GateKind.FOURIER, 0.0, (b,), dagger=True),
    ]


@lru_cache(maxsize=16)
def uab_direct_matrix(n_max: int, coeff: float, pad: int | None = None) -> np.ndarray:
    """exp(-i coeff q_a^2 p_b) exponentiated directly on the padded space."""
    pad = cv.default_pad(n_max) if pad is None else pad
    big = n_max + pad
    q, p = cv.quadratures(big)
    u = cv._expm_hermitian(coeff * np.kron(q @ q, p))
    return u.reshape(big, big, big, big)[:n_max, :n_max, :n_max, :n_max].reshape(n_max**2, n_max**2)


def omega_site_circuit(cfg: ProtocolConfig) -> list[GateSpec]:
    """Gate list on modes (0, 1, 2, ancilla 3) before the ancilla measurement."""
    lam, g = cfg.spec.lambda_cutoff, cfg.spec.g
    gates: list[GateSpec] = []
    for a in (2, 1, 0):
        gates += _uab_gates(a, 3, lam, g)
    shift = g * lam / math.sqrt(2) * (1 + 2 / lam**2)
    gates.append(GateSpec(GateKind.DISPLACE, -shift, (3,)))    # exp(i shift p_b)
    return gates


@lru_cache(maxsize=32)
def _omega_site_cached(cfg: ProtocolConfig):
    reg = cv.vacuum_register(4, cfg.n_max, leakage_limit=cfg.leakage_limit)
    lam, g = cfg.spec.lambda_cutoff, cfg.spec.g
    if cfg.prep_method == "direct":
        u = uab_direct_matrix(cfg.n_max, lam / (math.sqrt(2) * g), cfg.pad)
        for a in (2, 1, 0):
            cv.apply_matrix(reg, u, (a, 3))
        shift = g * lam / math.sqrt(2) * (1 + 2 / lam**2)
        cv.apply_gate(reg, GateSpec(GateKind.DISPLACE, -shift, (3,)), cfg.pad)
    else:
        cv.apply_circuit(reg, omega_site_circuit(cfg), cfg.pad)
    out, prob = cv.project_mode(reg, 3, 0)
    return out.amplitudes.copy(), out.leakage, prob


def prepare_omega_site(cfg: ProtocolConfig) -> tuple[QumodeRegister, float]:
    """Three-mode state with radial profile peaked at |phi| = g; returns (register, success probability)."""
    amp, leak, prob = _omega_site_cached(cfg)
    reg = QumodeRegister(3, cfg.n_max, amp.copy(), 1.0, leak, cfg.leakage_limit, prob)
    return reg, prob


def prepare_omega(cfg: ProtocolConfig) -> QumodeRegister:
    site, _ = prepare_omega_site(cfg)
    return cv.tensor(*[site] * cfg.params.n_sites)


@lru_cache(maxsize=32)
def _link_kraus(n_max: int, pad: int | None, strength: float):
    """Kraus operator and norm operator of the per-component link entangler."""
    g1 = cv.gate_matrix(GateSpec(GateKind.CX, strength, (0, 1)), n_max, pad)
    g2 = cv.gate_matrix(GateSpec(GateKind.CX, -strength, (0, 1)), n_max, pad)
    return ancilla_kraus([g1, g2], n_max)


def entangle_links(reg: QumodeRegister, cfg: ProtocolConfig, alpha: float) -> QumodeRegister:
    """Multiply by exp(-(alpha / 2L) (phi(x) - phi(x+1))^2) on every link via CX gates and
    vacuum-projected ancillas."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        return reg
    s = math.sqrt(2 * alpha / cfg.params.n_sites)
    M, E = _link_kraus(cfg.n_max, cfg.pad, s)
    for x, y in cfg.params.links():
        for a in range(3):
            apply_kraus(reg, M, E, (mode(x, a), mode(y, a)))
    return reg


def prepare_cc(cfg: ProtocolConfig, alpha: float) -> QumodeRegister:
    return entangle_links(prepare_omega(cfg), cfg, alpha)


def prepare_cc_excited(cfg: ProtocolConfig, alpha: float) -> QumodeRegister:
    """sum_x phi_3(x) |Omega> (to leading order in gamma), then the link entangler."""
    reg = prepare_omega(cfg)
    L = cfg.params.n_sites
    G = cv.gate_matrix(GateSpec(GateKind.CX, cfg.gamma, (0, 1)), cfg.n_max, cfg.pad)
    M, E = ancilla_kraus([G] * L, cfg.n_max, c_in=0, c_out=1)
    prob = apply_kraus(reg, M, E, [mode(x, 2) for x in range(L)])
    if prob < 1e-10:
        warnings.warn(f"single-photon post-selection probability is {prob:.2e}")
    return entangle_links(reg, cfg, alpha)


# ---------------------------------------------------------------------------
# energy measurement

def _cx_number_operator(cfg: ProtocolConfig, strength: float) -> tuple[np.ndarray, np.ndarray]:
    """For a vacuum ancilla hit by CX(strength) from one system mode: operators whose
    expectations give <N_c> and the surviving norm."""
    n = cfg.n_max
    G = cv.gate_matrix(GateSpec(GateKind.CX, strength, (0, 1)), n, cfg.pad).reshape(n, n, n, n)
    K = G[:, :, :, 0]                                      # [o, c, i]
    num = np.einsum("oci,ocj,c->ij", K.conj(), K, np.arange(n, dtype=float))
    norm = np.einsum("oci,ocj->ij", K.conj(), K)
    return num, norm


def _expect(reg: QumodeRegister, op: np.ndarray, modes: Sequence[int]) -> float:
    return cv.expectation_operator(reg, op, modes).real


def interaction_terms(reg: QumodeRegister, cfg: ProtocolConfig, method: str = "cx_ancilla",
                      capital_gamma: float | None = None) -> np.ndarray:
    """<(phi_a(x) - phi_a(y))^2> / 2 for every link and component, shape [n_links, 3].

    Truncation losses of the measurement gates (and of the ancilla norm) are booked on reg.leakage.
    """
    G = cfg.capital_gamma if capital_gamma is None else capital_gamma
    if G == 0:
        raise ZeroDivisionError("measurement strength must be non-zero")
    if method not in ("parameter_shift", "cx_ancilla"):
        raise ValueError("method must be 'parameter_shift' or 'cx_ancilla'")
    bs = _mat(cfg, GateKind.BEAM_SPLITTER, QUARTER_PI)
    out = np.zeros((len(cfg.params.links()), 3))
    if method == "cx_ancilla":
        num, norm = _cx_number_operator(cfg, G)
    else:
        pp, pm = _mat(cfg, GateKind.QUAD_PHASE, G), _mat(cfg, GateKind.QUAD_PHASE, -G)
    leak = reg.leakage
    for li, (x, y) in enumerate(cfg.params.links()):
        for a in range(3):
            mx, my = mode(x, a), mode(y, a)
            work = reg.copy()
            work.leakage_limit = None
            cv.apply_matrix(work, bs, (mx, my))
            if method == "cx_ancilla":
                kept = _expect(work, norm, [mx])
                val = 2 * _expect(work, num, [mx]) / kept / G**2
                leak = max(leak, work.leakage + max(0.0, 1.0 - kept))
            else:
                vals = []
                for u in (pp, pm):
                    w2 = work.copy()
                    cv.apply_matrix(w2, u, (mx,))
                    vals.append(cv.expectation_number(w2, mx))
                    leak = max(leak, w2.leakage)
                n0 = cv.expectation_number(work, mx)
                # the 1/2 in N = (q^2 + p^2)/2 versus a^dag a cancels in the difference
                val = (vals[0] + vals[1] - 2 * n0) / G**2
            out[li, a] = val
    reg.leakage = leak
    if reg.leakage_limit is not None and leak > reg.leakage_limit:
        raise cv.LeakageError(f"cumulative leakage {leak:.3e} exceeds limit {reg.leakage_limit:.1e}")
    return out


def consistent_interaction_terms(reg: QumodeRegister, cfg: ProtocolConfig, method: str = "cx_ancilla",
                                 rtol: float = HALF_GAMMA_RTOL) -> np.ndarray:
    """interaction_terms at Gamma, re-run at Gamma/2; warns when the two disagree.

    Both identities are exact for any Gamma, so a disagreement signals truncation damage.
    """
    full = interaction_terms(reg, cfg, method)
    half = interaction_terms(reg, cfg, method, cfg.capital_gamma / 2)
    dev = float(np.max(np.abs(full - half)))
    if dev > rtol * max(float(np.max(np.abs(full))), 1e-12):
        warnings.warn(f"interaction estimate changes by {dev:.2e} when Gamma is halved; raise n_max",
                      TruncationWarning, stacklevel=2)
    return full


def measure_interaction_energy(reg: QumodeRegister, cfg: ProtocolConfig, method: str = "cx_ancilla",
                               check: bool = True) -> float:
    """sum over links of (phi(x) - phi(x+1))^2 / 2."""
    terms = consistent_interaction_terms(reg, cfg, method) if check else interaction_terms(reg, cfg, method)
    return float(terms.sum())


def kinetic_terms(reg: QumodeRegister, cfg: ProtocolConfig, method: str = "split") -> np.ndarray:
    """<L_c^2(x)> for every site and component c, shape [L, 3]."""
    if method not in ("pairwise", "split"):
        raise ValueError("method must be 'pairwise' or 'split'")
    bs = _mat(cfg, GateKind.BEAM_SPLITTER, QUARTER_PI)
    f = _mat(cfg, GateKind.FOURIER)
    out = np.zeros((cfg.params.n_sites, 3))
    for x in range(cfg.params.n_sites):
        for a, b, c in KINETIC_PAIRS:
            ma, mb = mode(x, a), mode(x, b)
            work = reg.copy()
            work.leakage_limit = None
            cv.apply_matrix(work, f, (ma,))
            cv.apply_matrix(work, bs, (ma, mb))
            if method == "pairwise":
                val = cv.number_moment(work, {ma: -1, mb: 1}, 2)
            else:
                val = (2 * (cv.expectation_number_sq(work, ma) + cv.expectation_number_sq(work, mb))
                       - cv.number_moment(reg, {ma: 1, mb: 1}, 2))
            out[x, c] = val
    return out


def measure_kinetic_energy(reg: QumodeRegister, cfg: ProtocolConfig, method: str = "split") -> float:
    """(1 / 2g^2) sum_x <L^2(x)>."""
    return float(kinetic_terms(reg, cfg, method).sum() / (2 * cfg.params.g_sq))


@dataclass(frozen=True)
class EnergyReport:
    total: float
    kinetic: float
    interaction: float
    per_direction: tuple[float, float, float]
    spread: float
    leakage: float
    postselection_probability: float


def measure_energy(reg: QumodeRegister, cfg: ProtocolConfig, kinetic_method: str = "split",
                   interaction_method: str = "cx_ancilla", check: bool = True) -> EnergyReport:
    """Total energy and the three single-direction estimates (each scaled by 3).

    check=True repeats the interaction measurement at half the measurement strength.
    """
    kin = kinetic_terms(reg, cfg, kinetic_method)
    if check:
        inter = consistent_interaction_terms(reg, cfg, interaction_method)
    else:
        inter = interaction_terms(reg, cfg, interaction_method)
    G = cfg.params.g_sq
    const = -len(cfg.params.links()) * G
    kinetic = kin.sum() / (2 * G)
    interaction = inter.sum()
    dirs = tuple(float(3 * (kin[:, c].sum() / (2 * G) + inter[:, c].sum()) + const) for c in range(3))
    return EnergyReport(float(kinetic + interaction + const), float(kinetic), float(interaction), dirs,
                        float(max(dirs) - min(dirs)), float(reg.leakage), float(reg.postselection_probability))


# ---------------------------------------------------------------------------
# time evolution

def _restrict_pair(u: np.ndarray, big: int, n: int) -> np.ndarray:
    return u.reshape(big, big, big, big)[:n, :n, :n, :n].reshape(n * n, n * n)


def _padded(n_max: int, pad: int | None) -> tuple[int, int]:
    pad = cv.default_pad(n_max) if pad is None else pad
    return n_max + pad, pad


@lru_cache(maxsize=64)
def _interaction_step(n_max: int, pad: int | None, dt: float) -> np.ndarray:
    """exp(-i dt (q_x - q_y)^2 / 2) as BS(y, x) . P_x(-2 dt) . BS(x, y) on the ordered pair (x, y).

    The product is formed on the padded space and truncated once, so dt = 0 gives the identity.
    """
    big, pad = _padded(n_max, pad)
    bs = cv.gate_matrix(GateSpec(GateKind.BEAM_SPLITTER, QUARTER_PI, (0, 1)), big, 0)
    # BS on the swapped pair equals BS(-theta) on (x, y)
    bs_back = cv.gate_matrix(GateSpec(GateKind.BEAM_SPLITTER, -QUARTER_PI, (0, 1)), big, 0)
    p = cv.gate_matrix(GateSpec(GateKind.QUAD_PHASE, -2 * dt, (0,)), big, pad)
    return _restrict_pair(bs_back @ _on_first(p, big) @ bs, big, n_max)


@lru_cache(maxsize=64)
def _kinetic_step(n_max: int, pad: int | None, dt: float, g_sq: float) -> np.ndarray:
    """exp(-i dt L_c^2 / 2g^2) on the ordered pair (a, b): F_a^dag BS(b,a) CK K K BS(a,b) F_a."""
    big, _ = _padded(n_max, pad)
    f = cv.gate_matrix(GateSpec(GateKind.FOURIER, 0.0, (0,)), big, 0)
    fd = cv.gate_matrix(GateSpec(GateKind.FOURIER, 0.0, (0,), dagger=True), big, 0)
    bs = cv.gate_matrix(GateSpec(GateKind.BEAM_SPLITTER, QUARTER_PI, (0, 1)), big, 0)
    bs_back = cv.gate_matrix(GateSpec(GateKind.BEAM_SPLITTER, -QUARTER_PI, (0, 1)), big, 0)
    k = cv.gate_matrix(GateSpec(GateKind.KERR, -dt / (2 * g_sq), (0,)), big, 0)
    ck = cv.gate_matrix(GateSpec(GateKind.CROSS_KERR, dt / g_sq, (0, 1)), big, 0)
    u = _on_first(fd, big) @ bs_back @ ck @ np.kron(k, k) @ bs @ _on_first(f, big)
    return _restrict_pair(u, big, n_max)


def interaction_layer(reg: QumodeRegister, cfg: ProtocolConfig, dt: float) -> QumodeRegister:
    u = _interaction_step(cfg.n_max, cfg.pad, float(dt))
    for x, y in cfg.params.links():
        for a in range(3):
            cv.apply_matrix(reg, u, (mode(x, a), mode(y, a)))
    return reg


def kinetic_layer(reg: QumodeRegister, cfg: ProtocolConfig, dt: float) -> QumodeRegister:
    u = _kinetic_step(cfg.n_max, cfg.pad, float(dt), float(cfg.params.g_sq))
    for x in range(cfg.params.n_sites):
        for a, b, _ in KINETIC_PAIRS:
            cv.apply_matrix(reg, u, (mode(x, a), mode(x, b)))
    return reg


def trotter_evolve(reg: QumodeRegister, cfg: ProtocolConfig) -> QumodeRegister:
    """First-order splitting: trotter_steps repetitions of one interaction and one kinetic layer of cfg.dt."""
    for _ in range(cfg.trotter_steps):
        if cfg.trotter_order == "interaction_first":
            interaction_layer(reg, cfg, cfg.dt)
            kinetic_layer(reg, cfg, cfg.dt)
        else:
            kinetic_layer(reg, cfg, cfg.dt)
            interaction_layer(reg, cfg, cfg.dt)
    return reg


@dataclass(frozen=True)
class EvolutionResult:
    t: float
    probability: float
    leakage: float
    postselection_probability: float


def return_probability(cfg: ProtocolConfig, t: float) -> EvolutionResult:
    """Probability of the photon-number vacuum after evolving the product of prepared site states for time t."""
    if t < 0:
        raise ValueError("t must be non-negative")
    reg = prepare_omega(cfg)
    reg.leakage_limit = cfg.leakage_limit
    run = replace(cfg, dt=t / cfg.trotter_steps)
    trotter_evolve(reg, run)
    amp = reg.amplitudes[(0,) * reg.n_modes]
    prob = abs(amp) ** 2 / reg.current_norm_sq()
    return EvolutionResult(float(t), float(prob), float(reg.leakage), float(reg.postselection_probability))
