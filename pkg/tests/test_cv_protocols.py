import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import expm

from o3sigma import cv_core as cv
from o3sigma.cv_core import GateKind, GateSpec
from o3sigma.cv_protocols import (
    ProtocolConfig, TruncationWarning, _uab_gates, ancilla_kraus, apply_kraus, entangle_links,
    interaction_layer, interaction_terms, kinetic_layer, kinetic_terms, measure_energy,
    measure_interaction_energy, mode, prepare_cc, prepare_cc_excited, prepare_omega, prepare_omega_site,
    return_probability, uab_direct_matrix,
)
from o3sigma.rotor_ed import ModelParams
from o3sigma.sphere_field import SphereBasisSpec, radial_moments

P2 = ModelParams(2, 1.0)


def _cfg(lam=1.0, n_max=8, **kw):
    kw.setdefault("leakage_limit", None)
    return ProtocolConfig(P2, SphereBasisSpec.for_model(P2, lam), n_max=n_max, **kw)


def _low_photon_state(n_modes, n_max, cap, seed):
    """Random state with at most `cap` photons per mode, so photon-number conserving gates never truncate."""
    rng = np.random.default_rng(seed)
    amp = np.zeros((n_max,) * n_modes, dtype=complex)
    sl = (slice(0, cap + 1),) * n_modes
    amp[sl] = rng.normal(size=(cap + 1,) * n_modes) + 1j * rng.normal(size=(cap + 1,) * n_modes)
    return cv.register_from_amplitudes(amp / np.linalg.norm(amp), leakage_limit=None)


# ---------------------------------------------------------------------------
# state preparation

def test_uab_decomposition_tracks_direct_exponential():
    n = 14
    gates = _uab_gates(0, 1, 1.0, 1.0)
    flipped = [gates[0], replace(gates[1], param=-gates[1].param)] + gates[2:]

    def run(circuit):
        reg = cv.vacuum_register(2, n, leakage_limit=None)
        return cv.apply_circuit(reg, circuit).amplitudes

    ref = cv.vacuum_register(2, n, leakage_limit=None)
    cv.apply_matrix(ref, uab_direct_matrix(n, 1 / math.sqrt(2)), (0, 1))
    err = np.linalg.norm(run(gates) - ref.amplitudes)
    err_flipped = np.linalg.norm(run(flipped) - ref.amplitudes)
    assert err < 0.05
    # the q_b^3 terms must cancel; with the other sign they add up
    assert err_flipped > 5 * err


def test_uab_direct_shifts_ancilla_by_square():
    n, c = 20, 0.3
    reg = cv.vacuum_register(2, n, leakage_limit=None)
    cv.apply_gate(reg, GateSpec(GateKind.DISPLACE, 1.2, (0,)))
    q, _ = cv.quadratures(n)
    before = cv.expectation_operator(reg, q @ q, [0]).real
    cv.apply_matrix(reg, uab_direct_matrix(n, c), (0, 1))
    assert cv.expectation_operator(reg, q, [1]).real == pytest.approx(c * before, rel=1e-4)


def _exact_success(g, lam):
    shift = g * g * (1 + 2 / lam**2)
    f = lambda r: 4 * r * r / math.sqrt(math.pi) * math.exp(-r * r - lam**2 * (r * r - shift) ** 2 / (4 * g * g))
    return quad(f, 0, 20, limit=200)[0]


@pytest.mark.parametrize("lam", [0.5, 0.7, 1.0])
def test_success_probability_matches_exact_integral(lam):
    _, prob = prepare_omega_site(_cfg(lam, 12, prep_method="direct"))
    assert prob == pytest.approx(_exact_success(1.0, lam), rel=0.02)


def test_success_probability_falls_above_peak():
    probs = [prepare_omega_site(_cfg(lam, 10, prep_method="direct"))[1] for lam in (2.0, 3.2, 5.0, 10.0)]
    assert all(0 < p <= 1 for p in probs)
    assert all(b < a for a, b in zip(probs, probs[1:]))


def test_prepared_state_radial_moment():
    cfg = _cfg(1.0, 10)
    reg, _ = prepare_omega_site(cfg)
    q, _ = cv.quadratures(cfg.n_max)
    phi_sq = sum(cv.expectation_operator(reg, q @ q, [a]).real for a in range(3))
    assert phi_sq == pytest.approx(radial_moments(cfg.spec).phi_sq, rel=0.05)


def test_prepared_state_is_rotation_invariant():
    # l = 0: all three components carry the same photon statistics, up to truncation
    def asymmetry(n_max):
        reg, _ = prepare_omega_site(_cfg(1.0, n_max, prep_method="direct"))
        n = [cv.expectation_number(reg, a) for a in range(3)]
        return (max(n) - min(n)) / np.mean(n)

    a8, a10, a12 = asymmetry(8), asymmetry(10), asymmetry(12)
    assert a12 < a10 < a8 and a10 < 1e-3


def test_zero_alpha_leaves_state_unchanged():
    cfg = _cfg(1.0, 6)
    a = prepare_omega(cfg).amplitudes
    b = prepare_cc(cfg, 0.0).amplitudes
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        entangle_links(prepare_omega(cfg), cfg, -1.0)


def _parity_third_component(reg, L):
    out = reg.amplitudes.copy()
    for x in range(L):
        sign = (-1.0) ** np.arange(reg.n_max)
        shape = [1] * reg.n_modes
        shape[mode(x, 2)] = reg.n_max
        out = out * sign.reshape(shape)
    return out


def test_ground_even_excited_odd_and_orthogonal():
    cfg = _cfg(1.0, 6, gamma=1e-2)
    ground = prepare_cc(cfg, 0.8)
    excited = prepare_cc_excited(cfg, 0.8)
    np.testing.assert_allclose(_parity_third_component(ground, 2), ground.amplitudes, atol=1e-13)
    np.testing.assert_allclose(_parity_third_component(excited, 2), -excited.amplitudes, atol=1e-13)
    assert abs(cv.overlap(ground, excited)) < 1e-12
    assert 0 < excited.postselection_probability < ground.postselection_probability


# ---------------------------------------------------------------------------
# ancilla folding

def test_kraus_matches_explicit_ancilla():
    n, s = 6, 0.4
    rng = np.random.default_rng(1)
    amp = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    amp[3:, :] = 0
    amp[:, 3:] = 0
    amp /= np.linalg.norm(amp)

    full = cv.tensor(cv.register_from_amplitudes(amp, None), cv.vacuum_register(1, n, None))
    cv.apply_gate(full, GateSpec(GateKind.CX, s, (0, 2)))
    cv.apply_gate(full, GateSpec(GateKind.CX, -s, (1, 2)))
    explicit, p_explicit = cv.project_mode(full, 2, 0)

    g1 = cv.gate_matrix(GateSpec(GateKind.CX, s, (0, 1)), n)
    g2 = cv.gate_matrix(GateSpec(GateKind.CX, -s, (0, 1)), n)
    M, E = ancilla_kraus([g1, g2], n)
    folded = cv.register_from_amplitudes(amp, None)
    p_folded = apply_kraus(folded, M, E, (0, 1))

    assert p_folded == pytest.approx(p_explicit, rel=1e-12)
    np.testing.assert_allclose(folded.amplitudes, explicit.amplitudes, atol=1e-12)
    assert folded.leakage == pytest.approx(1 - full.current_norm_sq(), rel=1e-6, abs=1e-14)


# ---------------------------------------------------------------------------
# measurement

def test_kinetic_methods_agree_with_direct_angular_momentum():
    cfg = _cfg(1.0, 6)
    reg = _low_photon_state(6, 6, 2, seed=3)
    q, p = cv.quadratures(6)
    pair = kinetic_terms(reg, cfg, "pairwise")
    split = kinetic_terms(reg, cfg, "split")
    np.testing.assert_allclose(pair, split, atol=1e-11)
    for x in range(2):
        for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            lc = np.kron(q, p) - np.kron(p, q)
            ref = cv.expectation_operator(reg, lc @ lc, [mode(x, a), mode(x, b)]).real
            assert pair[x, c] == pytest.approx(ref, abs=1e-10)


@pytest.mark.parametrize("method,tol", [("cx_ancilla", 2e-3), ("parameter_shift", 2e-2)])
def test_interaction_terms_match_direct(method, tol):
    n = 10
    cfg = _cfg(1.0, n, capital_gamma=0.1)
    reg = _low_photon_state(6, n, 1, seed=5)
    q, _ = cv.quadratures(n)
    terms = interaction_terms(reg, cfg, method)
    for li, (x, y) in enumerate(P2.links()):
        for a in range(3):
            d = np.kron(q, np.eye(n)) - np.kron(np.eye(n), q)
            ref = 0.5 * cv.expectation_operator(reg, d @ d, [mode(x, a), mode(y, a)]).real
            assert terms[li, a] == pytest.approx(ref, rel=tol)


def test_half_gamma_rerun_flags_truncation():
    coarse = _cfg(1.0, 6)
    with pytest.warns(TruncationWarning):
        measure_interaction_energy(prepare_cc(coarse, 0.8), coarse)
    fine = _cfg(1.0, 10)
    with warnings.catch_warnings():
        warnings.simplefilter("error", TruncationWarning)
        measure_interaction_energy(_low_photon_state(6, 10, 1, seed=9), fine)


def test_energy_report_is_consistent():
    cfg = _cfg(1.0, 6)
    reg = prepare_cc(cfg, 0.8)
    rep = measure_energy(reg, cfg, check=False)
    assert rep.total == pytest.approx(rep.kinetic + rep.interaction - 2 * P2.g_sq)
    assert np.mean(rep.per_direction) == pytest.approx(rep.total)
    assert rep.spread == pytest.approx(max(rep.per_direction) - min(rep.per_direction))
    assert 0 < rep.postselection_probability <= 1


def test_measurement_validation():
    cfg = _cfg(1.0, 4)
    reg = prepare_omega(cfg)
    with pytest.raises(ValueError):
        kinetic_terms(reg, cfg, "bogus")
    with pytest.raises(ValueError):
        interaction_terms(reg, cfg, "bogus")
    with pytest.raises(ZeroDivisionError):
        interaction_terms(reg, cfg, capital_gamma=0.0)


# ---------------------------------------------------------------------------
# time evolution

def _restricted_expm(h_big, big, n):
    u = expm(-1j * h_big)
    return u.reshape(big, big, big, big)[:n, :n, :n, :n].reshape(n * n, n * n)


def test_layers_match_direct_exponentials():
    n, big, dt = 6, 30, 0.3
    cfg = _cfg(1.0, n)
    q, p = cv.quadratures(big)
    eye = np.eye(big)
    d = np.kron(q, eye) - np.kron(eye, q)
    lz = np.kron(q, p) - np.kron(p, q)
    u_int = _restricted_expm(dt * d @ d / 2, big, n)
    u_kin = _restricted_expm(dt * lz @ lz / (2 * P2.g_sq), big, n)

    reg = _low_photon_state(6, n, 1, seed=7)
    a = interaction_layer(reg.copy(), cfg, dt)
    b = reg.copy()
    for x, y in P2.links():
        for c in range(3):
            cv.apply_matrix(b, u_int, (mode(x, c), mode(y, c)))
    assert np.linalg.norm(a.amplitudes - b.amplitudes) < 0.05

    a = kinetic_layer(reg.copy(), cfg, dt)
    b = reg.copy()
    # the three pair exponentials do not commute; the layer applies them in a fixed order
    for x in range(2):
        for i, j in ((0, 1), (1, 2), (2, 0)):
            cv.apply_matrix(b, u_kin, (mode(x, i), mode(x, j)))
    np.testing.assert_allclose(a.amplitudes, b.amplitudes, atol=1e-10)


def test_zero_time_step_is_identity():
    cfg = _cfg(1.0, 6)
    reg = _low_photon_state(6, 6, 3, seed=2)
    out = kinetic_layer(interaction_layer(reg.copy(), cfg, 0.0), cfg, 0.0)
    np.testing.assert_allclose(out.amplitudes, reg.amplitudes, atol=1e-13)


def test_return_probability_at_zero_is_vacuum_weight():
    cfg = _cfg(1.0, 6)
    site, _ = prepare_omega_site(cfg)
    p0 = abs(site.amplitudes[0, 0, 0]) ** 2
    assert return_probability(cfg, 0.0).probability == pytest.approx(p0**2, rel=1e-12)


def test_trotter_self_convergence():
    cfg = _cfg(1.0, 6)
    probs = [return_probability(replace(cfg, trotter_steps=k), 1.0).probability for k in (1, 2, 4, 8)]
    diffs = np.abs(np.diff(probs))
    assert diffs[2] < diffs[1] < diffs[0]


def test_config_validation():
    spec = SphereBasisSpec.for_model(P2, 1.0)
    with pytest.raises(ValueError):
        ProtocolConfig(ModelParams(3, 1.0), spec)
    with pytest.raises(ValueError):
        ProtocolConfig(ModelParams(2, 2.0), spec)
    with pytest.raises(ValueError):
        ProtocolConfig(P2, spec, prep_method="magic")
    with pytest.raises(ValueError):
        ProtocolConfig(P2, spec, trotter_steps=0)
    with pytest.raises(ValueError):
        return_probability(ProtocolConfig(P2, spec, n_max=4), -1.0)
