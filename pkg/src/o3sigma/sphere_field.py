"""Finite-cutoff field formulation: a three-component field per site whose
radial wave function psi(r) ~ exp(-Lambda^2 (r^2 - g^2)^2 / (8 g^2)) is
peaked on the sphere |phi| = g.  Basis states are psi(r) Y_lm(n).
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad

from .rotor_ed import (DEFAULT_MAX_DIM, DimensionError, ModelParams, SparseHermitian,
                       interaction_operator, kinetic_diagonal, sector_indices)

CACHE_ENV = "O3SIGMA_CACHE_DIR"
SUPPORT_WIDTHS = 12.0


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class SphereBasisSpec:
    lambda_cutoff: float
    g: float
    l_max: int = 3
    n_sites: int = 2

    def __post_init__(self):
        if not self.lambda_cutoff > 0:
            raise ValueError("lambda_cutoff must be positive")
        if not self.g > 0:
            raise ValueError("g must be positive")

    @classmethod
    def for_model(cls, params: ModelParams, lambda_cutoff: float) -> "SphereBasisSpec":
        return cls(lambda_cutoff, math.sqrt(params.g_sq), params.l_max, params.n_sites)


@dataclass(frozen=True)
class RadialMoments:
    m0: float
    m1: float
    m2: float
    m4: float

    @property
    def phi_sq(self) -> float:
        """<phi^2> in any basis state."""
        return self.m2 / self.m0

    @property
    def link_factor(self) -> float:
        """(<r>)^2, the radial factor multiplying n.n between neighbours."""
        return (self.m1 / self.m0) ** 2


def log_radial_density(r, g: float, lam: float):
    """log |psi(r)|^2 without normalisation (no r^2 measure)."""
    r = np.asarray(r, dtype=float)
    return -(lam**2) * (r * r - g * g) ** 2 / (4 * g * g)


def radial_support(g: float, lam: float) -> tuple[float, float]:
    """Interval holding the radial mass: the peak width is about 1/lam, bounded by g + 12 g / lam."""
    width = SUPPORT_WIDTHS * max(g, 1.0) / lam
    return max(0.0, g - width), g + width


def radial_moments(spec: SphereBasisSpec, rtol: float = 1e-10) -> RadialMoments:
    return _radial_moments(float(spec.g), float(spec.lambda_cutoff), rtol)


@lru_cache(maxsize=256)
def _radial_moments(g: float, lam: float, rtol: float) -> RadialMoments:
    lo, hi = radial_support(g, lam)
    out = []
    for k in (0, 1, 2, 4):
        # integrate in units of the peak width to keep quad well-scaled at huge lam
        def f(r, k=k):
            return r ** (2 + k) * math.exp(-(lam**2) * (r * r - g * g) ** 2 / (4 * g * g))
        pts = [g] if lo < g < hi else None
        val, err = quad(f, lo, hi, epsabs=0.0, epsrel=rtol, limit=400, points=pts)
        if not np.isfinite(val) or val <= 0 or err > 10 * rtol * abs(val):
            raise QuadratureError(f"radial moment k={k} failed to converge (value {val}, error {err})")
        out.append(val)
    return RadialMoments(*out)


class RadialSampler:
    """Inverse-CDF table for the density r^2 |psi(r)|^2."""

    def __init__(self, grid: np.ndarray, cdf: np.ndarray):
        self.grid = grid
        self.cdf = cdf

    @classmethod
    def build(cls, g: float, lam: float, n_grid: int = 8193, cache_dir: str | os.PathLike | None = None) -> "RadialSampler":
        return _cached_sampler(float(g), float(lam), int(n_grid),
                               str(cache_dir) if cache_dir else os.environ.get(CACHE_ENV))

    def ppf(self, u) -> np.ndarray:
        return np.interp(u, self.cdf, self.grid)

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return self.ppf(rng.random(shape))


@lru_cache(maxsize=64)
def _cached_sampler(g: float, lam: float, n_grid: int, cache_dir: str | None) -> RadialSampler:
    path = None
    if cache_dir:
        key = hashlib.sha1(f"{g!r}:{lam!r}:{n_grid}".encode()).hexdigest()[:16]
        path = Path(cache_dir) / f"radial_cdf_{key}.npz"
        if path.exists():
            data = np.load(path)
            return RadialSampler(data["grid"], data["cdf"])
    lo, hi = radial_support(g, lam)
    grid = np.linspace(lo, hi, n_grid)
    dens = grid**2 * np.exp(log_radial_density(grid, g, lam))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    # drop flat stretches so interpolation stays single-valued
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    sampler = RadialSampler(grid[keep], cdf[keep])
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, grid=sampler.grid, cdf=sampler.cdf)
    return sampler


def build_sphere_hamiltonian(params: ModelParams, spec: SphereBasisSpec,
                             max_dim: int = DEFAULT_MAX_DIM) -> SparseHermitian:
    """H = (1/2g^2) sum L^2 + sum_x [ (phi(x) - phi(x+1))^2 / 2 - g^2 ] in the |l m; Lambda> basis.

    Per site: phi^2 -> m2/m0 (identity in l, m); per link: phi.phi' -> (m1/m0)^2 n.n'.
    """
    if spec.n_sites != params.n_sites or spec.l_max != params.l_max:
        raise ValueError("sphere spec and model params disagree on n_sites or l_max")
    if not math.isclose(spec.g**2, params.g_sq, rel_tol=1e-12):
        raise ValueError("sphere spec and model params disagree on g")
    if params.dim > max_dim:
        raise DimensionError(f"dimension {params.dim} exceeds cap {max_dim}")
    mom = radial_moments(spec)
    n_links = len(params.links())
    shift = params.n_sites * mom.phi_sq - n_links * params.g_sq
    h = sp.diags(kinetic_diagonal(params) + shift) - mom.link_factor * interaction_operator(params)
    return SparseHermitian.from_matrix(h)


# ---------------------------------------------------------------------------
# return probabilities

def fock_vacuum_radial(r) -> np.ndarray:
    """Radial part of the three-mode oscillator ground state, normalised with r^2 dr and Y_00."""
    r = np.asarray(r, dtype=float)
    return math.sqrt(4 * math.pi) * math.pi ** (-0.75) * np.exp(-0.5 * r * r)


def radial_norm(g: float, lam: float) -> float:
    """Normalisation integral of r^2 |psi(r)|^2."""
    return _radial_moments(float(g), float(lam), 1e-10).m0


def fock_vacuum_overlap(g: float, lam: float) -> float:
    """<0_Fock | l=0, m=0; Lambda> for one site."""
    lo, hi = radial_support(g, lam)
    norm = math.sqrt(radial_norm(g, lam))

    def f(r):
        return r * r * float(fock_vacuum_radial(r)) * math.exp(-(lam**2) * (r * r - g * g) ** 2 / (8 * g * g))
    val, _ = quad(f, lo, hi, epsabs=0.0, epsrel=1e-11, limit=400, points=[g] if lo < g else None)
    return val / norm


class _SectorEvolver:
    """Kinetic and link operators restricted to the total-m = 0 sector."""

    def __init__(self, params: ModelParams):
        self.params = params
        idx = sector_indices(params, 0)
        self.idx = idx
        self.kin = kinetic_diagonal(params)[idx]
        links = []
        from .rotor_ed import _embed_pair, link_operator
        op2 = link_operator(params.l_max)
        for x, y in params.links():
            full = _embed_pair(op2, x, y, params.n_sites, params.local_dim)
            links.append(full[idx][:, idx].toarray())
        self.links = np.array(links)
        self.omega = int(np.flatnonzero(idx == 0)[0])

    def amplitudes(self, couplings: np.ndarray, times: np.ndarray) -> np.ndarray:
        """<Omega_0| exp(-i t H) |Omega_0> for H = K - sum_l c_l N_l, batched over couplings[b, n_links]."""
        H = np.einsum("bl,lij->bij", -couplings, self.links)
        H[:, np.arange(self.kin.size), np.arange(self.kin.size)] += self.kin
        w, v = np.linalg.eigh(H)
        weights = np.abs(v[:, self.omega, :]) ** 2                # [b, k]
        phases = np.exp(-1j * np.multiply.outer(w, times))        # [b, k, t]
        return np.einsum("bk,bkt->bt", weights, phases)


@lru_cache(maxsize=16)
def _evolver(n_sites: int, l_max: int) -> _SectorEvolver:
    return _SectorEvolver(ModelParams(n_sites, 1.0, l_max))


def o3_return_probability(params: ModelParams, times) -> np.ndarray:
    """|<Omega_0| exp(-i t H_rotor) |Omega_0>|^2 at fixed radius g."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    ev = _evolver(params.n_sites, params.l_max)
    kin = kinetic_diagonal(params)[ev.idx]
    H = np.diag(kin) - params.g_sq * ev.links.sum(axis=0)
    w, v = np.linalg.eigh(H)
    amp = (np.abs(v[ev.omega]) ** 2) @ np.exp(-1j * np.multiply.outer(w, times))
    return np.abs(amp) ** 2


def return_probability_curve(params: ModelParams, spec: SphereBasisSpec, times, n_samples: int = 20_000,
                             seed: int = 12345, reference: str = "omega", n_blocks: int = 100,
                             batch: int = 4096) -> list:
    """Monte-Carlo estimates of the return probability at each time.

    reference="omega": overlap with the initial |Omega(Lambda)>.
    reference="fock_vacuum": overlap with the photon-number vacuum of every mode.
    Radii are drawn from r^2 |psi|^2; the amplitude is averaged before squaring.
    """
    from .coupled_cluster import MCEstimate, jackknife_ratio

    if reference not in ("omega", "fock_vacuum"):
        raise ValueError("reference must be 'omega' or 'fock_vacuum'")
    if params.dim > DEFAULT_MAX_DIM:
        raise DimensionError(f"dimension {params.dim} exceeds cap {DEFAULT_MAX_DIM}")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0):
        raise ValueError("times must be non-negative")
    g, lam, L = spec.g, spec.lambda_cutoff, params.n_sites
    ev = _evolver(L, params.l_max)
    kin_scale = 1.0 / params.g_sq
    sampler = RadialSampler.build(g, lam)
    rng = np.random.default_rng(seed)
    n_blocks = max(2, min(n_blocks, n_samples))
    block_sizes = [len(b) for b in np.array_split(np.arange(n_samples), n_blocks)]
    norm = math.sqrt(radial_norm(g, lam))
    block_sums = np.zeros((n_blocks, times.size), dtype=complex)
    links = params.links()
    for bi, bsz in enumerate(block_sizes):
        done = 0
        while done < bsz:
            m = min(batch, bsz - done)
            r = sampler.sample(rng, (m, L))
            coup = np.stack([r[:, x] * r[:, y] for x, y in links], axis=1)
            # kinetic diagonal scales with 1/g^2; the evolver holds it for g^2 = 1
            amp = ev.amplitudes(coup / kin_scale, times * kin_scale)
            shift = np.sum(r * r, axis=1) - len(links) * params.g_sq
            amp = amp * np.exp(-1j * np.multiply.outer(shift, times))
            if reference == "fock_vacuum":
                # weight chi(r) / psi(r) turns the |psi|^2 sample into the psi * chi overlap
                log_psi = 0.5 * log_radial_density(r, g, lam) - math.log(norm)
                ratio = np.exp(np.log(fock_vacuum_radial(r)) - log_psi).prod(axis=1)
                amp = amp * ratio[:, None]
            block_sums[bi] += amp.sum(axis=0)
            done += m
    counts = np.array(block_sizes, dtype=float)
    out = []
    for k in range(times.size):
        s = block_sums[:, k]
        tot = s.sum()
        mean = abs(tot / n_samples) ** 2
        loo = np.abs((tot - s) / (n_samples - counts)) ** 2
        err = math.sqrt((n_blocks - 1) / n_blocks * np.sum((loo - loo.mean()) ** 2))
        out.append(MCEstimate(float(mean), float(err), n_samples))
    return out


def evolve_return_probability_mc(params: ModelParams, spec: SphereBasisSpec, t: float, cfg,
                                 reference: str = "omega"):
    """Return probability at one time, with sample count and seed taken from a CCConfig."""
    if t == 0 and reference == "omega":
        from .coupled_cluster import MCEstimate
        return MCEstimate(1.0, 0.0, cfg.n_samples)
    return return_probability_curve(params, spec, [t], n_samples=cfg.n_samples, seed=cfg.seed,
                                    reference=reference, n_blocks=cfg.n_blocks)[0]
