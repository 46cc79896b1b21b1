"""Coupled-cluster variational energies for the rotor chain and its finite-cutoff field version.

Ground Ansatz: exp(a sum_x n(x).n(x+1)) on the l = 0 product state, with
a = alpha g^2 / L.  In the field version the exponent is
-(alpha / 2L) sum_x (phi(x) - phi(x+1))^2 on top of the radial profile of
each site.  The excited Ansatz multiplies by sum_x n_3(x) (or phi_3(x)).

Kinetic energies use <L^2> = sum_i ||L_i psi||^2 with L = -i phi x grad
applied analytically to the Ansatz, so no numerical derivatives appear.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import roots_legendre
from scipy.stats import qmc

from .rotor_ed import ModelParams
from . import sphere_field

SAMPLERS = ("quasi_mc", "gaussian_radial", "exact_radial_alpha0")
GAUSSIAN_SWITCH = 3.0
SERIES_CUTOFF = 2e-2


class BoundaryMinimumWarning(UserWarning):
    """The minimiser landed on the edge of the search bracket."""


class NonFiniteSampleError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_samples: int
    deterministic: bool = False

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be non-negative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CCConfig:
    alpha: float = 0.0
    n_samples: int = 500_000
    sampler: str = "exact_radial_alpha0"
    seed: int = 12345
    lambda_cutoff: float | None = None
    n_blocks: int = 100
    alpha_max: float | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.lambda_cutoff is not None and not self.lambda_cutoff > 0:
            raise ValueError("lambda_cutoff must be positive")
        if self.n_blocks < 2:
            raise ValueError("need at least two jackknife blocks")

    def bracket(self, g_sq: float) -> tuple[float, float]:
        hi = self.alpha_max if self.alpha_max is not None else 4.0 * g_sq
        return 0.0, hi

    def with_alpha(self, alpha: float) -> "CCConfig":
        d = asdict(self)
        d["alpha"] = float(alpha)
        return CCConfig(**d)


# ---------------------------------------------------------------------------
# closed forms at L = 2 (rotor limit)

_E0_SERIES = (
    lambda G: 0.0,
    lambda G: -2 * G**2 / 3,
    lambda G: G / 3,
    lambda G: 8 * G**4 / 45,
    lambda G: -4 * G**3 / 45,
    lambda G: -64 * G**6 / 945,
)
_E1_SERIES = (
    lambda G: -(2 * G**2 - 3) / (6 * G),
    lambda G: -4 * G**2 / 9,
    lambda G: G * (16 * G**2 + 45) / 135,
    lambda G: 4 * G**2 * (2 * G - 3) * (2 * G + 3) / 405,
    lambda G: -4 * G**3 * (80 * G**2 + 63) / 8505,
    lambda G: 16 * G**4 * (8 * G**2 + 225) / 127575,
)


def _series(coeffs, g_sq, alpha):
    return sum(c(g_sq) * alpha**k for k, c in enumerate(coeffs))


def _coth(x: float) -> float:
    if x > 20:
        return 1.0 + 2.0 * math.exp(-2 * x)
    return 1.0 / math.tanh(x)


def cc_energy_L2_closed_form(g_sq: float, alpha: float) -> float:
    """Ground CC energy per site on two sites."""
    if g_sq <= 0 or alpha < 0:
        raise ValueError("need g_sq > 0 and alpha >= 0")
    if 4 * g_sq * alpha < SERIES_CUTOFF:
        return _series(_E0_SERIES, g_sq, alpha)
    return -1 / (4 * g_sq) + 1 / (2 * alpha) + 0.5 * (alpha - 2 * g_sq) * _coth(2 * g_sq * alpha)


def cc_excited_L2_closed_form(g_sq: float, alpha: float) -> float:
    """First-excited CC energy per site on two sites."""
    if g_sq <= 0 or alpha < 0:
        raise ValueError("need g_sq > 0 and alpha >= 0")
    y = 4 * g_sq * alpha
    if y < SERIES_CUTOFF:
        return _series(_E1_SERIES, g_sq, alpha)
    # numerator and denominator divided by exp(y)
    u = math.exp(-y)
    a, G = alpha, g_sq
    num = u * (-a + 4 * G * (1 + 2 * G * a - a * a)) + (-4 * G + a + 8 * G**2 * (a + a**3))
    den = 4 * G * a * (u + (-1 + y))
    return -G + num / den


# ---------------------------------------------------------------------------
# sampling helpers

def quasi_mc_points(dim: int, n: int, scramble_seed: int | None = None) -> np.ndarray:
    """First n points of the Halton sequence in [0,1)^dim, skipping the origin."""
    if not 1 <= dim <= 64:
        raise ValueError("dim must be in [1, 64]")
    if n < 1:
        raise ValueError("n must be positive")
    if scramble_seed is None:
        eng = qmc.Halton(d=dim, scramble=False)
        eng.fast_forward(1)
    else:
        eng = qmc.Halton(d=dim, scramble=True, seed=scramble_seed)
    return eng.random(n)


def _unit_vectors(u_cos: np.ndarray, u_phi: np.ndarray) -> np.ndarray:
    c = 2.0 * u_cos - 1.0
    s = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    ph = 2.0 * np.pi * u_phi
    return np.stack([s * np.cos(ph), s * np.sin(ph), c], axis=-1)


@dataclass
class _Sample:
    """Configurations phi[n, L, 3] and log importance weights relative to |Omega|^2."""
    phi: np.ndarray
    log_w: np.ndarray


def _radial_gaussian_logq(r, g, lam):
    sig = 1.0 / lam
    return -0.5 * ((r - g) / sig) ** 2


def _draw(params: ModelParams, cfg: CCConfig, u: np.ndarray) -> _Sample:
    """Map uniforms u[n, 2L] (rotor) or u[n, 3L] (field) to configurations."""
    L = params.n_sites
    n = u.shape[0]
    nvec = _unit_vectors(u[:, 0:2 * L:2], u[:, 1:2 * L:2])
    if cfg.lambda_cutoff is None:
        return _Sample(nvec, np.zeros(n))
    g = math.sqrt(params.g_sq)
    lam = cfg.lambda_cutoff
    ur = u[:, 2 * L:3 * L]
    use_gauss = cfg.sampler == "gaussian_radial" or (cfg.sampler == "quasi_mc" and lam >= GAUSSIAN_SWITCH)
    if use_gauss:
        from scipy.stats import norm
        sig = 1.0 / lam
        lo = norm.cdf(-g / sig)
        r = g + sig * norm.ppf(lo + (1 - lo) * ur)
        r = np.maximum(r, 1e-300)
        log_target = 2 * np.log(r) + sphere_field.log_radial_density(r, g, lam)
        log_w = np.sum(log_target - _radial_gaussian_logq(r, g, lam), axis=1)
    else:
        sampler = sphere_field.RadialSampler.build(g, lam)
        r = sampler.ppf(ur)
        log_w = np.zeros(n)
    return _Sample(nvec * r[..., None], log_w)


def _neighbour_sum(phi: np.ndarray, params: ModelParams) -> np.ndarray:
    """For each site, sum of the field over its link partners (with multiplicity)."""
    out = np.zeros_like(phi)
    for x, y in params.links():
        out[:, x] += phi[:, y]
        out[:, y] += phi[:, x]
    return out


def _link_terms(phi: np.ndarray, params: ModelParams) -> np.ndarray:
    """Sum over links of phi(x).phi(y), per sample."""
    tot = np.zeros(phi.shape[0])
    for x, y in params.links():
        tot += np.einsum("ij,ij->i", phi[:, x], phi[:, y])
    return tot


def _local_energies(phi: np.ndarray, params: ModelParams, alpha: float, lam: float | None,
                    excited: bool) -> tuple[np.ndarray, np.ndarray]:
    """Return (log |psi|^2 relative to reference, local energy) for every sample."""
    L = params.n_sites
    G = params.g_sq
    nb = _neighbour_sum(phi, params)
    if lam is None:
        a = alpha * G / L
        dot = _link_terms(phi, params)
        log_psi2 = 2 * a * dot
        grad = a * nb                                   # grad of S at each site (tangential part enters via cross)
        potential = -G * dot
    else:
        diff2 = np.zeros(phi.shape[0])
        for x, y in params.links():
            d = phi[:, x] - phi[:, y]
            diff2 += np.einsum("ij,ij->i", d, d)
        log_psi2 = -(alpha / L) * diff2
        grad = (alpha / L) * nb                         # phi x grad S = (alpha/L) phi x sum(neighbours)
        potential = 0.5 * diff2 - L * G
    cross = np.cross(phi, grad)                         # [n, L, 3]
    if not excited:
        kin = np.einsum("ijk,ijk->i", cross, cross)
        return log_psi2, kin / (2 * G) + potential
    F = phi[:, :, 2].sum(axis=1)
    zhat = np.array([0.0, 0.0, 1.0])
    vec = F[:, None, None] * cross + np.cross(phi, zhat)
    kin = np.einsum("ijk,ijk->i", vec, vec)
    # divide out F^2 so the weight carries it; guard F = 0 samples (zero weight)
    with np.errstate(divide="ignore", invalid="ignore"):
        loc = np.where(F != 0, kin / (2 * G) / (F * F) + potential, 0.0)
        log_f2 = np.where(F != 0, np.log(F * F), -np.inf)
    return log_psi2 + log_f2, loc


def _ratio_blocks(log_w: np.ndarray, f: np.ndarray, n_blocks: int):
    """Per-block (sum w, sum w f) with a common scale."""
    shift = np.max(log_w[np.isfinite(log_w)])
    w = np.exp(log_w - shift)
    blocks = np.array_split(np.arange(w.size), n_blocks)
    sw = np.array([w[b].sum() for b in blocks])
    swf = np.array([(w[b] * f[b]).sum() for b in blocks])
    return sw, swf


def jackknife_ratio(sw: np.ndarray, swf: np.ndarray) -> tuple[float, float]:
    """Leave-one-block-out jackknife for sum(swf) / sum(sw)."""
    B = sw.size
    tw, twf = sw.sum(), swf.sum()
    mean = twf / tw
    loo = (twf - swf) / (tw - sw)
    err = math.sqrt((B - 1) / B * np.sum((loo - loo.mean()) ** 2))
    return float(mean), float(err)


def _uniforms(params: ModelParams, cfg: CCConfig, block_seed: np.random.SeedSequence, n: int) -> np.ndarray:
    dim = 2 * params.n_sites + (params.n_sites if cfg.lambda_cutoff is not None else 0)
    return np.random.default_rng(block_seed).random((n, dim))


def _estimate(params: ModelParams, cfg: CCConfig, excited: bool, observable: str = "energy") -> MCEstimate:
    L = params.n_sites
    dim = 2 * L + (L if cfg.lambda_cutoff is not None else 0)
    if cfg.sampler == "quasi_mc":
        u = quasi_mc_points(dim, cfg.n_samples, scramble_seed=cfg.seed)
        chunks = [u]
    else:
        seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_blocks)
        sizes = [len(b) for b in np.array_split(np.arange(cfg.n_samples), cfg.n_blocks)]
        chunks = [_uniforms(params, cfg, s, k) for s, k in zip(seeds, sizes)]
    log_ws, fs = [], []
    for u in chunks:
        smp = _draw(params, cfg, u)
        log_psi2, loc = _local_energies(smp.phi, params, cfg.alpha, cfg.lambda_cutoff, excited)
        if observable == "overlap":
            # <CC|CC_1> / <CC|CC>: average of sum_x phi_3 under the ground weight
            loc = smp.phi[:, :, 2].sum(axis=1)
        log_w = log_psi2 + smp.log_w
        bad = ~np.isfinite(loc) | np.isnan(log_w)
        if np.any(bad & (log_w > -np.inf)):
            raise NonFiniteSampleError(f"{int(bad.sum())} non-finite integrand samples")
        log_ws.append(log_w)
        fs.append(loc)
    log_w = np.concatenate(log_ws)
    f = np.concatenate(fs)
    n_blocks = min(cfg.n_blocks, f.size)
    sw, swf = _ratio_blocks(log_w, f, n_blocks)
    mean, err = jackknife_ratio(sw, swf)
    scale = 1.0 if observable == "overlap" else 1.0 / L
    if cfg.sampler == "quasi_mc":
        return MCEstimate(mean * scale, 0.0, cfg.n_samples, deterministic=True)
    return MCEstimate(mean * scale, err * scale, cfg.n_samples)


def cc_energy_mc(params: ModelParams, cfg: CCConfig) -> MCEstimate:
    """Ground CC energy per site by (quasi-)Monte Carlo."""
    return _estimate(params, cfg, excited=False)


def cc_excited_mc(params: ModelParams, cfg: CCConfig) -> MCEstimate:
    """First-excited CC energy per site by (quasi-)Monte Carlo."""
    return _estimate(params, cfg, excited=True)


def cc_overlap_mc(params: ModelParams, cfg: CCConfig) -> MCEstimate:
    """<CC|CC_1>/<CC|CC>, which vanishes by symmetry."""
    return _estimate(params, cfg, excited=False, observable="overlap")


def minimize_alpha(objective: Callable[[float], float], bracket: tuple[float, float],
                   xtol: float = 1e-4) -> tuple[float, float]:
    """Derivative-free bounded minimisation; warns when the optimum sits on an edge."""
    lo, hi = bracket
    if not hi > lo:
        raise ValueError("bracket must satisfy lo < hi")
    res = minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": xtol})
    x = float(res.x)
    if x - lo < 5 * xtol or hi - x < 5 * xtol:
        warnings.warn(f"minimum at bracket edge: alpha = {x:.6g} in [{lo}, {hi}]", BoundaryMinimumWarning)
    return x, float(res.fun)


def optimize_cc(params: ModelParams, cfg: CCConfig, excited: bool = False,
                n_qmc: int = 1 << 15) -> tuple[float, MCEstimate]:
    """Two-stage procedure: quasi-MC minimisation over alpha, then a stochastic re-evaluation."""
    qcfg = CCConfig(alpha=0.0, n_samples=n_qmc, sampler="quasi_mc", seed=cfg.seed,
                    lambda_cutoff=cfg.lambda_cutoff, n_blocks=cfg.n_blocks, alpha_max=cfg.alpha_max)
    fn = cc_excited_mc if excited else cc_energy_mc
    lo, hi = cfg.bracket(params.g_sq)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryMinimumWarning)
        alpha, _ = minimize_alpha(lambda a: fn(params, qcfg.with_alpha(a)).mean, (max(lo, 1e-6), hi))
    final = cfg.with_alpha(alpha)
    if final.sampler == "quasi_mc":
        final = CCConfig(alpha=alpha, n_samples=cfg.n_samples, sampler="exact_radial_alpha0",
                         seed=cfg.seed, lambda_cutoff=cfg.lambda_cutoff, n_blocks=cfg.n_blocks,
                         alpha_max=cfg.alpha_max)
    return alpha, fn(params, final)


# ---------------------------------------------------------------------------
# two-site energies by deterministic quadrature

def _log_sinhc(b: np.ndarray) -> np.ndarray:
    """log(sinh(b)/b), stable for all b >= 0."""
    b = np.asarray(b, dtype=float)
    small = b < 1e-4
    bs = np.where(small, 1.0, b)
    big = b + np.log1p(-np.exp(-2 * bs)) - np.log(2 * bs)
    return np.where(small, b * b / 6, big)


def _langevin(b: np.ndarray) -> np.ndarray:
    """coth(b) - 1/b."""
    b = np.asarray(b, dtype=float)
    small = b < 1e-3
    bs = np.where(small, 1.0, b)
    big = 1.0 / np.tanh(bs) - 1.0 / bs
    return np.where(small, b / 3 - b**3 / 45, big)


def cc_energy_L2_quadrature(g_sq: float, alpha: float, lambda_cutoff: float | None = None,
                            excited: bool = False, n_nodes: int = 160) -> float:
    """Two-site CC energy per site with angular integrals done analytically (ground)
    or by Gauss-Legendre in the relative angle (excited), and radii by Gauss-Legendre."""
    G = g_sq
    g = math.sqrt(G)
    if lambda_cutoff is None:
        r_nodes = np.array([g])
        r_w = np.array([1.0])
    else:
        lo, hi = sphere_field.radial_support(g, lambda_cutoff)
        x, w = roots_legendre(n_nodes)
        r_nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        r_w = 0.5 * (hi - lo) * w * r_nodes**2 * np.exp(sphere_field.log_radial_density(r_nodes, g, lambda_cutoff))
    r0, r1 = np.meshgrid(r_nodes, r_nodes, indexing="ij")
    W = np.outer(r_w, r_w)
    if lambda_cutoff is None:
        b = 2 * alpha * G * np.ones_like(r0)     # exponent of |psi|^2 is 2 a n0.n1 with a = alpha g^2 / 2, two links
        base = np.zeros_like(r0)
    else:
        b = 2 * alpha * r0 * r1
        base = -alpha * (r0**2 + r1**2)
    if not excited:
        logZ = base + _log_sinhc(b)
        mc = _langevin(b)                         # <cos>
        one_m_c2 = np.where(b > 0, 2 * mc / np.where(b > 0, b, 1.0), 2.0 / 3.0)
        if lambda_cutoff is None:
            kin = 2 * (alpha * G) ** 2 * one_m_c2 / (2 * G)
            pot = -2 * G * mc
        else:
            kin = 2 * alpha**2 * (r0 * r1) ** 2 * one_m_c2 / (2 * G)
            pot = r0**2 + r1**2 - 2 * r0 * r1 * mc - 2 * G
        with np.errstate(divide="ignore"):
            lw = logZ + np.log(W)
        m = lw.max()
        wts = np.exp(lw - m)
        return float(np.sum(wts * (kin + pot)) / np.sum(wts) / 2)
    # excited: integrate over c = n0.n1 explicitly after averaging the Ansatz over global rotations
    cx, cw = roots_legendre(n_nodes)
    c = cx[None, None, :]
    R0, R1 = r0[..., None], r1[..., None]
    if lambda_cutoff is None:
        R0 = R1 = np.full_like(R0, 1.0)
        coef = alpha * G
        log_e = 2 * coef * c
        pot = -2 * G * c
    else:
        coef = alpha
        log_e = base[..., None] + 2 * alpha * R0 * R1 * c
        pot = R0**2 + R1**2 - 2 * R0 * R1 * c - 2 * G
    # field vectors: phi0 = R0 e_z', phi1 = R1 (sqrt(1-c^2), 0, c); sigma = phi0 + phi1
    s_perp = np.sqrt(np.clip(1 - c * c, 0, None))
    sig2 = R0**2 + R1**2 + 2 * R0 * R1 * c
    # |phi_x x w_x|^2 with w_x = coef * phi_other
    A2 = (coef * R0 * R1 * s_perp) ** 2
    # sum over both sites of |F A + phi_x x z|^2 averaged over directions of z:
    #   |sigma|^2 |A|^2 / 3 + 2 sigma.(A x phi_x) / 3 + 2 |phi_x|^2 / 3
    # with sigma.(A x phi_x) = coef |phi_x x phi_o|^2 on either site
    cross2 = (R0 * R1 * s_perp) ** 2
    kin_num = 2 * sig2 * A2 / 3 + 4 * coef * cross2 / 3 + 2 * (R0**2 + R1**2) / 3
    F2 = sig2 / 3
    with np.errstate(divide="ignore"):
        lw = log_e + np.log(W)[..., None] + np.log(cw)[None, None, :]
    m = lw.max()
    wts = np.exp(lw - m)
    num = np.sum(wts * (kin_num / (2 * G) + F2 * pot))
    den = np.sum(wts * F2)
    return float(num / den / 2)


@dataclass(frozen=True)
class TwoSiteResult:
    alpha0: float
    e0: float
    alpha1: float
    e1: float

    @property
    def gap(self) -> float:
        return 2 * (self.e1 - self.e0)


def minimize_L2(g_sq: float, lambda_cutoff: float | None = None, alpha_max: float | None = None) -> TwoSiteResult:
    """Minimised two-site ground and excited energies per site: closed forms in the rotor limit,
    radial quadrature otherwise."""
    hi = CCConfig(alpha_max=alpha_max).bracket(g_sq)[1]
    if lambda_cutoff is None:
        f0 = lambda a: cc_energy_L2_closed_form(g_sq, a)
        f1 = lambda a: cc_excited_L2_closed_form(g_sq, a)
    else:
        f0 = lambda a: cc_energy_L2_quadrature(g_sq, a, lambda_cutoff)
        f1 = lambda a: cc_energy_L2_quadrature(g_sq, a, lambda_cutoff, excited=True)
    a0, e0 = minimize_alpha(f0, (0.0, hi), xtol=1e-7)
    a1, e1 = minimize_alpha(f1, (0.0, hi), xtol=1e-7)
    return TwoSiteResult(a0, e0, a1, e1)
