"""Entropy and MSE lower bounds for gradient-based reconstruction.

The gradient is modelled as a diagonal Gaussian mixture observed through
additive Gaussian noise, with per-coordinate signal-to-noise ratios
``alpha[i, j] = sigma2[i, j] / gamma2[j]``.  A change of basis multiplies
coordinate ``j`` by a random log-normal factor ``exp(Y_j / 2)`` with
``Y_j ~ N(-s2_j / 2, s2_j)`` (so ``E[exp(Y_j)] = 1``), which replaces each
``log(1 + alpha)`` term by ``psi = E[log(1 + alpha * exp(Y))]``.

All entropies are in nats.  ``psi`` has no closed form and is estimated by
seeded Monte Carlo; every estimate carries its standard error.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

LOG_2PI_E = math.log(2 * math.pi * math.e)


@dataclass(frozen=True)
class GMMSpec:
    weights: np.ndarray     # (K,)
    means: np.ndarray       # (K, m)
    variances: np.ndarray   # (K, m)
    noise: np.ndarray       # (m,) observation noise gamma^2
    d: int                  # input dimension
    H_x: float | None = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64).reshape(var.shape) \
            if np.size(self.means) == var.size else np.zeros_like(var)
        noise = np.atleast_1d(np.asarray(self.noise, dtype=np.float64))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "noise", noise)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if var.shape[0] != w.size or noise.size != var.shape[1]:
            raise ValueError("weights, variances and noise dimensions disagree")
        if np.any(var <= 0) or np.any(noise <= 0):
            raise ValueError("variances and noise must be positive")
        if self.d < 1:
            raise ValueError("d must be >= 1")

    @property
    def alpha(self) -> np.ndarray:
        return self.variances / self.noise[None, :]

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def m(self) -> int:
        return self.noise.size

    @classmethod
    def from_alpha(cls, weights, alpha, d, H_x=None) -> "GMMSpec":
        alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
        if np.any(alpha < 0):
            raise ValueError("alpha must be >= 0")
        # alpha = 0 means no signal; keep variances positive with a tiny floor
        var = np.maximum(alpha, 1e-300)
        return cls(weights, np.zeros_like(var), var, np.ones(alpha.shape[1]), d, H_x)


@dataclass(frozen=True)
class LogNormalCOB:
    s2: np.ndarray

    def __post_init__(self):
        s2 = np.atleast_1d(np.asarray(self.s2, dtype=np.float64))
        if np.any(s2 < 0):
            raise ValueError("log-variances must be >= 0")
        object.__setattr__(self, "s2", s2)

    def scaled(self, c: float) -> "LogNormalCOB":
        return LogNormalCOB(self.s2 * c)


def mse_lb_from_entropy(H_cond: float, d: int) -> float:
    """``exp(2 H / d) / (2 pi e)``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return math.exp(2.0 * H_cond / d - LOG_2PI_E)


def _weight_entropy(w):
    return float(-np.sum(w * np.log(w)))


def _alpha_of(gmm: GMMSpec) -> np.ndarray:
    a = gmm.alpha
    return np.where(gmm.variances <= 1e-300, 0.0, a)


def info_term_baseline(gmm: GMMSpec) -> float:
    """``sum_i pi_i (-log pi_i + 1/2 sum_j log(1 + alpha_ij))``."""
    a = _alpha_of(gmm)
    return _weight_entropy(gmm.weights) + 0.5 * float(gmm.weights @ np.log1p(a).sum(axis=1))


def baseline_entropy_lb(gmm: GMMSpec, relative: bool = False) -> float:
    """``H(x) - info_term``; with ``relative`` only the information term is returned."""
    term = info_term_baseline(gmm)
    if relative:
        return term
    if gmm.H_x is None:
        raise ValueError("H_x is required (or use relative=True)")
    return gmm.H_x - term


# ---------------------------------------------------------------------------
# psi and friends


def _normal_draws(n_mc: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(int(n_mc))


def _log1p_alpha_exp(alpha: float, Y: np.ndarray) -> np.ndarray:
    # log(1 + alpha * e^Y) without overflow
    return np.logaddexp(0.0, math.log(alpha) + Y)


def psi_samples(alpha: float, s2: float, Z: np.ndarray) -> np.ndarray:
    s = math.sqrt(s2)
    return _log1p_alpha_exp(alpha, -0.5 * s2 + s * Z)


def psi(alpha: float, s2: float, n_mc: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo ``E[log(1 + alpha e^Y)]``, ``Y ~ N(-s2/2, s2)``; returns (value, stderr)."""
    if alpha < 0 or s2 < 0 or n_mc < 1:
        raise ValueError("need alpha >= 0, s2 >= 0, n_mc >= 1")
    if alpha == 0:
        return 0.0, 0.0
    if s2 == 0:
        return math.log1p(alpha), 0.0
    v = psi_samples(alpha, s2, _normal_draws(n_mc, seed))
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.inf
    return float(v.mean()), se


def delta_psi(alpha: float, s2: float, n_mc: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """``log(1 + alpha) - psi``; returns (value, stderr)."""
    if alpha == 0 or s2 == 0:
        psi(alpha, s2, n_mc, seed)  # argument validation
        return 0.0, 0.0
    p, se = psi(alpha, s2, n_mc, seed)
    return math.log1p(alpha) - p, se


def small_var_approx(alpha: float, s2: float) -> float:
    """Second-order expansion ``alpha^2 / (2 (1 + alpha)^2) * (e^{s2} - 1)`` (heuristic)."""
    if s2 < 0:
        raise ValueError("s2 must be >= 0")
    return alpha**2 / (2.0 * (1.0 + alpha) ** 2) * math.expm1(s2)


@dataclass
class TeleBound:
    info_tele: float       # sum_i pi_i (-log pi_i + 1/2 sum_j psi_ij)
    info_base: float
    stderr: float          # of info_tele (and of the improvement)
    psi: np.ndarray        # (K, m)
    psi_se: np.ndarray
    delta_psi: np.ndarray

    @property
    def improvement(self) -> float:
        """``H_lb_tele - H_lb0 = 1/2 sum_i pi_i sum_j delta_psi_ij``."""
        return self.info_base - self.info_tele


def teleported_terms(gmm: GMMSpec, cob: LogNormalCOB, n_mc: int = 100_000,
                     seed: int = 0) -> TeleBound:
    """Per-(i, j) ``psi`` with common random numbers and the combined information term."""
    if cob.s2.size != gmm.m:
        raise ValueError("cob.s2 must have one entry per gradient coordinate")
    a = _alpha_of(gmm)
    K, m = a.shape
    Z = _normal_draws(n_mc, seed)
    psi_v = np.log1p(a)
    psi_se = np.zeros_like(a)
    per_draw = np.zeros(Z.size)
    for j in range(m):
        s2 = float(cob.s2[j])
        for i in range(K):
            if a[i, j] == 0 or s2 == 0:
                continue
            v = psi_samples(float(a[i, j]), s2, Z)
            psi_v[i, j] = v.mean()
            psi_se[i, j] = v.std(ddof=1) / math.sqrt(Z.size) if Z.size > 1 else math.inf
            per_draw += 0.5 * gmm.weights[i] * (v - psi_v[i, j])
    info_tele = _weight_entropy(gmm.weights) + 0.5 * float(gmm.weights @ psi_v.sum(axis=1))
    se = float(per_draw.std(ddof=1) / math.sqrt(Z.size)) if Z.size > 1 else math.inf
    return TeleBound(info_tele, info_term_baseline(gmm), se, psi_v, psi_se, np.log1p(a) - psi_v)


def teleported_entropy_lb(gmm: GMMSpec, cob: LogNormalCOB, n_mc: int = 100_000, seed: int = 0,
                          relative: bool = False) -> float:
    t = teleported_terms(gmm, cob, n_mc, seed)
    if relative:
        return t.info_tele
    if gmm.H_x is None:
        raise ValueError("H_x is required (or use relative=True)")
    return gmm.H_x - t.info_tele


def bound_ratio(gmm: GMMSpec, cob: LogNormalCOB, n_mc: int = 100_000, seed: int = 0) -> float:
    """Teleported over baseline MSE lower bound, ``exp((1/d) sum_i pi_i sum_j delta_psi_ij)``."""
    if np.all(cob.s2 == 0):
        return 1.0
    t = teleported_terms(gmm, cob, n_mc, seed)
    return math.exp(2.0 * t.improvement / gmm.d)


def bound_ratio_with_se(gmm, cob, n_mc=100_000, seed=0) -> tuple[float, float]:
    t = teleported_terms(gmm, cob, n_mc, seed)
    r = math.exp(2.0 * t.improvement / gmm.d)
    return r, r * 2.0 * t.stderr / gmm.d


# ---------------------------------------------------------------------------
# 1-D oracle


@dataclass(frozen=True)
class ScalarMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        for name in ("weights", "means", "variances"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))

    def sample(self, rng, n):
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[comp] + np.sqrt(self.variances[comp]) * rng.standard_normal(n)

    def logpdf(self, x, extra_var: float = 0.0):
        v = self.variances + extra_var
        x = np.asarray(x, float)[:, None]
        comp = np.log(self.weights) - 0.5 * (np.log(2 * np.pi * v) + (x - self.means) ** 2 / v)
        return np.logaddexp.reduce(comp, axis=1)


def _posterior_moments(mix: ScalarMixture, g: np.ndarray, noise: float):
    v = mix.variances
    logw = np.log(mix.weights) - 0.5 * (np.log(v + noise) + (g[:, None] - mix.means) ** 2 / (v + noise))
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    m = mix.means + v / (v + noise) * (g[:, None] - mix.means)
    c = v * noise / (v + noise)
    mean = np.sum(w * m, axis=1)
    var = np.sum(w * (c + m**2), axis=1) - mean**2
    return np.maximum(var, 0.0)


def mmse_oracle(mix: ScalarMixture, noise: float, n_mc: int = 100_000,
                seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo ``E_g[Var(x | g)]`` for ``g = x + N(0, noise)``; returns (value, stderr)."""
    rng = np.random.default_rng(seed)
    x = mix.sample(rng, n_mc)
    g = x + math.sqrt(noise) * rng.standard_normal(n_mc)
    var = _posterior_moments(mix, g, noise)
    return float(var.mean()), float(var.std(ddof=1) / math.sqrt(n_mc))


def mixture_entropy(mix: ScalarMixture, n_mc: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo differential entropy of a scalar mixture."""
    rng = np.random.default_rng(seed)
    lp = mix.logpdf(mix.sample(rng, n_mc))
    return float(-lp.mean()), float(lp.std(ddof=1) / math.sqrt(n_mc))


def conditional_entropy(mix: ScalarMixture, noise: float, n_mc: int = 100_000,
                        seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo ``H(x | g) = -E[log p(x, g)] + E[log p(g)]``."""
    rng = np.random.default_rng(seed)
    x = mix.sample(rng, n_mc)
    g = x + math.sqrt(noise) * rng.standard_normal(n_mc)
    log_joint = mix.logpdf(x) - 0.5 * (math.log(2 * math.pi * noise) + (g - x) ** 2 / noise)
    v = mix.logpdf(g, noise) - log_joint
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_mc))


def scalar_gmm_spec(mix: ScalarMixture, noise: float, H_x: float | None = None) -> GMMSpec:
    return GMMSpec(mix.weights, mix.means[:, None], mix.variances[:, None], [noise], 1, H_x)


# ---------------------------------------------------------------------------
# crude empirical alpha (not part of the bound derivation)


def estimate_alpha(G: np.ndarray, noise_var: float) -> np.ndarray:
    """Per-coordinate gradient variance divided by an assumed noise variance.

    ``G`` holds one gradient per row.  A rough single-component surrogate
    for exploring the bounds on a trained model.
    """
    if noise_var <= 0:
        raise ValueError("noise_var must be > 0")
    return np.atleast_2d(np.var(np.asarray(G, float), axis=0, ddof=1) / noise_var)
