"""Reconstruction of forgotten inputs from parameter updates.

An unlearning step moves the parameters by ``delta = theta_u - theta_org``,
which mixes the (ascended) forget gradient with retain gradients.  The
attacker either inverts ``delta / eta`` directly, or first filters it with
probe-gradient subspaces (keep what the original model's gradients span,
drop what the unlearned model's gradients span) and inverts the result by
gradient matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .nn import NetworkSpec, ParamVector, LabeledSet, _check_inputs, per_sample_grads, rop
from .teleport import COBScales, _layer_scales, cob_apply, cob_sample

DISTANCES = ("l2", "neg_cosine", "layer_cosine")


# ---------------------------------------------------------------------------
# gradient subspaces


@dataclass
class GradSubspace:
    U: np.ndarray                 # P x k, orthonormal columns
    energy_frac: float
    source: str = "org"
    block: slice | None = None    # parameter slice this subspace lives on

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def project(self, v: np.ndarray) -> np.ndarray:
        return self.U @ (self.U.T @ v)

    def project_out(self, v: np.ndarray) -> np.ndarray:
        return v - self.project(v)


def probe_grads(spec: NetworkSpec, params: ParamVector, probe: LabeledSet) -> np.ndarray:
    """``P x m`` matrix whose column i is probe sample i's loss gradient."""
    return per_sample_grads(spec, params, probe.X, probe.y).T


def grad_subspace(G: np.ndarray, energy_frac: float = 0.9, source: str = "org",
                  block: slice | None = None) -> GradSubspace:
    """Leading left singular vectors of ``G`` holding ``energy_frac`` of its energy."""
    if not 0.0 < energy_frac <= 1.0:
        raise ValueError("energy_frac must lie in (0, 1]")
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    U, s, _ = np.linalg.svd(G, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("gradient matrix is zero")
    tol = s[0] * max(G.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    energy = s[:rank] ** 2
    frac = np.cumsum(energy) / energy.sum()
    k = min(rank, int(np.searchsorted(frac, energy_frac - 1e-12) + 1))
    return GradSubspace(U[:, :k].copy(), float(frac[k - 1]), source, block)


def layer_subspaces(G: np.ndarray, params: ParamVector, energy_frac: float = 0.9,
                    source: str = "org") -> list[GradSubspace]:
    """One subspace per layer block (weights and bias together)."""
    out = []
    for blk in params.layer_blocks():
        Gb = G[blk]
        if not np.any(Gb):
            out.append(GradSubspace(np.zeros((blk.stop - blk.start, 0)), 1.0, source, blk))
        else:
            out.append(grad_subspace(Gb, energy_frac, source, blk))
    return out


def _as_list(sub):
    return sub if isinstance(sub, (list, tuple)) else [sub]


def filter_target(delta_theta, sub_org, sub_u, eta_assumed: float):
    """``Pi_org (I - U_u U_u^T) (delta / eta)``.

    ``sub_org`` / ``sub_u`` are either single flat subspaces or matching
    per-layer lists.  With ``delta = eta * (alpha g_f - lambda g_r)`` and
    ``g_r`` inside ``span(U_u)`` the result is ``alpha`` times the part of
    ``g_f`` that the original model's probe gradients span.
    """
    if eta_assumed <= 0:
        raise ValueError("eta_assumed must be > 0")
    manifest = getattr(delta_theta, "manifest", None)
    v = np.asarray(getattr(delta_theta, "values", delta_theta), dtype=np.float64) / eta_assumed
    out = np.zeros_like(v)
    for so, su in zip(_as_list(sub_org), _as_list(sub_u)):
        blk = so.block if so.block is not None else slice(0, v.size)
        if (su.block or slice(0, v.size)) != blk:
            raise ValueError("subspace blocks do not line up")
        w = v[blk]
        if so.U.shape[0] != w.size or su.U.shape[0] != w.size:
            raise ValueError("subspace dimension does not match the parameter block")
        out[blk] = so.project(su.project_out(w))
    return ParamVector(out, manifest) if manifest is not None else out


# ---------------------------------------------------------------------------
# total variation


def tv_penalty(x: np.ndarray, d_shape=None) -> tuple[float, np.ndarray]:
    """Anisotropic total variation and its subgradient (0 at ties)."""
    x = np.asarray(x, dtype=np.float64)
    shape = tuple(d_shape) if d_shape is not None else (x.size,)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"d_shape {shape} does not hold {x.size} entries")
    img = x.reshape(shape)
    value = 0.0
    g = np.zeros_like(img)
    for ax in range(img.ndim):
        d = np.diff(img, axis=ax)
        value += float(np.abs(d).sum())
        s = np.sign(d)
        lo = [slice(None)] * img.ndim
        hi = [slice(None)] * img.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        g[tuple(lo)] -= s
        g[tuple(hi)] += s
    return value, g.reshape(x.shape)


# ---------------------------------------------------------------------------
# inversion


@dataclass(frozen=True)
class ReconConfig:
    iters: int = 300
    step: float = 0.1
    tv_lambda: float = 0.0
    distance: str = "layer_cosine"
    energy_frac: float = 0.9
    probe_m: int = 32
    eta_assumed: float | None = None
    label_known: bool = True
    init_seed: int = 0
    init_std: float = 0.5
    per_layer: bool = True
    d_shape: tuple[int, ...] | None = None
    max_halvings: int = 20
    tol: float = 1e-12
    # adaptive attacker
    tau_lambda: float = 1.0
    tau_step: float = 0.05
    tau_bounds: tuple[float, float] = (0.05, 3.0)
    tau_init: str = "ones"     # "ones": start at the prior mean, "prior": one draw from the prior
    update_sign: float = 1.0   # theta_u ~ T(theta_org) + sign * eta * grad

    def __post_init__(self):
        if self.iters < 0 or self.step <= 0 or self.tv_lambda < 0:
            raise ValueError("iters >= 0, step > 0, tv_lambda >= 0 required")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if not 0.0 < self.energy_frac <= 1.0:
            raise ValueError("energy_frac must lie in (0, 1]")
        if self.tau_init not in ("prior", "ones"):
            raise ValueError("tau_init must be 'prior' or 'ones'")


@dataclass
class ReconResult:
    x_hat: np.ndarray
    y_hat: int
    objective: float
    trace: list[float] = field(default_factory=list)
    tau_hat: COBScales | None = None
    aborted: bool = False


class ReconAborted(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def _blocks_for(distance, params):
    if distance == "layer_cosine":
        return params.layer_blocks()
    return [slice(0, len(params))]


def grad_distance(g: np.ndarray, t: np.ndarray, distance: str, blocks) -> tuple[float, np.ndarray]:
    """Distance between a candidate gradient and the target, and its gradient in ``g``."""
    if distance == "l2":
        r = g - t
        return float(r @ r), 2.0 * r
    val = 0.0
    dg = np.zeros_like(g)
    used = 0
    for blk in blocks:
        gb, tb = g[blk], t[blk]
        nt = float(np.linalg.norm(tb))
        if nt == 0.0:
            continue
        ng = max(float(np.linalg.norm(gb)), 1e-300)
        c = float(gb @ tb) / (ng * nt)
        val -= c
        dg[blk] = -(tb / (ng * nt) - c * gb / ng**2)
        used += 1
    return val / used, dg / used


def _check_target(t: np.ndarray, distance: str, blocks):
    if not np.all(np.isfinite(t)):
        raise ValueError("target gradient is not finite")
    if distance != "l2" and not any(np.any(t[b]) for b in blocks):
        raise ValueError("cosine distance is undefined for a zero target")


def _descend(f_and_grad, x0, step, iters, max_halvings, tol, project=None):
    """Gradient descent with step halving; the objective never increases."""
    x = x0.copy()
    f, g = f_and_grad(x)
    if not np.isfinite(f):
        raise ReconAborted("non-finite objective at the initial point", [f])
    trace = []
    for _ in range(iters):
        h = step
        accepted = False
        for _ in range(max_halvings + 1):
            xn = x - h * g
            if project is not None:
                xn = project(xn)
            fn, gn = f_and_grad(xn)
            if np.isfinite(fn) and fn <= f:
                accepted = True
                break
            h *= 0.5
        if not accepted:
            trace.append(f)
            break
        done = f - fn <= tol * max(1.0, abs(f))
        x, f, g = xn, fn, gn
        trace.append(f)
        step = min(h * 2.0, step * 4.0) if h == step else h
        if done:
            break
    return x, f, trace


def invert(spec: NetworkSpec, theta_org: ParamVector, target_grad, y_f: int,
           cfg: ReconConfig) -> ReconResult:
    """Gradient matching: find x whose loss gradient at ``theta_org`` matches the target."""
    t = np.asarray(getattr(target_grad, "values", target_grad), dtype=np.float64)
    blocks = _blocks_for(cfg.distance, theta_org)
    _check_target(t, cfg.distance, blocks)
    y = np.array([int(y_f)])
    d = spec.input_dim

    def f_and_grad(x):
        X = x[None, :]
        g = per_sample_grads(spec, theta_org, X, y)[0]
        val, dg = grad_distance(g, t, cfg.distance, blocks)
        _, dx = rop(spec, theta_org, X, y, dg)
        grad_x = dx[0]
        if cfg.tv_lambda > 0:
            tv, tg = tv_penalty(x, cfg.d_shape)
            val += cfg.tv_lambda * tv
            grad_x = grad_x + cfg.tv_lambda * tg
        return val, grad_x

    x0 = cfg.init_std * np.random.default_rng(cfg.init_seed).standard_normal(d)
    x, f, trace = _descend(f_and_grad, x0, cfg.step, cfg.iters, cfg.max_halvings, cfg.tol)
    return ReconResult(x, int(y_f), f, trace)


def _cob_grad(spec, tau: COBScales, theta_tau: ParamVector, G: ParamVector) -> list[np.ndarray]:
    """Gradient of a scalar through ``theta_tau = cob_apply(theta, tau)`` w.r.t. the scales.

    ``G`` is the gradient with respect to ``theta_tau``.
    """
    layers = theta_tau.layers()
    glayers = G.layers()
    out = []
    for h, t in enumerate(tau.tau):
        # neuron h-layer feeds weight layer h+1 and is produced by weight layer h
        W_in, b_in = layers[h]
        gW_in, gb_in = glayers[h]
        W_out, _ = layers[h + 1]
        gW_out, _ = glayers[h + 1]
        val = (np.sum(gW_in * W_in, axis=1) + gb_in * b_in - np.sum(gW_out * W_out, axis=0)) / t
        out.append(val)
    return out


def adaptive_invert(spec: NetworkSpec, theta_org: ParamVector, theta_u: ParamVector, y_f: int,
                    sigma_cob: float, cfg: ReconConfig, eta_att: float | None = None) -> ReconResult:
    """Joint search over the input and the change-of-basis scales.

    Minimises ``||T_tau(theta_org) + s * eta * grad l(x; T_tau theta_org) - theta_u||^2
    + tv_lambda * TV(x) + tau_lambda * sum (tau - 1)^2 / (2 sigma_cob^2)``
    by alternating descent steps on ``x`` and ``tau``.  The scales start
    from a draw of the attacker's prior and stay at 1 when ``sigma_cob == 0``.
    """
    if sigma_cob < 0:
        raise ValueError("sigma_cob must be >= 0")
    eta = eta_att if eta_att is not None else cfg.eta_assumed
    if eta is None or eta <= 0:
        raise ValueError("an attacker step size eta > 0 is required")
    c = cfg.update_sign * eta
    y = np.array([int(y_f)])
    lo, hi = cfg.tau_bounds
    rng = np.random.default_rng(cfg.init_seed)
    x = cfg.init_std * rng.standard_normal(spec.input_dim)
    learn_tau = sigma_cob > 0
    tau_seed = int(rng.integers(2**63 - 1))
    tau = cob_sample(spec, sigma_cob, lo, hi, tau_seed) \
        if learn_tau and cfg.tau_init == "prior" else COBScales.ones(spec)
    target = theta_u.values

    def residual(x, tau):
        th = cob_apply(spec, theta_org, tau)
        g = per_sample_grads(spec, th, x[None, :], y)[0]
        return th, th.values + c * g - target

    def prior(tau):
        if not learn_tau:
            return 0.0, [np.zeros_like(t) for t in tau.tau]
        w = cfg.tau_lambda / (2 * sigma_cob**2)
        return (w * float(sum(np.sum((t - 1) ** 2) for t in tau.tau)),
                [2 * w * (t - 1) for t in tau.tau])

    def total(x, tau):
        _, r = residual(x, tau)
        val = float(r @ r) + prior(tau)[0]
        if cfg.tv_lambda > 0:
            val += cfg.tv_lambda * tv_penalty(x, cfg.d_shape)[0]
        return val

    def fx(xv):
        th, r = residual(xv, tau)
        _, dx = rop(spec, th, xv[None, :], y, r)
        val = float(r @ r)
        gx = 2 * c * dx[0]
        if cfg.tv_lambda > 0:
            tv, tg = tv_penalty(xv, cfg.d_shape)
            val += cfg.tv_lambda * tv
            gx = gx + cfg.tv_lambda * tg
        return val, gx

    widths = [t.size for t in tau.tau]
    cuts = np.cumsum(widths)[:-1]

    def unflat(v):
        return COBScales(tuple(np.split(v, cuts)), lo, hi)

    def ft(tv):
        tt = unflat(tv)
        th, r = residual(x, tt)
        hv, _ = rop(spec, th, x[None, :], y, r)
        G = ParamVector(2 * r + 2 * c * hv, th.manifest)
        pv, pg = prior(tt)
        grads = _cob_grad(spec, tt, th, G)
        val = float(r @ r) + pv
        if cfg.tv_lambda > 0:
            val += cfg.tv_lambda * tv_penalty(x, cfg.d_shape)[0]
        return val, np.concatenate([a + b for a, b in zip(grads, pg)])

    trace = [total(x, tau)]
    step_x, step_t = cfg.step, cfg.tau_step
    for _ in range(cfg.iters):
        x, fxv, tr = _descend(fx, x, step_x, 1, cfg.max_halvings, 0.0)
        if learn_tau:
            tv, _, _ = _descend(ft, tau.flat(), step_t, 1, cfg.max_halvings, 0.0,
                                project=lambda v: np.clip(v, lo, hi))
            tau = unflat(tv)
        f = total(x, tau)
        trace.append(f)
        if trace[-2] - f <= cfg.tol * max(1.0, abs(f)):
            break
    return ReconResult(x, int(y_f), trace[-1], trace, tau)


# ---------------------------------------------------------------------------
# metrics


def _ssim_stats(a, b, c1, c2):
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - ma) * (b - mb)).mean()
    return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))


def ssim(x_hat, x_true, d_shape=None, window: int = 8, c1: float = 1e-4, c2: float = 9e-4) -> float:
    """Single-scale SSIM; sliding ``window`` squares on grids, global statistics on vectors."""
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x_true, dtype=np.float64)
    if d_shape is None or len(d_shape) == 1:
        return float(_ssim_stats(a.ravel(), b.ravel(), c1, c2))
    A, B = a.reshape(d_shape), b.reshape(d_shape)
    H, W = A.shape
    wh, ww = min(window, H), min(window, W)
    vals = [
        _ssim_stats(A[i:i + wh, j:j + ww], B[i:i + wh, j:j + ww], c1, c2)
        for i in range(H - wh + 1) for j in range(W - ww + 1)
    ]
    return float(np.mean(vals))


@dataclass(frozen=True)
class ReconMetrics:
    mse: float
    psnr: float
    ssim: float


def recon_metrics(x_hat, x_true, d_shape=None, lo: float | None = None,
                  hi: float | None = None) -> ReconMetrics:
    """MSE / PSNR / SSIM after mapping both inputs to [0, 1] with ``(lo, hi)``.

    Without ``lo``/``hi`` the inputs are assumed to be in [0, 1] already.
    """
    a = np.asarray(x_hat, dtype=np.float64).ravel()
    b = np.asarray(x_true, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("x_hat and x_true differ in shape")
    if lo is not None and hi is not None:
        a = (a - lo) / (hi - lo)
        b = (b - lo) / (hi - lo)
    mse = float(np.mean((a - b) ** 2))
    psnr = math.inf if mse == 0 else -10.0 * math.log10(mse)
    return ReconMetrics(mse, psnr, ssim(a, b, d_shape))
