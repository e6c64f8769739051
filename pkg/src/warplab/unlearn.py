"""Gradient-based approximate unlearning.

``ngp_step`` is the negative-gradient-plus update
``theta <- theta - eta * (lambda * g_r - alpha * g_f)``.  ``unlearn_run``
iterates it and, when WARP is enabled, interleaves teleport moves guarded
by a retain-loss safeguard.  ``langevin_step`` is the clipped, noisy
variant and ``retrain_oracle`` the exact reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import math

import numpy as np

from .nn import (LabeledSet, NetworkSpec, ParamVector, TrainConfig, grad, init_params, loss,
                 train)
from .teleport import (WarpConfig, build_retain_basis, cob_apply, cob_sample, fastwarp_update,
                       teleport_step)


@dataclass(frozen=True)
class UnlearnConfig:
    eta: float = 0.01
    lambda_retain: float = 1.0
    alpha_ascent: float = 1.0
    steps: int = 10
    forget_batch: int = 16
    retain_batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0 or self.lambda_retain < 0 or self.alpha_ascent < 0:
            raise ValueError("eta, lambda_retain, alpha_ascent must be >= 0")
        if self.steps < 1 or self.forget_batch < 1 or self.retain_batch < 1:
            raise ValueError("steps and batch sizes must be >= 1")


@dataclass(frozen=True)
class LangevinConfig:
    eta: float = 0.01
    clip_C: float = 1.0
    lambda_reg: float = 0.0
    sigma: float | None = None   # None: use sqrt(2 * eta * lambda_reg)
    alpha_mix: float = 0.5
    steps: int = 10
    forget_batch: int = 16
    retain_batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.clip_C <= 0:
            raise ValueError("clip_C must be > 0")
        if self.lambda_reg < 0 or (self.sigma is not None and self.sigma < 0):
            raise ValueError("lambda_reg and sigma must be >= 0")
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ValueError("alpha_mix must lie in [0, 1]")

    @property
    def noise_std(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return math.sqrt(2.0 * self.eta * self.lambda_reg)


class NonFiniteUpdate(FloatingPointError):
    pass


def ngp_step(spec: NetworkSpec, params: ParamVector, forget_batch: LabeledSet,
             retain_batch: LabeledSet, cfg: UnlearnConfig) -> ParamVector:
    g_f = grad(spec, params, forget_batch)
    g_r = grad(spec, params, retain_batch)
    step = cfg.lambda_retain * g_r.values - cfg.alpha_ascent * g_f.values
    new = params.values - cfg.eta * step
    if not np.all(np.isfinite(new)):
        raise NonFiniteUpdate(
            f"non-finite update: |g_f|={g_f.norm():.3g}, |g_r|={g_r.norm():.3g}, eta={cfg.eta}")
    return ParamVector(new, params.manifest)


def draw_batch(rng: np.random.Generator, data: LabeledSet, size: int) -> LabeledSet:
    """Sample ``min(size, n)`` rows without replacement, in sorted order."""
    n = len(data)
    idx = np.sort(rng.choice(n, size=min(size, n), replace=False))
    return data.subset(idx)


@dataclass
class StepRecord:
    step: int
    forget_loss: float
    retain_loss: float
    forget_grad_norm: float
    teleported: bool
    backtracked: bool


@dataclass
class UnlearnTrace:
    records: list[StepRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_teleports(self) -> int:
        return sum(r.teleported for r in self.records)

    @property
    def n_backtracks(self) -> int:
        return sum(r.backtracked for r in self.records)

    def rows(self):
        return [tuple(asdict(r).values()) for r in self.records]

    HEADER = ("step", "forget_loss", "retain_loss", "forget_grad_norm", "teleported", "backtracked")


def _teleport(spec, theta_half, theta_org, fb, retain_ref, wcfg, wrng, state):
    if wcfg.symmetry_kind == "change_of_basis":
        lo, hi = wcfg.cob_bounds
        tau = cob_sample(spec, wcfg.cob_sigma, lo, hi, int(wrng.integers(2**63 - 1)))
        return cob_apply(spec, theta_half, tau)
    augment = wcfg.bias_mode == "augmented"
    if wcfg.use_fastwarp:
        basis = fastwarp_update(spec, theta_half, retain_ref, state.get("basis"),
                                wcfg.var_target, wcfg.k_max, wcfg.t_track, augment)
    else:
        basis = build_retain_basis(spec, theta_half, retain_ref, wcfg.var_target, wcfg.k_max,
                                   augment)
    state["basis"] = basis
    theta = theta_half
    for _ in range(wcfg.tel_steps):
        theta = teleport_step(spec, theta, theta_org, fb, basis, wcfg, wrng)
    return theta


def unlearn_run(spec: NetworkSpec, theta_org: ParamVector, forget: LabeledSet,
                retain: LabeledSet, ucfg: UnlearnConfig, wcfg: WarpConfig | None = None,
                trace_full: bool = True) -> tuple[ParamVector, UnlearnTrace]:
    """Iterated NGP with optional WARP teleportation.

    Batches come from ``rng(ucfg.seed)`` (forget rows, then retain rows, per
    step) and teleport randomness from ``rng(wcfg.seed)``, so disabling WARP
    reproduces the plain loop exactly.  The retain basis and the safeguard
    both use the full retain set.  ``trace_full=False`` skips the per-step
    full-set loss evaluation (the trace then reports batch losses).
    """
    wcfg = wcfg or WarpConfig(enabled=False)
    rng = np.random.default_rng(ucfg.seed)
    wrng = np.random.default_rng(wcfg.seed)
    theta = theta_org.copy()
    trace = UnlearnTrace()
    state: dict = {}
    triggers = 0
    for t in range(ucfg.steps):
        fb = draw_batch(rng, forget, ucfg.forget_batch)
        rb = draw_batch(rng, retain, ucfg.retain_batch)
        theta_half = ngp_step(spec, theta, fb, rb, ucfg)
        gf_norm = grad(spec, theta_half, fb).norm()
        teleported = backtracked = False
        if wcfg.enabled and wcfg.fires(t, gf_norm):
            triggers += 1
            theta_new = _teleport(spec, theta_half, theta_org, fb, retain, wcfg, wrng, state)
            ref_theta = theta_half if wcfg.safeguard_ref == "half_step" else theta
            ref = loss(spec, ref_theta, retain)
            new_loss = loss(spec, theta_new, retain)
            if not np.isfinite(new_loss) or new_loss > ref + wcfg.epsilon_retain:
                theta_new = theta_half
                backtracked = True
            else:
                teleported = True
            theta = theta_new
        else:
            theta = theta_half
        if trace_full:
            fl, rl = loss(spec, theta, forget), loss(spec, theta, retain)
        else:
            fl, rl = loss(spec, theta, fb), loss(spec, theta, rb)
        trace.records.append(StepRecord(t, fl, rl, gf_norm, teleported, backtracked))
    if triggers and trace.n_backtracks >= triggers:
        trace.warnings.append(f"safeguard reverted all {triggers} teleport attempts")
    return theta, trace


def plain_ngp_loop(spec, theta_org, forget, retain, ucfg) -> ParamVector:
    """Reference loop: ``ucfg.steps`` NGP steps on the same batch schedule."""
    rng = np.random.default_rng(ucfg.seed)
    theta = theta_org.copy()
    for _ in range(ucfg.steps):
        fb = draw_batch(rng, forget, ucfg.forget_batch)
        rb = draw_batch(rng, retain, ucfg.retain_batch)
        theta = ngp_step(spec, theta, fb, rb, ucfg)
    return theta


def remove_rows(full: LabeledSet, forget: LabeledSet | None) -> LabeledSet:
    """``full`` minus every row that appears (exactly) in ``forget``."""
    if forget is None:
        return full
    drop = {(r.tobytes(), int(c)) for r, c in zip(forget.X, forget.y)}
    keep = [i for i, (r, c) in enumerate(zip(full.X, full.y)) if (r.tobytes(), int(c)) not in drop]
    if len(full) - len(keep) != len(forget):
        raise ValueError("forget set is not a subset of the training data")
    if not keep:
        raise ValueError("nothing left to train on after removing the forget set")
    return full.subset(keep, "train")


def retrain_oracle(spec: NetworkSpec, full_data: LabeledSet, forget: LabeledSet | None,
                   train_cfg: TrainConfig) -> ParamVector:
    remainder = remove_rows(full_data, forget)
    return train(spec, init_params(spec), remainder, train_cfg.epochs, train_cfg.lr,
                 train_cfg.batch_size, train_cfg.seed)


def clip_norm(v: np.ndarray, C: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v * (C / n) if n > C else v


def mu_gradient(spec, params, theta_p, forget_batch, retain_batch, lcfg) -> np.ndarray:
    """Gradient of ``alpha (l_r + lambda ||theta - theta_p||^2) - (1 - alpha) l_f``."""
    g_r = grad(spec, params, retain_batch).values
    g_f = grad(spec, params, forget_batch).values
    a = lcfg.alpha_mix
    return a * (g_r + 2.0 * lcfg.lambda_reg * (params.values - theta_p.values)) - (1 - a) * g_f


def langevin_step(spec: NetworkSpec, params: ParamVector, forget_batch: LabeledSet,
                  retain_batch: LabeledSet, lcfg: LangevinConfig,
                  rng: np.random.Generator | None = None,
                  theta_p: ParamVector | None = None) -> ParamVector:
    """``theta - eta * clip(grad L_MU, C) + noise_std * xi``, anchored at ``theta_p``."""
    theta_p = params if theta_p is None else theta_p
    g = clip_norm(mu_gradient(spec, params, theta_p, forget_batch, retain_batch, lcfg), lcfg.clip_C)
    new = params.values - lcfg.eta * g
    std = lcfg.noise_std
    if std > 0:
        rng = rng if rng is not None else np.random.default_rng(lcfg.seed)
        new = new + std * rng.standard_normal(new.size)
    return ParamVector(new, params.manifest)


def langevin_run(spec, theta_org, forget, retain, lcfg: LangevinConfig) -> ParamVector:
    rng = np.random.default_rng(lcfg.seed)
    noise_rng = np.random.default_rng([lcfg.seed, 1])
    theta = theta_org.copy()
    for _ in range(lcfg.steps):
        fb = draw_batch(rng, forget, lcfg.forget_batch)
        rb = draw_batch(rng, retain, lcfg.retain_batch)
        theta = langevin_step(spec, theta, fb, rb, lcfg, noise_rng, theta_org)
    return theta
