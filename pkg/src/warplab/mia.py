"""Membership inference against unlearned models.

Black box: a shadow-model likelihood-ratio test (U-LiRA) comparing the
confidence distribution of unlearned shadows with that of retrained ones.

White box: the Gaussian gradient-difference test, which whitens
``grad l(theta_u) - grad l(theta_org)`` against a non-member null and
scores the chi-square tail.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable
import math

import numpy as np
import scipy.linalg

from .nn import (LabeledSet, NetworkSpec, ParamVector, TrainConfig, TrainingDiverged, accuracy,
                 concat_sets, init_params, per_sample_grads, predict_proba, train,
                 true_class_confidence)
from .stats import AttackReport, FPR_TARGETS, chi2_logsf, roc_report
from .teleport import WarpConfig
from .unlearn import NonFiniteUpdate, UnlearnConfig, unlearn_run

VAR_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# U-LiRA


@dataclass(frozen=True)
class GaussianFit:
    mu: float
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "sigma2", max(float(self.sigma2), VAR_FLOOR))

    @classmethod
    def fit(cls, samples) -> "GaussianFit":
        x = np.asarray(samples, dtype=np.float64)
        x = x[np.isfinite(x)]
        if x.size == 0:
            raise ValueError("no finite samples to fit")
        return cls(float(x.mean()), float(x.var()))

    def logpdf(self, o) -> np.ndarray:
        o = np.asarray(o, dtype=np.float64)
        return -0.5 * (np.log(2 * np.pi * self.sigma2) + (o - self.mu) ** 2 / self.sigma2)


def logit_conf(p, eps: float = 1e-12) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    return np.log(p) - np.log1p(-p)


def ulira_score(o_star, fit_member: GaussianFit, fit_nonmember: GaussianFit) -> np.ndarray:
    """``N(o; member) / (N(o; member) + N(o; non-member))``, evaluated in log space."""
    l1 = fit_member.logpdf(o_star)
    l0 = fit_nonmember.logpdf(o_star)
    return np.exp(-np.logaddexp(0.0, l0 - l1))


@dataclass
class ShadowSuite:
    O: np.ndarray        # (n_shadows_kept, n_targets) unlearned-shadow confidences
    O_hat: np.ndarray    # (n_shadows_kept, n_targets) retrained-shadow confidences
    dropped: int = 0
    checkpoints: list = field(default_factory=list)  # (kind, shadow index, ParamVector)


def shadow_seeds(seed: int, n: int) -> list[int]:
    state = np.random.SeedSequence(seed).generate_state(n, np.uint64)
    return [int(v >> np.uint64(1)) for v in state]


def _one_shadow(job):
    """Train, unlearn (per variant) and retrain one shadow; ``None`` if it diverged."""
    spec, base_data, targets, train_cfg, unlearn_cfg, variants, sseed, n_pool = job
    srng = np.random.default_rng(sseed)
    idx = np.sort(srng.choice(len(base_data), size=n_pool, replace=False))
    retain_s = base_data.subset(idx, "retain")
    d_s = concat_sets([retain_s, targets.with_role("forget")], "train")
    init_seed, train_seed, unlearn_seed = (int(v) for v in srng.integers(2**63 - 1, size=3))
    sspec = NetworkSpec(spec.layer_dims, spec.activation, init_seed)
    ucfg = replace(unlearn_cfg, seed=unlearn_seed)
    try:
        theta0 = train(sspec, init_params(sspec), d_s, train_cfg.epochs, train_cfg.lr,
                       train_cfg.batch_size, train_seed)
        theta_r = train(sspec, init_params(sspec), retain_s, train_cfg.epochs, train_cfg.lr,
                        train_cfg.batch_size, train_seed)
        thetas_f = {k: unlearn_run(sspec, theta0, targets, retain_s, ucfg, w, trace_full=False)[0]
                    for k, w in variants.items()}
    except (TrainingDiverged, NonFiniteUpdate, FloatingPointError):
        return None
    return theta_r, thetas_f


def ulira_shadow_suite(spec: NetworkSpec, base_data: LabeledSet, targets: LabeledSet,
                       n_shadows: int, train_cfg: TrainConfig, unlearn_cfg: UnlearnConfig,
                       warp_cfg: WarpConfig | None, seed: int, pool_frac: float = 0.8,
                       keep_checkpoints: bool = False,
                       warp_cfgs: dict | None = None,
                       workers: int = 1) -> dict[str, ShadowSuite] | ShadowSuite:
    """Train, unlearn and retrain ``n_shadows`` shadow models.

    ``base_data`` is the attacker's population excluding the targets.
    Shadow ``s`` draws ``pool_frac`` of it, trains on that draw plus all
    ``targets``, unlearns the targets with the defender's pipeline, and
    separately retrains on the draw alone.  The true-class confidences of
    the targets under the two models form row ``s`` of ``O`` and ``O_hat``.

    When ``warp_cfgs`` maps names to WARP configs the trained and retrained
    shadows are shared and one suite per name is returned.  Shadows are
    independent, so ``workers > 1`` runs them in a process pool with
    identical results.
    """
    if n_shadows < 2:
        raise ValueError("need at least two shadow models")
    variants = warp_cfgs if warp_cfgs is not None else {"_": warp_cfg}
    n_pool = max(1, int(round(pool_frac * len(base_data))))
    jobs = [(spec, base_data, targets, train_cfg, unlearn_cfg, variants, sseed, n_pool)
            for sseed in shadow_seeds(seed, n_shadows)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_shadow, jobs))
    else:
        results = [_one_shadow(j) for j in jobs]
    O = {k: [] for k in variants}
    O_hat, ckpts = [], {k: [] for k in variants}
    dropped = 0
    for s, res in enumerate(results):
        if res is None:
            dropped += 1
            continue
        theta_r, thetas_f = res
        O_hat.append(true_class_confidence(spec, theta_r, targets))
        for k, th in thetas_f.items():
            O[k].append(true_class_confidence(spec, th, targets))
            if keep_checkpoints:
                ckpts[k] += [("unlearned", s, th), ("retrained", s, theta_r)]
    if len(O_hat) < 2:
        raise RuntimeError(f"only {len(O_hat)} shadows survived ({dropped} dropped)")
    out = {k: ShadowSuite(np.array(O[k]), np.array(O_hat), dropped, ckpts[k]) for k in variants}
    return out if warp_cfgs is not None else out["_"]


def _transform(use_logit):
    return logit_conf if use_logit else (lambda v: np.asarray(v, dtype=np.float64))


def ulira_scores(O: np.ndarray, O_hat: np.ndarray, obs: np.ndarray,
                 use_logit: bool = False) -> np.ndarray:
    """Per-target membership probability of observations ``obs`` (one per target)."""
    tf = _transform(use_logit)
    O, O_hat, obs = tf(O), tf(O_hat), tf(obs)
    return np.array([
        float(ulira_score(obs[i], GaussianFit.fit(O[:, i]), GaussianFit.fit(O_hat[:, i])))
        for i in range(obs.size)
    ])


def ulira_attack(suite: ShadowSuite, unlearned_conf=None, retrained_conf=None,
                 leave_one_out: bool = True, use_logit: bool = False,
                 name: str = "ulira") -> AttackReport:
    """Unlearned-vs-retrained distinguishing game on the forget targets.

    Positives are observations from unlearned models, negatives from
    retrained ones.  ``unlearned_conf`` / ``retrained_conf`` are the
    defender's own models (scored against all shadows).  With
    ``leave_one_out`` every shadow pair is also used as a target, scored
    against the remaining shadows.
    """
    pos, neg, per_target = [], [], []
    if unlearned_conf is not None:
        p = ulira_scores(suite.O, suite.O_hat, unlearned_conf, use_logit)
        pos.append(p)
        per_target.append(p)
    if retrained_conf is not None:
        neg.append(ulira_scores(suite.O, suite.O_hat, retrained_conf, use_logit))
    if leave_one_out:
        n = suite.O.shape[0]
        if n < 3:
            raise ValueError("leave-one-out needs at least three shadows")
        for s in range(n):
            keep = np.arange(n) != s
            O, Oh = suite.O[keep], suite.O_hat[keep]
            ps = ulira_scores(O, Oh, suite.O[s], use_logit)
            pos.append(ps)
            per_target.append(ps)
            neg.append(ulira_scores(O, Oh, suite.O_hat[s], use_logit))
    if not pos or not neg:
        raise ValueError("need both unlearned and retrained observations")
    pos, neg = np.concatenate(pos), np.concatenate(neg)
    scores = np.r_[pos, neg]
    labels = np.r_[np.ones(pos.size, int), np.zeros(neg.size, int)]
    rep = roc_report(scores, labels, FPR_TARGETS, name)
    rep.meta["accuracy@0.5"] = rep.decision_accuracy(0.5)
    rep.meta["dropped_shadows"] = suite.dropped
    rep.meta["per_target_score"] = np.mean(per_target, axis=0)
    return rep


# ---------------------------------------------------------------------------
# Gaussian gradient-difference test


def grad_diff_matrix(spec: NetworkSpec, theta_org: ParamVector, theta_u: ParamVector,
                     X, y) -> np.ndarray:
    """Row i is ``grad l(x_i; theta_u) - grad l(x_i; theta_org)``."""
    if not theta_org.compatible(theta_u):
        raise ValueError("theta_org and theta_u have different manifests")
    return per_sample_grads(spec, theta_u, X, y) - per_sample_grads(spec, theta_org, X, y)


def grad_diff(spec, theta_org, theta_u, x, y) -> ParamVector:
    D = grad_diff_matrix(spec, theta_org, theta_u, np.atleast_2d(x), np.atleast_1d(y))
    return ParamVector(D[0], theta_org.manifest)


def select_coords(background_deltas: np.ndarray, frac: float) -> np.ndarray:
    """Indices of the ``ceil(frac * D)`` highest-variance coordinates, sorted.

    Ties are broken towards the lower index.
    """
    if not 0.0 < frac <= 1.0:
        raise ValueError("frac must lie in (0, 1]")
    B = np.atleast_2d(np.asarray(background_deltas, dtype=np.float64))
    D = B.shape[1]
    n = min(D, math.ceil(frac * D - 1e-9))
    var = B.var(axis=0, ddof=1) if B.shape[0] > 1 else np.zeros(D)
    order = np.lexsort((np.arange(D), -var))
    return np.sort(order[:n])


def select_top(background_deltas: np.ndarray, n: int) -> np.ndarray:
    """Same rule as ``select_coords`` with an absolute count."""
    B = np.atleast_2d(np.asarray(background_deltas, dtype=np.float64))
    return select_coords(B, min(1.0, n / B.shape[1]))


@dataclass
class GaussianNull:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    ridge: float
    coord_index: np.ndarray
    n_used: int = 0
    n_dropped: int = 0
    _chol: tuple | None = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return int(self.coord_index.size)

    def cholesky(self):
        if self._chol is None:
            A = self.sigma_hat + self.ridge * np.eye(self.d)
            try:
                self._chol = scipy.linalg.cho_factor(A, lower=True)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    f"covariance + ridge is not positive definite (ridge={self.ridge}); "
                    "increase the ridge") from exc
        return self._chol


def fit_null_from_deltas(deltas: np.ndarray, ridge: float, coord_index) -> GaussianNull:
    if ridge <= 0:
        raise ValueError("ridge must be > 0")
    coord_index = np.asarray(coord_index, dtype=np.int64)
    if np.any(np.diff(coord_index) <= 0):
        raise ValueError("coord_index must be sorted and unique")
    D = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    ok = np.all(np.isfinite(D), axis=1)
    D = D[ok][:, coord_index]
    if D.shape[0] < 2:
        raise ValueError("need at least two finite background samples")
    mu = D.mean(axis=0)
    sigma = np.cov(D, rowvar=False, ddof=1).reshape(coord_index.size, coord_index.size)
    return GaussianNull(mu, sigma, float(ridge), coord_index, int(ok.sum()), int((~ok).sum()))


def ggd_fit_null(spec, background: LabeledSet, theta_org, theta_u, ridge, coord_index) -> GaussianNull:
    D = grad_diff_matrix(spec, theta_org, theta_u, background.X, background.y)
    return fit_null_from_deltas(D, ridge, coord_index)


def ggd_score(delta_x, null: GaussianNull) -> tuple[np.ndarray, np.ndarray]:
    """Mahalanobis statistic ``s`` and ``-log`` chi-square tail, per row of ``delta_x``.

    ``delta_x`` may be a full-length vector (restricted internally) or
    already restricted to ``null.coord_index``.
    """
    Dx = np.atleast_2d(np.asarray(getattr(delta_x, "values", delta_x), dtype=np.float64))
    if Dx.shape[1] != null.d:
        Dx = Dx[:, null.coord_index]
    r = Dx - null.mu_hat
    sol = scipy.linalg.cho_solve(null.cholesky(), r.T).T
    s = np.maximum(np.einsum("ij,ij->i", r, sol), 0.0)
    log_tail = np.array([-chi2_logsf(v, null.d) for v in s])
    return s, log_tail


def pseudo_label(spec, theta_org, background: LabeledSet) -> LabeledSet:
    y = predict_proba(spec, theta_org, background.X).argmax(axis=1)
    return LabeledSet(background.X, y, "background", background.seed, background.n_classes)


def ggd_attack(spec: NetworkSpec, theta_org: ParamVector, theta_u: ParamVector,
               candidates: LabeledSet, labels, background_sampler: Callable[[int], LabeledSet],
               T: int = 1, ridge: float = 1e-6, frac: float = 0.1,
               n_coords: int | None = None, pseudo_labels: bool = False,
               name: str = "ggd") -> AttackReport:
    """Cumulative log-tail evidence over ``T`` fresh background draws.

    ``background_sampler(t)`` returns the non-member background for
    repetition ``t``.  ``n_coords`` (if given) overrides ``frac``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    Dc = grad_diff_matrix(spec, theta_org, theta_u, candidates.X, candidates.y)
    S = np.zeros(len(candidates))
    used = []
    for t in range(T):
        bg = background_sampler(t)
        if pseudo_labels:
            bg = pseudo_label(spec, theta_org, bg)
        Db = grad_diff_matrix(spec, theta_org, theta_u, bg.X, bg.y)
        idx = select_top(Db, n_coords) if n_coords is not None else select_coords(Db, frac)
        null = fit_null_from_deltas(Db, ridge, idx)
        _, lt = ggd_score(Dc, null)
        S += lt
        used.append(null.d)
    rep = roc_report(S, labels, FPR_TARGETS, name)
    rep.meta["d"] = used
    return rep


# ---------------------------------------------------------------------------
# memorization


def memorization_rank(spec, theta_org, forget: LabeledSet) -> np.ndarray:
    """Forget indices by ascending true-class confidence (stable)."""
    conf = true_class_confidence(spec, theta_org, forget)
    return np.argsort(conf, kind="stable")


def rank_by_values(values) -> np.ndarray:
    return np.argsort(np.asarray(values, dtype=np.float64), kind="stable")


def top_slice(ranked: np.ndarray, frac: float, from_end: bool = False) -> np.ndarray:
    n = max(1, int(np.floor(frac * ranked.size + 0.5)))
    return ranked[-n:] if from_end else ranked[:n]
