"""Scenario orchestration: data, training, unlearning, attacks and bounds.

``ExperimentConfig`` is a tree of dataclasses that round-trips through JSON.
``run_scenario`` executes the configured stages, writes every numeric
artifact as tab-separated text (checkpoints as JSON) and returns a
``RunManifest`` with checksums and per-stage timings.

The ``*_comparison`` helpers implement the fixed protocols used to compare
plain unlearning with its teleported variants on the blob scenario.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import json
import math
from pathlib import Path
import time
import traceback

import numpy as np

from . import __version__
from .io import save_checkpoint, save_dataset, write_pgm, write_table
from .mia import (ggd_attack, ulira_attack, ulira_shadow_suite)
from .nn import (LabeledSet, NetworkSpec, ParamVector, TrainConfig, accuracy, gen_blobs, loss,
                 per_sample_grad_norms, split_forget, train_from_scratch, true_class_confidence)
from .recon import (ReconConfig, adaptive_invert, filter_target, invert, layer_subspaces,
                    probe_grads, recon_metrics)
from .seeding import derive_seed
from .stats import AttackReport, spearman
from .teleport import WarpConfig
from .theory import GMMSpec, LogNormalCOB, bound_ratio_with_se, teleported_terms
from .unlearn import (LangevinConfig, UnlearnConfig, langevin_run, retrain_oracle, unlearn_run)

STAGES = ("data", "train", "unlearn", "attack", "theory")
ATTACK_KINDS = ("none", "ulira", "ggd", "recon", "adaptive_recon")
METHODS = ("ngp", "langevin", "retrain_oracle")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    n_per_class: int = 200
    d: int = 16
    K: int = 4
    spread: float = 0.5
    scale: float = 1.0
    forget_frac: float = 0.02
    n_test_per_class: int = 100
    seed: int = 0
    test_seed: int = 1


@dataclass
class ModelConfig:
    layer_dims: tuple[int, ...] = (16, 32, 32, 4)
    activation: str = "relu"
    seed: int = 0

    def spec(self) -> NetworkSpec:
        return NetworkSpec(tuple(self.layer_dims), self.activation, self.seed)


@dataclass
class UnlearnBlock:
    method: str = "ngp"
    ngp: UnlearnConfig = field(default_factory=UnlearnConfig)
    langevin: LangevinConfig = field(default_factory=LangevinConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unlearn.method must be one of {METHODS}")


@dataclass
class AttackConfig:
    kind: str = "none"
    seed: int = 0
    # U-LiRA
    n_shadows: int = 16
    pool_frac: float = 0.8
    keep_shadow_checkpoints: bool = True
    use_logit: bool = False
    # Gaussian gradient difference
    ggd_m: int = 1000
    ggd_T: int = 1
    ggd_ridge: float = 1e-3
    ggd_frac: float = 0.1
    ggd_n_coords: int | None = None
    pseudo_labels: bool = False
    # reconstruction
    n_targets: int = 10
    probe_m: int = 32
    recon: ReconConfig = field(default_factory=ReconConfig)
    attacker_sigmas: tuple[float, ...] = (0.0, 0.4, 0.8)
    match_defender: bool = True      # defender COB sigma follows the attacker's prior

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack.kind must be one of {ATTACK_KINDS}")


@dataclass
class TheoryConfig:
    weights: tuple[float, ...] = (1.0,)
    alpha: tuple[tuple[float, ...], ...] = ((1.0,),)
    s2: tuple[float, ...] = (0.1,)
    d: int = 1
    H_x: float | None = None
    n_mc: int = 100_000
    seed: int = 0

    def gmm(self) -> GMMSpec:
        return GMMSpec.from_alpha(self.weights, np.array(self.alpha, dtype=np.float64),
                                  self.d, self.H_x)

    def cob(self) -> LogNormalCOB:
        return LogNormalCOB(self.s2)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(200, 0.1, 32, 0))
    unlearn: UnlearnBlock = field(default_factory=UnlearnBlock)
    warp: WarpConfig = field(default_factory=WarpConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    theory: TheoryConfig | None = None
    master_seed: int | None = None
    name: str = "run"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "unlearn"): UnlearnBlock,
    (ExperimentConfig, "warp"): WarpConfig,
    (ExperimentConfig, "attack"): AttackConfig,
    (ExperimentConfig, "theory"): TheoryConfig,
    (UnlearnBlock, "ngp"): UnlearnConfig,
    (UnlearnBlock, "langevin"): LangevinConfig,
    (AttackConfig, "recon"): ReconConfig,
}


def _tupled(v):
    return tuple(_tupled(u) for u in v) if isinstance(v, list) else v


def _build(cls, doc):
    doc = dict(doc or {})
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    kw = {}
    for k, v in doc.items():
        sub = _NESTED.get((cls, k))
        if sub is not None and v is not None:
            v = _build(sub, v)
        else:
            v = _tupled(v)  # JSON arrays come back as lists
        kw[k] = v
    return cls(**kw)


def set_field(cfg: ExperimentConfig, path: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with the dotted scalar field ``path`` replaced."""
    head, _, rest = path.partition(".")
    if not hasattr(cfg, head):
        raise KeyError(f"no config field {path!r}")
    if not rest:
        return replace(cfg, **{head: value})
    sub = getattr(cfg, head)
    if sub is None:
        raise KeyError(f"config block {head!r} is not set")
    return replace(cfg, **{head: set_field(sub, rest, value)})


def materialize(cfg: ExperimentConfig, master_seed: int | None = None) -> ExperimentConfig:
    """Fill every stage seed from ``master_seed`` (or ``cfg.master_seed``) by hashing."""
    m = cfg.master_seed if master_seed is None else master_seed
    if m is None:
        return cfg
    ds = replace(cfg.dataset, seed=derive_seed(m, "data"), test_seed=derive_seed(m, "test"))
    un = replace(cfg.unlearn, ngp=replace(cfg.unlearn.ngp, seed=derive_seed(m, "unlearn")),
                 langevin=replace(cfg.unlearn.langevin, seed=derive_seed(m, "langevin")))
    at = replace(cfg.attack, seed=derive_seed(m, "attack"),
                 recon=replace(cfg.attack.recon, init_seed=derive_seed(m, "recon-init")))
    th = replace(cfg.theory, seed=derive_seed(m, "theory")) if cfg.theory is not None else None
    return replace(cfg, master_seed=m, dataset=ds,
                   model=replace(cfg.model, seed=derive_seed(m, "model")),
                   train=replace(cfg.train, seed=derive_seed(m, "train")),
                   unlearn=un, warp=replace(cfg.warp, seed=derive_seed(m, "warp")),
                   attack=at, theory=th)


# ---------------------------------------------------------------------------
# scenario building blocks


@dataclass
class Scenario:
    spec: NetworkSpec
    data: LabeledSet
    retain: LabeledSet
    forget: LabeledSet
    test: LabeledSet
    theta_org: ParamVector
    train_cfg: TrainConfig
    dataset: DatasetConfig


def blobs_for(ds: DatasetConfig, seed: int, n_per_class: int, role: str = "test") -> LabeledSet:
    return gen_blobs(seed, n_per_class, ds.d, ds.K, ds.spread, ds.scale, role)


def build_scenario(ds: DatasetConfig, model: ModelConfig, train_cfg: TrainConfig) -> Scenario:
    data = blobs_for(ds, ds.seed, ds.n_per_class, "train")
    retain, forget = split_forget(data, ds.forget_frac, ds.seed)
    test = blobs_for(ds, ds.test_seed, ds.n_test_per_class, "test")
    spec = model.spec()
    return Scenario(spec, data, retain, forget, test, train_from_scratch(spec, data, train_cfg),
                    train_cfg, ds)


def standard_scenario(seed: int, spread: float = 0.5,
                      layer_dims: tuple[int, ...] = (16, 32, 32, 4),
                      epochs: int = 200) -> Scenario:
    """Four 16-d blobs, 200 per class, 2% forget split, overtrained MLP."""
    ds = DatasetConfig(spread=spread, seed=seed, test_seed=10_000 + seed)
    return build_scenario(ds, ModelConfig(layer_dims, "relu", seed), TrainConfig(epochs, 0.1, 32, seed))


def run_ggd(spec, theta_org, theta_u, candidates, labels, sampler, T, ridge, frac,
            n_coords=None, pseudo_labels=False, max_raise: int = 8) -> AttackReport:
    """``ggd_attack`` that raises the ridge 100-fold while the factorization fails.

    Unlearning that blows up the weights produces gradient differences whose
    covariance exceeds double precision for a small absolute ridge; the
    ridge actually used is recorded in ``meta["ridge"]``.
    """
    for _ in range(max_raise + 1):
        try:
            rep = ggd_attack(spec, theta_org, theta_u, candidates, labels, sampler, T=T,
                             ridge=ridge, frac=frac, n_coords=n_coords,
                             pseudo_labels=pseudo_labels)
            rep.meta["ridge"] = ridge
            return rep
        except np.linalg.LinAlgError:
            ridge *= 100.0
    raise np.linalg.LinAlgError(f"factorization failed up to ridge={ridge / 100.0}")


def ggd_candidates(forget: LabeledSet, test: LabeledSet) -> tuple[LabeledSet, np.ndarray]:
    """Forget samples (label 1) followed by as many test samples (label 0)."""
    n = min(len(forget), len(test))
    nonm = test.subset(np.arange(n), "test")
    X = np.vstack([forget.X, nonm.X])
    y = np.concatenate([forget.y, nonm.y])
    cands = LabeledSet(X, y, "test", forget.seed, forget.n_classes)
    return cands, np.r_[np.ones(len(forget), int), np.zeros(n, int)]


# ---------------------------------------------------------------------------
# comparison protocols


@dataclass
class MIAOutcome:
    ulira: dict[str, AttackReport]
    ggd: dict[str, AttackReport]
    forget_grad_norms: np.ndarray
    retain_acc: dict[str, float]


def mia_comparison(sc: Scenario, ucfg: UnlearnConfig, variants: dict[str, WarpConfig],
                   n_shadows: int = 16, seed: int = 0, ggd_m: int = 1000, ggd_ridge: float = 1e-3,
                   ggd_frac: float = 0.1, workers: int = 1) -> MIAOutcome:
    """U-LiRA and the gradient-difference test for each unlearning variant.

    Shadows are shared across variants.  The defender's own unlearned
    model and a retrain-from-scratch model join the leave-one-out shadow
    game as one extra positive and negative observation.
    """
    suites = ulira_shadow_suite(sc.spec, sc.retain, sc.forget, n_shadows, sc.train_cfg, ucfg,
                                None, derive_seed(seed, "shadows"), warp_cfgs=variants,
                                workers=workers)
    theta_r = retrain_oracle(sc.spec, sc.data, sc.forget, sc.train_cfg)
    conf_r = true_class_confidence(sc.spec, theta_r, sc.forget)
    cands, labels = ggd_candidates(sc.forget, sc.test)

    def sampler(t):
        return blobs_for(sc.dataset, derive_seed(seed, "ggd-background", t),
                         ggd_m // sc.dataset.K, "background")

    ul, gg, racc = {}, {}, {}
    for name, w in variants.items():
        theta_u, _ = unlearn_run(sc.spec, sc.theta_org, sc.forget, sc.retain, ucfg, w,
                                 trace_full=False)
        conf_u = true_class_confidence(sc.spec, theta_u, sc.forget)
        ul[name] = ulira_attack(suites[name], conf_u, conf_r, name=f"ulira-{name}")
        gg[name] = run_ggd(sc.spec, sc.theta_org, theta_u, cands, labels, sampler, 1, ggd_ridge,
                           ggd_frac)
        racc[name] = accuracy(sc.spec, theta_u, sc.retain)
    norms = per_sample_grad_norms(sc.spec, sc.theta_org, sc.forget)
    return MIAOutcome(ul, gg, norms, racc)


def correlate_norm_vs_risk(norms, scores, norm_index=None, score_index=None):
    """Spearman rank correlation of forget-sample gradient norms and U-LiRA scores.

    Returns ``(rho, table)`` where ``table`` rows are ``(index, norm, score)``.
    """
    norms = np.asarray(norms, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    ni = np.arange(norms.size) if norm_index is None else np.asarray(norm_index)
    si = np.arange(scores.size) if score_index is None else np.asarray(score_index)
    if norms.shape != scores.shape or not np.array_equal(ni, si):
        raise ValueError("gradient norms and scores refer to different samples")
    table = [(int(i), float(a), float(b)) for i, a, b in zip(ni, norms, scores)]
    return spearman(norms, scores), table


@dataclass
class ReconOutcome:
    mse: dict[str, list[float]]
    x_hat: dict[str, list[np.ndarray]]
    x_true: list[np.ndarray]
    targets: list[int]


def recon_comparison(sc: Scenario, n_targets: int = 10, eta: float = 0.1, lam: float = 10.0,
                     retain_batch: int = 5, probe_m: int = 32, cob_sigma: float = 0.8,
                     cfg: ReconConfig | None = None, attacker_sigmas=(), adaptive_cfg=None,
                     seed: int = 0, methods=("filtered", "naive", "cob_filtered"),
                     match_defender: bool = True) -> ReconOutcome:
    """Reconstruction of single forgotten samples after one unlearning step.

    Each target is forgotten on its own with one NGP step (``retain_batch``
    retain samples, weight ``lam``).  ``filtered`` / ``naive`` attack the
    plain update; ``cob_filtered`` attacks the update followed by a
    change of basis with ``cob_sigma``; ``adaptive@s`` runs the symmetry
    aware attacker with prior ``s``.  With ``match_defender`` the defender
    draws its scales with the same ``s`` (``s = 0`` is plain NGP);
    otherwise every attacker faces the ``cob_sigma`` model.
    """
    cfg = cfg or ReconConfig(iters=200, step=0.1)
    adaptive_cfg = adaptive_cfg or ReconConfig(iters=100, step=0.1)
    rng = np.random.default_rng(derive_seed(seed, "recon-targets"))
    probe = blobs_for(sc.dataset, derive_seed(seed, "probe"), max(1, probe_m // sc.dataset.K),
                      "probe")
    sub_org = layer_subspaces(probe_grads(sc.spec, sc.theta_org, probe), sc.theta_org,
                              cfg.energy_frac)
    names = list(methods) + [f"adaptive@{s:g}" for s in attacker_sigmas]
    out: dict[str, list[float]] = {m: [] for m in names}
    xs: dict[str, list[np.ndarray]] = {m: [] for m in names}
    targets = [int(i) for i in rng.choice(len(sc.data), size=n_targets, replace=False)]
    truths = []

    def put(name, x):
        xs[name].append(x)
        out[name].append(float(np.mean((x - x_true) ** 2)))

    for i in targets:
        x_true, y_f = sc.data.X[i], int(sc.data.y[i])
        truths.append(x_true)
        forget = sc.data.subset([i], "forget")
        retain = sc.data.subset(np.setdiff1d(np.arange(len(sc.data)), [i]), "retain")
        ucfg = UnlearnConfig(eta=eta, lambda_retain=lam, alpha_ascent=1.0, steps=1,
                             forget_batch=1, retain_batch=retain_batch,
                             seed=derive_seed(seed, "recon-unlearn", i))

        def attack_filtered(theta_u):
            sub_u = layer_subspaces(probe_grads(sc.spec, theta_u, probe), theta_u,
                                    cfg.energy_frac)
            tgt = filter_target(theta_u - sc.theta_org, sub_org, sub_u, eta)
            try:
                return invert(sc.spec, sc.theta_org, tgt, y_f, cfg).x_hat
            except ValueError:   # filtered target vanished: nothing to invert
                return np.zeros_like(x_true)

        theta_plain, _ = unlearn_run(sc.spec, sc.theta_org, forget, retain, ucfg, None)
        if "filtered" in out:
            put("filtered", attack_filtered(theta_plain))
        if "naive" in out:
            tgt = (theta_plain - sc.theta_org).values / eta
            put("naive", invert(sc.spec, sc.theta_org, tgt, y_f, cfg).x_hat)
        def defended(sigma):
            w = WarpConfig(enabled=sigma > 0, symmetry_kind="change_of_basis", cob_sigma=sigma,
                           seed=derive_seed(seed, "recon-cob", i))
            return unlearn_run(sc.spec, sc.theta_org, forget, retain, ucfg, w)[0]

        theta_cob = None
        if "cob_filtered" in out or (attacker_sigmas and not match_defender):
            theta_cob = defended(cob_sigma)
        if "cob_filtered" in out:
            put("cob_filtered", attack_filtered(theta_cob))
        for s in attacker_sigmas:
            theta_def = defended(s) if match_defender else theta_cob
            acfg = replace(adaptive_cfg, init_seed=derive_seed(seed, "adaptive-init", i))
            r = adaptive_invert(sc.spec, sc.theta_org, theta_def, y_f, s, acfg, eta_att=eta)
            put(f"adaptive@{s:g}", r.x_hat)
    return ReconOutcome(out, xs, truths, targets)


def langevin_comparison(sc: Scenario, sigmas=(0.0, 0.01, 0.05), base: LangevinConfig | None = None
                        ) -> dict[float, float]:
    """Test accuracy after noisy clipped unlearning for each noise scale."""
    base = base or LangevinConfig(eta=0.01, clip_C=1.0, lambda_reg=0.1, steps=20, seed=sc.data.seed)
    return {float(s): accuracy(sc.spec, langevin_run(sc.spec, sc.theta_org, sc.forget, sc.retain,
                                                     replace(base, sigma=float(s))), sc.test)
            for s in sigmas}


# ---------------------------------------------------------------------------
# run manifest and the staged pipeline


@dataclass
class RunManifest:
    config_hash: str
    out_dir: str
    artifacts: dict[str, str] = field(default_factory=dict)   # relative path -> sha256
    timings: dict[str, float] = field(default_factory=dict)
    version: str = __version__
    failed_stage: str | None = None
    error: str | None = None
    metrics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path=None):
        p = Path(path) if path else Path(self.out_dir) / "manifest.json"
        p.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def load_manifest(path) -> RunManifest:
    return RunManifest(**json.loads(Path(path).read_text()))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Run:
    def __init__(self, cfg: ExperimentConfig, out: Path, workers: int):
        self.cfg, self.out, self.workers = cfg, out, workers
        self.man = RunManifest(cfg.config_hash(), str(out))
        self.state: dict = {}

    def record(self, rel: str):
        self.man.artifacts[rel] = _sha256(self.out / rel)

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def table(self, rel, header, rows):
        write_table(self.path(rel), header, rows)
        self.record(rel)

    def checkpoint(self, rel, spec, params, extra=None):
        save_checkpoint(self.path(rel), spec, params, extra)
        self.record(rel)

    # stages ---------------------------------------------------------------

    def stage_data(self):
        ds = self.cfg.dataset
        data = blobs_for(ds, ds.seed, ds.n_per_class, "train")
        retain, forget = split_forget(data, ds.forget_frac, ds.seed)
        test = blobs_for(ds, ds.test_seed, ds.n_test_per_class, "test")
        for name, s in (("train", data), ("retain", retain), ("forget", forget), ("test", test)):
            save_dataset(self.path(f"data/{name}.json"), s)
            self.record(f"data/{name}.json")
        self.state.update(data=data, retain=retain, forget=forget, test=test)

    def stage_train(self):
        st, spec = self.state, self.cfg.model.spec()
        theta = train_from_scratch(spec, st["data"], self.cfg.train)
        self.checkpoint("train/theta_org.json", spec, theta)
        rows = [("train_acc", accuracy(spec, theta, st["data"])),
                ("test_acc", accuracy(spec, theta, st["test"])),
                ("train_loss", loss(spec, theta, st["data"]))]
        self.table("train/metrics.tsv", ("metric", "value"), rows)
        self.man.metrics.update({f"train.{k}": v for k, v in rows})
        st.update(spec=spec, theta_org=theta)

    def stage_unlearn(self):
        st, ub = self.state, self.cfg.unlearn
        spec, theta = st["spec"], st["theta_org"]
        if ub.method == "ngp":
            theta_u, trace = unlearn_run(spec, theta, st["forget"], st["retain"], ub.ngp, self.cfg.warp)
            self.table("unlearn/trace.tsv", trace.HEADER, trace.rows())
            self.man.metrics["unlearn.n_teleports"] = trace.n_teleports
            self.man.metrics["unlearn.n_backtracks"] = trace.n_backtracks
        elif ub.method == "langevin":
            theta_u = langevin_run(spec, theta, st["forget"], st["retain"], ub.langevin)
        else:
            theta_u = retrain_oracle(spec, st["data"], st["forget"], self.cfg.train)
        self.checkpoint("unlearn/theta_u.json", spec, theta_u)
        rows = [("retain_acc", accuracy(spec, theta_u, st["retain"])),
                ("forget_acc", accuracy(spec, theta_u, st["forget"])),
                ("test_acc", accuracy(spec, theta_u, st["test"])),
                ("retain_loss", loss(spec, theta_u, st["retain"])),
                ("forget_loss", loss(spec, theta_u, st["forget"]))]
        self.table("unlearn/metrics.tsv", ("metric", "value"), rows)
        self.man.metrics.update({f"unlearn.{k}": v for k, v in rows})
        st["theta_u"] = theta_u

    def _report(self, prefix, rep: AttackReport):
        self.table(f"attack/{prefix}_scores.tsv", ("index", "score", "label"),
                   [(i, s, l) for i, (s, l) in enumerate(zip(rep.scores, rep.labels))])
        self.table(f"attack/{prefix}_roc.tsv", ("fpr", "tpr"), zip(rep.fpr, rep.tpr))
        summ = rep.summary()
        self.table(f"attack/{prefix}_summary.tsv", ("metric", "value"), sorted(summ.items()))
        self.man.metrics.update({f"{prefix}.{k}": v for k, v in summ.items()})

    def stage_attack(self):
        kind = self.cfg.attack.kind
        if kind == "none":
            return
        getattr(self, "attack_" + kind)()

    def attack_ulira(self):
        st, ac = self.state, self.cfg.attack
        if self.cfg.unlearn.method != "ngp":
            raise ValueError("U-LiRA shadows replay the NGP pipeline; set unlearn.method = ngp")
        spec = st["spec"]
        suite = ulira_shadow_suite(spec, st["retain"], st["forget"], ac.n_shadows, self.cfg.train,
                                   self.cfg.unlearn.ngp, self.cfg.warp, derive_seed(ac.seed, "shadows"),
                                   ac.pool_frac, ac.keep_shadow_checkpoints, workers=self.workers)
        for kind, s, th in suite.checkpoints:
            self.checkpoint(f"attack/shadows/{kind}_{s:03d}.json", spec, th)
        theta_r = retrain_oracle(spec, st["data"], st["forget"], self.cfg.train)
        self.checkpoint("attack/theta_retrained.json", spec, theta_r)
        rep = ulira_attack(suite, true_class_confidence(spec, st["theta_u"], st["forget"]),
                           true_class_confidence(spec, theta_r, st["forget"]),
                           use_logit=ac.use_logit)
        self._report("ulira", rep)
        norms = per_sample_grad_norms(spec, st["theta_org"], st["forget"])
        self.table("attack/forget_grad_norms.tsv", ("index", "grad_norm"), enumerate(norms))
        per_target = rep.meta["per_target_score"]
        self.table("attack/ulira_per_target.tsv", ("index", "score"), enumerate(per_target))
        rho, table = correlate_norm_vs_risk(norms, per_target)
        self.table("attack/norm_vs_risk.tsv", ("index", "grad_norm", "ulira_score"), table)
        self.man.metrics["ulira.spearman_norm_vs_score"] = rho

    def attack_ggd(self):
        st, ac, ds = self.state, self.cfg.attack, self.cfg.dataset
        cands, labels = ggd_candidates(st["forget"], st["test"])

        def sampler(t):
            return blobs_for(ds, derive_seed(ac.seed, "ggd-background", t), ac.ggd_m // ds.K,
                             "background")

        rep = run_ggd(st["spec"], st["theta_org"], st["theta_u"], cands, labels, sampler, ac.ggd_T,
                      ac.ggd_ridge, ac.ggd_frac, ac.ggd_n_coords, ac.pseudo_labels)
        self._report("ggd", rep)
        self.man.metrics["ggd.ridge"] = rep.meta["ridge"]

    def _recon_setup(self):
        st, ac, ds = self.state, self.cfg.attack, self.cfg.dataset
        sc = Scenario(st["spec"], st["data"], st["retain"], st["forget"], st["test"],
                      st["theta_org"], self.cfg.train, ds)
        ng = self.cfg.unlearn.ngp
        return sc, dict(n_targets=ac.n_targets, eta=ng.eta, lam=ng.lambda_retain,
                        retain_batch=ng.retain_batch, probe_m=ac.probe_m,
                        cob_sigma=self.cfg.warp.cob_sigma, cfg=ac.recon, seed=ac.seed)

    def attack_recon(self):
        sc, kw = self._recon_setup()
        res = recon_comparison(sc, **kw)
        self._recon_tables("recon", res)

    def attack_adaptive_recon(self):
        sc, kw = self._recon_setup()
        res = recon_comparison(sc, attacker_sigmas=self.cfg.attack.attacker_sigmas,
                               adaptive_cfg=self.cfg.attack.recon, methods=(),
                               match_defender=self.cfg.attack.match_defender, **kw)
        self._recon_tables("adaptive_recon", res)

    def _recon_tables(self, prefix, res: ReconOutcome):
        X = self.state["data"].X
        lo, hi = float(X.min()), float(X.max())
        d_shape = self.cfg.attack.recon.d_shape
        rows, xrows = [], []
        for m, xs in res.x_hat.items():
            for t, (x, xt) in enumerate(zip(xs, res.x_true)):
                q = recon_metrics(np.clip(x, lo, hi), xt, d_shape, lo, hi)
                rows.append((m, res.targets[t], res.mse[m][t], q.psnr, q.ssim))
                xrows.append((m, res.targets[t], *x))
                if d_shape is not None and len(d_shape) == 2:
                    img = np.clip((x - lo) / (hi - lo), 0, 1).reshape(d_shape)
                    rel = f"attack/{prefix}_images/{m}_{res.targets[t]:05d}.pgm"
                    write_pgm(self.path(rel), img)
                    self.record(rel)
        self.table(f"attack/{prefix}_mse.tsv",
                   ("method", "target", "mse", "psnr_clipped", "ssim_clipped"), rows)
        d = X.shape[1]
        self.table(f"attack/{prefix}_xhat.tsv",
                   ("method", "target") + tuple(f"x{j}" for j in range(d)), xrows)
        summ = [(m, float(np.mean(v)) if v else math.nan) for m, v in res.mse.items()]
        self.table(f"attack/{prefix}_summary.tsv", ("method", "mean_mse"), summ)
        self.man.metrics.update({f"{prefix}.{m}": v for m, v in summ})

    def stage_theory(self):
        tc = self.cfg.theory
        if tc is None:
            return
        gmm, cob = tc.gmm(), tc.cob()
        t = teleported_terms(gmm, cob, tc.n_mc, tc.seed)
        a = gmm.alpha
        rows = [(i, j, a[i, j], cob.s2[j], t.psi[i, j], t.delta_psi[i, j], t.psi_se[i, j])
                for i in range(gmm.K) for j in range(gmm.m)]
        self.table("theory/bounds.tsv",
                   ("component", "coord", "alpha", "s2", "psi", "delta_psi", "stderr"), rows)
        ratio, rse = bound_ratio_with_se(gmm, cob, tc.n_mc, tc.seed)
        spec_hash = hashlib.sha256(json.dumps(asdict(tc), sort_keys=True).encode()).hexdigest()
        summ = [("spec_hash", spec_hash), ("info_base", t.info_base), ("info_tele", t.info_tele),
                ("info_tele_stderr", t.stderr), ("improvement", t.improvement),
                ("ratio", ratio), ("ratio_stderr", rse)]
        if gmm.H_x is not None:
            summ += [("H_lb0", gmm.H_x - t.info_base), ("H_lb_tele", gmm.H_x - t.info_tele)]
        self.table("theory/summary.tsv", ("quantity", "value"), summ)
        self.man.metrics.update({f"theory.{k}": v for k, v in summ if k != "spec_hash"})


def run_scenario(cfg: ExperimentConfig, out_dir, workers: int = 1,
                 stages=STAGES) -> RunManifest:
    """Execute ``stages`` in order; a failure is recorded and later stages are skipped."""
    cfg = materialize(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    run = _Run(cfg, out, workers)
    needs = {"train": "data", "unlearn": "train", "attack": "unlearn"}
    wanted = [s for s in STAGES if s in stages]
    # a later stage pulls in its prerequisites
    for s in list(wanted):
        p = needs.get(s)
        while p is not None:
            if p not in wanted:
                wanted.append(p)
            p = needs.get(p)
    for s in STAGES:
        if s not in wanted:
            continue
        t0 = time.perf_counter()
        try:
            getattr(run, "stage_" + s)()
        except Exception as exc:  # noqa: BLE001 - the manifest carries the failure
            run.man.failed_stage = s
            run.man.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            run.man.timings[s] = time.perf_counter() - t0
            break
        run.man.timings[s] = time.perf_counter() - t0
    run.man.save()
    return run.man


SUMMARY_KEYS = ("ulira.auc", "ggd.auc", "unlearn.test_acc", "recon.filtered")


def sweep(template: ExperimentConfig, axis: str, values, out_dir, workers: int = 1,
          stages=STAGES) -> tuple[list[RunManifest], list[tuple]]:
    """One run per value of the dotted field ``axis``; failures do not stop the sweep."""
    out = Path(out_dir)
    manifests, rows = [], []
    for k, v in enumerate(values):
        cfg = set_field(template, axis, v)
        cfg = replace(cfg, name=f"{template.name}-{k:03d}")
        man = run_scenario(cfg, out / f"run_{k:03d}", workers, stages)
        manifests.append(man)
        rows.append((json.dumps(v), man.config_hash[:16], "ok" if man.ok else f"failed:{man.failed_stage}",
                     *(man.metrics.get(key, math.nan) for key in SUMMARY_KEYS)))
    if values:
        write_table(out / "sweep_summary.tsv", ("value", "config_hash", "status") + SUMMARY_KEYS,
                    rows)
    return manifests, rows


def report(root) -> list[tuple]:
    """Collect every ``manifest.json`` under ``root`` into ``report.tsv``."""
    root = Path(root)
    rows = []
    for p in sorted(root.rglob("manifest.json")):
        m = load_manifest(p)
        rows.append((str(p.parent.relative_to(root)) or ".", m.config_hash[:16],
                     "ok" if m.ok else f"failed:{m.failed_stage}",
                     *(m.metrics.get(k, math.nan) for k in SUMMARY_KEYS)))
    write_table(root / "report.tsv", ("run", "config_hash", "status") + SUMMARY_KEYS, rows)
    return rows
