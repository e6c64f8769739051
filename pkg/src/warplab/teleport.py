"""Loss-invariant parameter moves ("teleportation").

Two symmetry families are supported:

* retain null-space moves: weight updates whose rows are orthogonal to the
  span of the retain-set layer inputs leave those pre-activations (almost)
  unchanged, so the retain loss barely moves while the forget-sample
  gradients can be shrunk;
* change of basis: positive per-neuron rescaling of a relu network, which is
  an exact function-preserving reparameterization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .nn import LabeledSet, NetworkSpec, ParamVector, _check_inputs, _forward_full, per_sample_grads, rop

SYMMETRY_KINDS = ("null_space", "change_of_basis")
BIAS_MODES = ("augmented", "frozen", "free")


@dataclass(frozen=True)
class WarpConfig:
    enabled: bool = False
    interval: int | None = 1          # S; teleport when t % S == 0
    grad_trigger: float | None = None  # tau_grad on the forget gradient norm
    eta_tel: float = 0.01
    beta: float = 0.0
    sigma2: float = 0.0
    epsilon_retain: float = 0.0
    var_target: float = 0.99
    k_max: int | None = None
    symmetry_kind: str = "null_space"
    cob_sigma: float = 0.8
    cob_bounds: tuple[float, float] = (0.05, 3.0)
    tel_steps: int = 1                 # inner teleport iterations per trigger
    raw_noise: bool = False            # add unprojected noise to the weights
    safeguard_ref: str = "half_step"   # or "previous": compare with theta_t
    bias_mode: str = "augmented"       # augmented | frozen | free
    max_step_norm: float | None = None  # optional trust region on each teleport move
    use_fastwarp: bool = False
    t_track: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.interval is None and self.grad_trigger is None:
            raise ValueError("need an interval S, a grad-norm trigger, or both")
        if self.interval is not None and self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.grad_trigger is not None and self.grad_trigger <= 0:
            raise ValueError("grad_trigger must be > 0")
        if not 0.0 < self.var_target <= 1.0:
            raise ValueError("var_target must lie in (0, 1]")
        if self.eta_tel < 0 or self.beta < 0 or self.sigma2 < 0 or self.epsilon_retain < 0:
            raise ValueError("eta_tel, beta, sigma2, epsilon_retain must be >= 0")
        if self.symmetry_kind not in SYMMETRY_KINDS:
            raise ValueError(f"symmetry_kind must be one of {SYMMETRY_KINDS}")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}")
        if self.safeguard_ref not in ("half_step", "previous"):
            raise ValueError("safeguard_ref must be 'half_step' or 'previous'")

    def fires(self, t: int, forget_grad_norm: float) -> bool:
        by_interval = self.interval is not None and t % self.interval == 0
        by_norm = self.grad_trigger is not None and forget_grad_norm > self.grad_trigger
        return by_interval or by_norm


# ---------------------------------------------------------------------------
# retain bases


@dataclass
class RetainBasis:
    """Per-layer orthonormal bases of retain-input space.

    With ``augmented`` set, each layer input is extended by a constant 1 so
    the basis lives in ``fan_in + 1`` dimensions and projects the weight
    matrix and bias column jointly.
    """

    bases: list[np.ndarray]            # per layer, fan_in (+1) x k
    captured: list[float]              # fraction of retain energy in span(B)
    rank_deficient: list[bool] = field(default_factory=list)
    augmented: bool = False

    @property
    def ks(self) -> list[int]:
        return [B.shape[1] for B in self.bases]

    def projector(self, layer: int) -> np.ndarray:
        B = self.bases[layer]
        return np.eye(B.shape[0]) - B @ B.T

    def to_dict(self) -> dict:
        return {
            "augmented": self.augmented,
            "layers": [
                {
                    "fan_in": int(B.shape[0]),
                    "k": int(B.shape[1]),
                    "captured": float(c),
                    "values": [float(v) for v in B.ravel(order="F")],
                }
                for B, c in zip(self.bases, self.captured)
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RetainBasis":
        bases, captured = [], []
        for layer in doc["layers"]:
            B = np.array(layer["values"], dtype=np.float64).reshape(
                layer["fan_in"], layer["k"], order="F")
            bases.append(B)
            captured.append(layer["captured"])
        return cls(bases, captured, [False] * len(bases), bool(doc.get("augmented", False)))


def _choose_k(energy: np.ndarray, var_target: float, k_max: int | None) -> int:
    """Smallest k whose leading energies reach var_target (energy sorted desc)."""
    total = energy.sum()
    if total <= 0:
        return 0
    frac = np.cumsum(energy) / total
    k = int(np.searchsorted(frac, var_target - 1e-12) + 1)
    k = min(k, energy.size)
    if k_max is not None:
        k = min(k, int(k_max))
    return k


def layer_inputs(spec: NetworkSpec, params: ParamVector, X, augment: bool = False) -> list[np.ndarray]:
    X = _check_inputs(spec, params, X)
    hs, _ = _forward_full(spec, params, X)
    if augment:
        hs = [np.hstack([h, np.ones((h.shape[0], 1))]) for h in hs]
    return hs


def build_retain_basis(spec: NetworkSpec, params: ParamVector, retain_batch: LabeledSet,
                       var_target: float, k_max: int | None = None,
                       augment: bool = False) -> RetainBasis:
    """Per-layer orthonormal basis of the retain inputs via a thin SVD."""
    if not 0.0 < var_target <= 1.0:
        raise ValueError("var_target must lie in (0, 1]")
    bases, captured, flags = [], [], []
    for R in layer_inputs(spec, params, retain_batch.X, augment):
        # right singular vectors of R = left singular vectors of R.T (fan-in space)
        _, s, Vt = np.linalg.svd(R, full_matrices=False)
        tol = s.max(initial=0.0) * max(R.shape) * np.finfo(float).eps
        rank = int(np.sum(s > tol))
        energy = s[:rank] ** 2
        k = _choose_k(energy, var_target, k_max)
        bases.append(Vt[:k].T.copy())
        captured.append(float(energy[:k].sum() / energy.sum()) if rank else 1.0)
        flags.append(var_target >= 1.0 and rank < min(R.shape))
    return RetainBasis(bases, captured, flags, augment)


def project_null(grad_layer: np.ndarray, basis: RetainBasis, layer: int) -> np.ndarray:
    """Right-apply ``I - B B^T`` on the fan-in dimension."""
    B = basis.bases[layer]
    G = np.asarray(grad_layer, dtype=np.float64)
    if G.shape[-1] != B.shape[0]:
        raise ValueError(f"gradient fan-in {G.shape[-1]} != basis dim {B.shape[0]}")
    if B.shape[1] == 0:
        return G.copy()
    return G - (G @ B) @ B.T


def fastwarp_update(spec: NetworkSpec, params: ParamVector, retain_batch: LabeledSet,
                    prev: RetainBasis | None, var_target: float, k_max: int | None = None,
                    t_track: int = 2, augment: bool = False) -> RetainBasis:
    """Covariance-based basis maintenance.

    Cold start (``prev is None``) eigendecomposes ``C = X X^T`` per layer
    and keeps the leading directions reaching ``var_target``.  Warm start
    refines ``prev`` with ``t_track`` rounds of subspace iteration
    ``B <- qr(C B)``, keeping the previous ranks.
    """
    if prev is not None:
        augment = prev.augmented
    bases, captured = [], []
    for l, R in enumerate(layer_inputs(spec, params, retain_batch.X, augment)):
        X = R.T
        C = X @ X.T
        C = 0.5 * (C + C.T)
        total = np.trace(C)
        if prev is None:
            w, V = np.linalg.eigh(C)
            order = np.argsort(w)[::-1]
            w = np.clip(w[order], 0.0, None)
            V = V[:, order]
            k = _choose_k(w, var_target, k_max)
            k = min(k, X.shape[0])
            B = V[:, :k]
        else:
            B0 = prev.bases[l]
            if B0.shape[0] != X.shape[0]:
                raise ValueError(f"layer {l}: warm-start basis has fan-in {B0.shape[0]}")
            k = min(B0.shape[1], X.shape[0])
            B = np.linalg.qr(B0[:, :k])[0] if k else B0[:, :0]
            for _ in range(t_track):
                if k == 0:
                    break
                B = np.linalg.qr(C @ B)[0][:, :k]
        bases.append(np.ascontiguousarray(B))
        captured.append(float(np.trace(B.T @ C @ B) / total) if total > 0 else 1.0)
    return RetainBasis(bases, captured, [False] * len(bases), augment)


def principal_cosines(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Cosines of the principal angles between two orthonormal bases, descending."""
    return np.clip(np.linalg.svd(A.T @ B, compute_uv=False), 0.0, 1.0)


# ---------------------------------------------------------------------------
# teleportation loss


def forget_grad_energy(spec, params, forget_batch: LabeledSet) -> float:
    """Sum over the batch of squared per-sample gradient norms."""
    G = per_sample_grads(spec, params, forget_batch.X, forget_batch.y)
    return float(np.sum(G * G))


def teleport_loss(spec, params, theta_org, forget_batch, beta) -> float:
    disp = params.values - theta_org.values
    return forget_grad_energy(spec, params, forget_batch) - beta * float(disp @ disp)


def teleport_loss_grad(spec: NetworkSpec, params: ParamVector, theta_org: ParamVector,
                       forget_batch: LabeledSet, beta: float) -> ParamVector:
    """Exact gradient of ``sum_i ||g_i||^2 - beta ||theta - theta_org||^2``.

    The first term is ``2 sum_i H_i g_i``, one R-operator pass with the
    per-sample gradients as per-sample directions.
    """
    if not params.compatible(theta_org):
        raise ValueError("theta_org has a different manifest")
    G = per_sample_grads(spec, params, forget_batch.X, forget_batch.y)
    hv, _ = rop(spec, params, forget_batch.X, forget_batch.y, G)
    return ParamVector(2.0 * hv - 2.0 * beta * (params.values - theta_org.values), params.manifest)


def teleport_loss_grad_fd(spec, params, theta_org, forget_batch, beta, h=1e-6) -> ParamVector:
    """Central-difference fallback for cross-checks (slow: 2P loss evaluations)."""
    out = np.empty(len(params))
    for i in range(len(params)):
        e = params.copy()
        e.values[i] += h
        fp = teleport_loss(spec, e, theta_org, forget_batch, beta)
        e.values[i] -= 2 * h
        fm = teleport_loss(spec, e, theta_org, forget_batch, beta)
        out[i] = (fp - fm) / (2 * h)
    return ParamVector(out, params.manifest)


def teleport_step(spec: NetworkSpec, params: ParamVector, theta_org: ParamVector,
                  forget_batch: LabeledSet, basis: RetainBasis, wcfg: WarpConfig,
                  rng: np.random.Generator | None = None) -> ParamVector:
    """One projected descent step on the teleportation loss, plus optional noise.

    Weight gradients and weight noise go through the layer's null-space
    projector (noise unprojected when ``wcfg.raw_noise``).  Biases follow
    ``wcfg.bias_mode``: projected jointly with the weights on the augmented
    basis, frozen, or moved by the raw gradient.
    """
    out = params.copy()
    if wcfg.eta_tel == 0 and wcfg.sigma2 == 0:
        return out
    if basis.augmented != (wcfg.bias_mode == "augmented"):
        raise ValueError("basis augmentation does not match wcfg.bias_mode")
    g = teleport_loss_grad(spec, params, theta_org, forget_batch, wcfg.beta)
    noise_std = math.sqrt(2.0 * wcfg.eta_tel * wcfg.sigma2)
    if noise_std > 0 and rng is None:
        raise ValueError("noise requested but no rng supplied")
    moves = []
    for l, (gW, gb) in enumerate(g.layers()):
        if wcfg.bias_mode == "augmented":
            P = project_null(np.hstack([gW, gb[:, None]]), basis, l)
            dW, db = P[:, :-1], P[:, -1]
        else:
            dW = project_null(gW, basis, l)
            db = np.zeros_like(gb) if wcfg.bias_mode == "frozen" else gb
        moves.append((-wcfg.eta_tel * dW, -wcfg.eta_tel * db))
    if wcfg.max_step_norm is not None:
        norm = math.sqrt(sum(float(np.sum(a * a) + np.sum(c * c)) for a, c in moves))
        if norm > wcfg.max_step_norm:
            moves = [(a * (wcfg.max_step_norm / norm), c * (wcfg.max_step_norm / norm))
                     for a, c in moves]
    for l, ((W, b), (dW, db)) in enumerate(zip(out.layers(), moves)):
        W += dW
        b += db
        if noise_std > 0:
            if wcfg.bias_mode == "augmented":
                eps = rng.standard_normal((W.shape[0], W.shape[1] + 1))
                if not wcfg.raw_noise:
                    eps = project_null(eps, basis, l)
                W += noise_std * eps[:, :-1]
                b += noise_std * eps[:, -1]
            else:
                eps = rng.standard_normal(W.shape)
                W += noise_std * (eps if wcfg.raw_noise else project_null(eps, basis, l))
    return out


# ---------------------------------------------------------------------------
# change of basis


@dataclass(frozen=True)
class COBScales:
    tau: tuple[np.ndarray, ...]        # one positive vector per hidden layer
    tau_min: float = 0.05
    tau_max: float = 3.0

    def __post_init__(self):
        tau = tuple(np.asarray(t, dtype=np.float64) for t in self.tau)
        object.__setattr__(self, "tau", tau)
        for t in tau:
            if np.any(t <= 0):
                raise ValueError("change-of-basis scales must be strictly positive")

    @classmethod
    def ones(cls, spec: NetworkSpec) -> "COBScales":
        return cls(tuple(np.ones(w) for w in spec.hidden_widths))

    def __mul__(self, other: "COBScales") -> "COBScales":
        return COBScales(tuple(a * b for a, b in zip(self.tau, other.tau)),
                         min(self.tau_min, other.tau_min), max(self.tau_max, other.tau_max))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.tau) if self.tau else np.zeros(0)


def cob_sample(spec: NetworkSpec, sigma_cob: float, tau_min: float = 0.05, tau_max: float = 3.0,
               seed: int = 0) -> COBScales:
    """i.i.d. ``N(1, sigma_cob^2)`` scales clipped into ``[tau_min, tau_max]``."""
    if not 0 < tau_min <= 1 <= tau_max:
        raise ValueError("need 0 < tau_min <= 1 <= tau_max")
    if sigma_cob < 0:
        raise ValueError("sigma_cob must be >= 0")
    rng = np.random.default_rng(seed)
    tau = tuple(
        np.clip(1.0 + sigma_cob * rng.standard_normal(w), tau_min, tau_max)
        for w in spec.hidden_widths
    )
    return COBScales(tau, tau_min, tau_max)


def _layer_scales(spec: NetworkSpec, tau: COBScales):
    """(tau_in, tau_out) per weight layer; ones at the network boundary."""
    if len(tau.tau) != len(spec.hidden_widths) or any(
            t.size != w for t, w in zip(tau.tau, spec.hidden_widths)):
        raise ValueError("COB scales do not match the hidden widths")
    full = [np.ones(spec.input_dim), *tau.tau, np.ones(spec.n_classes)]
    return [(full[l], full[l + 1]) for l in range(spec.n_layers)]


def cob_apply(spec: NetworkSpec, params: ParamVector, tau: COBScales) -> ParamVector:
    """``W' = D(tau_out) W D(1/tau_in)``, ``b' = D(tau_out) b``."""
    out = params.copy()
    for (W, b), (t_in, t_out) in zip(out.layers(), _layer_scales(spec, tau)):
        W *= t_out[:, None] / t_in[None, :]
        if b is not None:
            b *= t_out
    return out
