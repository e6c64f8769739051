"""Fully-connected network engine with exact first and second order passes.

Parameters live in a single flat float64 vector (``ParamVector``) whose
layout is described by a manifest of ``(layer, rows, cols, has_bias)``
entries.  Layer ``l`` computes ``z = h @ W.T + b`` with ``W`` of shape
``(rows, cols) = (fan_out, fan_in)``; hidden layers apply the configured
activation and the last layer feeds a softmax cross-entropy head.

Besides plain gradients the module exposes an R-operator pass
(``rop``) that returns Hessian-vector products with respect to the
parameters and the mixed input/parameter derivative.  Both are needed by
the teleportation loss and by gradient-inversion attacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")
ROLES = ("retain", "forget", "test", "probe", "background", "train")


class ShapeError(ValueError):
    """Raised when arrays do not match the network layout."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class NetworkSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output size")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.layer_dims[1:-1]

    def manifest(self) -> tuple[tuple[int, int, int, bool], ...]:
        return tuple(
            (l, self.layer_dims[l + 1], self.layer_dims[l], True) for l in range(self.n_layers)
        )

    @property
    def n_params(self) -> int:
        return manifest_size(self.manifest())


def manifest_size(manifest) -> int:
    return sum(r * c + (r if b else 0) for _, r, c, b in manifest)


@dataclass
class ParamVector:
    """Flat parameter (or gradient) vector plus its layer layout."""

    values: np.ndarray
    manifest: tuple[tuple[int, int, int, bool], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.manifest = tuple(tuple(m) for m in self.manifest)
        if self.values.ndim != 1 or self.values.size != manifest_size(self.manifest):
            raise ShapeError(
                f"values has {self.values.size} entries, manifest needs "
                f"{manifest_size(self.manifest)}"
            )

    def __len__(self) -> int:
        return self.values.size

    def compatible(self, other: "ParamVector") -> bool:
        return self.manifest == other.manifest

    def _check(self, other: "ParamVector"):
        if not self.compatible(other):
            raise ShapeError("incompatible parameter manifests")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.manifest)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.manifest)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.manifest)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.manifest)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.manifest)

    def slices(self) -> list[tuple[slice, slice | None]]:
        """(weight slice, bias slice) per layer in manifest order."""
        out = []
        pos = 0
        for _, rows, cols, has_bias in self.manifest:
            w = slice(pos, pos + rows * cols)
            pos += rows * cols
            b = None
            if has_bias:
                b = slice(pos, pos + rows)
                pos += rows
            out.append((w, b))
        return out

    def layer_blocks(self) -> list[slice]:
        """One contiguous slice per layer covering weights and bias."""
        return [slice(w.start, (b or w).stop) for w, b in self.slices()]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """Views ``(W, b)`` into ``values``; writes go through."""
        out = []
        for (w, b), (_, rows, cols, _) in zip(self.slices(), self.manifest):
            W = self.values[w].reshape(rows, cols)
            out.append((W, None if b is None else self.values[b]))
        return out

    @classmethod
    def from_layers(cls, layers, manifest) -> "ParamVector":
        parts = []
        for W, b in layers:
            parts.append(np.asarray(W, dtype=np.float64).ravel())
            if b is not None:
                parts.append(np.asarray(b, dtype=np.float64).ravel())
        return cls(np.concatenate(parts), manifest)

    @classmethod
    def zeros(cls, manifest) -> "ParamVector":
        return cls(np.zeros(manifest_size(manifest)), manifest)


@dataclass
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    role: str = "train"
    seed: int = 0
    n_classes: int | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.X.shape[0] != self.y.size:
            raise ShapeError(f"{self.X.shape[0]} rows but {self.y.size} labels")
        if self.y.size < 1:
            raise ValueError("a LabeledSet needs at least one row")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X contains non-finite entries")
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.y.size

    def subset(self, idx, role: str | None = None) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.X[idx], self.y[idx], role or self.role, self.seed, self.n_classes)

    def with_role(self, role: str) -> "LabeledSet":
        return LabeledSet(self.X, self.y, role, self.seed, self.n_classes)

    def rows(self) -> Iterator[tuple[np.ndarray, int]]:
        for i in range(len(self)):
            yield self.X[i], int(self.y[i])


def concat_sets(sets: Sequence[LabeledSet], role: str = "train") -> LabeledSet:
    sets = list(sets)
    return LabeledSet(
        np.vstack([s.X for s in sets]),
        np.concatenate([s.y for s in sets]),
        role,
        sets[0].seed,
        max(s.n_classes for s in sets),
    )


# LayerInputs: h_l per weight layer, each (batch, fan_in)
LayerInputs = list


# ---------------------------------------------------------------------------
# initialisation and forward pass


def init_params(spec: NetworkSpec) -> ParamVector:
    rng = np.random.default_rng(spec.seed)
    layers = []
    for _, rows, cols, _ in spec.manifest():
        bound = 1.0 / np.sqrt(cols)
        layers.append((rng.uniform(-bound, bound, size=(rows, cols)), np.zeros(rows)))
    return ParamVector.from_layers(layers, spec.manifest())


def _act(spec_or_name, z):
    name = getattr(spec_or_name, "activation", spec_or_name)
    return np.maximum(z, 0.0) if name == "relu" else z


def _act_deriv(name, z):
    return (z > 0).astype(np.float64) if name == "relu" else np.ones_like(z)


def _check_inputs(spec: NetworkSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    if params.manifest != spec.manifest():
        raise ShapeError(
            f"parameter manifest {params.manifest} does not match network {spec.layer_dims}"
        )
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != spec.input_dim:
        raise ShapeError(f"X has {X.shape[1]} columns, network expects {spec.input_dim}")
    return X


def _forward_full(spec, params, X):
    hs, zs = [], []
    h = X
    layers = params.layers()
    for l, (W, b) in enumerate(layers):
        hs.append(h)
        z = h @ W.T + b
        zs.append(z)
        if l < len(layers) - 1:
            h = _act(spec.activation, z)
    return hs, zs


def forward(spec: NetworkSpec, params: ParamVector, X) -> tuple[np.ndarray, LayerInputs]:
    """Return logits and the inputs feeding each weight layer."""
    X = _check_inputs(spec, params, X)
    hs, zs = _forward_full(spec, params, X)
    return zs[-1], hs


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ce_per_sample(logits, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    return -log_softmax(np.atleast_2d(logits))[np.arange(y.size), y]


def ce_loss(logits, y) -> float:
    """Mean softmax cross-entropy."""
    return float(ce_per_sample(logits, y).mean())


def loss(spec: NetworkSpec, params: ParamVector, data: LabeledSet) -> float:
    logits, _ = forward(spec, params, data.X)
    return ce_loss(logits, data.y)


def predict_proba(spec, params, X) -> np.ndarray:
    logits, _ = forward(spec, params, X)
    return softmax(logits)


def accuracy(spec, params, data: LabeledSet) -> float:
    logits, _ = forward(spec, params, data.X)
    return float(np.mean(logits.argmax(axis=1) == data.y))


def true_class_confidence(spec, params, data: LabeledSet) -> np.ndarray:
    p = predict_proba(spec, params, data.X)
    return p[np.arange(len(data)), data.y]


# ---------------------------------------------------------------------------
# gradients


def _onehot(y, k):
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def _backward(spec, params, hs, zs, dlogits):
    """Backprop ``dlogits`` (already scaled) -> per-layer (dW, db), dX."""
    layers = params.layers()
    grads = [None] * len(layers)
    dz = dlogits
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        grads[l] = (dz.T @ hs[l], dz.sum(axis=0))
        dh = dz @ W
        if l > 0:
            dz = dh * _act_deriv(spec.activation, zs[l - 1])
    return grads, dh


def grad(spec: NetworkSpec, params: ParamVector, batch: LabeledSet) -> ParamVector:
    """Gradient of the mean cross-entropy over ``batch``."""
    X = _check_inputs(spec, params, batch.X)
    hs, zs = _forward_full(spec, params, X)
    n = X.shape[0]
    dlogits = (softmax(zs[-1]) - _onehot(batch.y, spec.n_classes)) / n
    grads, _ = _backward(spec, params, hs, zs, dlogits)
    return ParamVector.from_layers(grads, params.manifest)


def loss_and_grad(spec, params, batch) -> tuple[float, ParamVector]:
    X = _check_inputs(spec, params, batch.X)
    hs, zs = _forward_full(spec, params, X)
    n = X.shape[0]
    dlogits = (softmax(zs[-1]) - _onehot(batch.y, spec.n_classes)) / n
    grads, _ = _backward(spec, params, hs, zs, dlogits)
    return ce_loss(zs[-1], batch.y), ParamVector.from_layers(grads, params.manifest)


def input_grad(spec, params, X, y) -> np.ndarray:
    """Per-sample gradient of the cross-entropy with respect to the inputs."""
    X = _check_inputs(spec, params, X)
    y = np.asarray(y, dtype=np.int64).ravel()
    hs, zs = _forward_full(spec, params, X)
    dlogits = softmax(zs[-1]) - _onehot(y, spec.n_classes)
    _, dX = _backward(spec, params, hs, zs, dlogits)
    return dX


def per_sample_grads(spec: NetworkSpec, params: ParamVector, X, y) -> np.ndarray:
    """Matrix of per-sample gradients, one row per sample, ParamVector layout."""
    X = _check_inputs(spec, params, X)
    y = np.asarray(y, dtype=np.int64).ravel()
    hs, zs = _forward_full(spec, params, X)
    n = X.shape[0]
    layers = params.layers()
    blocks = [None] * len(layers)
    dz = softmax(zs[-1]) - _onehot(y, spec.n_classes)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        dW = np.einsum("no,ni->noi", dz, hs[l]).reshape(n, -1)
        blocks[l] = np.hstack([dW, dz])
        if l > 0:
            dz = (dz @ W) * _act_deriv(spec.activation, zs[l - 1])
    return np.hstack(blocks)


def per_sample_grad_norms(spec: NetworkSpec, params: ParamVector, data: LabeledSet) -> np.ndarray:
    G = per_sample_grads(spec, params, data.X, data.y)
    return np.linalg.norm(G, axis=1)


# ---------------------------------------------------------------------------
# second order: Pearlmutter R-operator


def _split_direction(params: ParamVector, V: np.ndarray, n: int):
    """Reshape direction(s) into per-layer (n, rows, cols) and (n, rows)."""
    V = np.asarray(V, dtype=np.float64)
    shared = V.ndim == 1
    V = np.broadcast_to(V, (n, V.shape[-1])) if shared else V
    out = []
    for (w, b), (_, rows, cols, _) in zip(params.slices(), params.manifest):
        out.append((V[:, w].reshape(n, rows, cols), V[:, b]))
    return out


def rop(spec: NetworkSpec, params: ParamVector, X, y, V) -> tuple[np.ndarray, np.ndarray]:
    """Directional second derivatives of the *summed* per-sample losses.

    ``V`` is either one parameter-space direction (shape ``(P,)``) shared by
    all samples, or one direction per sample (shape ``(n, P)``).  Returns

    * ``hv``: ``sum_i H_i v_i`` where ``H_i`` is the parameter Hessian of
      sample i's loss, as a flat ``(P,)`` array;
    * ``dx``: ``(n, d)`` array whose row i is ``grad_x (v_i . grad_theta l_i)``.

    ReLU second derivatives are taken as zero.
    """
    X = _check_inputs(spec, params, X)
    y = np.asarray(y, dtype=np.int64).ravel()
    n = X.shape[0]
    act = spec.activation
    layers = params.layers()
    dirs = _split_direction(params, V, n)

    hs, zs, Rhs, Rzs = [], [], [], []
    h = X
    Rh = np.zeros_like(X)
    for l, ((W, b), (VW, Vb)) in enumerate(zip(layers, dirs)):
        hs.append(h)
        Rhs.append(Rh)
        z = h @ W.T + b
        Rz = Rh @ W.T + np.einsum("ni,noi->no", h, VW) + Vb
        zs.append(z)
        Rzs.append(Rz)
        if l < len(layers) - 1:
            d = _act_deriv(act, z)
            h = _act(act, z)
            Rh = d * Rz

    p = softmax(zs[-1])
    dz = p - _onehot(y, spec.n_classes)
    Rdz = p * (Rzs[-1] - np.sum(p * Rzs[-1], axis=1, keepdims=True))
    hv = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        VW, _ = dirs[l]
        hv[l] = (Rdz.T @ hs[l] + dz.T @ Rhs[l], Rdz.sum(axis=0))
        Rdh = Rdz @ W + np.einsum("no,noi->ni", dz, VW)
        dh = dz @ W
        if l > 0:
            d = _act_deriv(act, zs[l - 1])
            dz = dh * d
            Rdz = Rdh * d
    return ParamVector.from_layers(hv, params.manifest).values, Rdh


def hvp(spec, params, batch: LabeledSet, v: ParamVector) -> ParamVector:
    """Hessian-vector product of the mean cross-entropy over ``batch``."""
    hv, _ = rop(spec, params, batch.X, batch.y, v.values)
    return ParamVector(hv / len(batch), params.manifest)


# ---------------------------------------------------------------------------
# data


def gen_blobs(seed: int, n_per_class: int, d: int, K: int, spread: float,
              scale: float = 1.0, role: str = "train") -> LabeledSet:
    """Gaussian clusters centred on scaled simplex vertices.

    For ``d >= K`` the class means are ``scale * e_k``; otherwise they are
    spread evenly on a circle (or a line when ``d == 1``).
    """
    if n_per_class < 1 or d < 1 or K < 2:
        raise ValueError("need n_per_class >= 1, d >= 1, K >= 2")
    rng = np.random.default_rng(seed)
    means = np.zeros((K, d))
    if d >= K:
        means[np.arange(K), np.arange(K)] = scale
    elif d >= 2:
        ang = 2 * np.pi * np.arange(K) / K
        means[:, 0] = scale * np.cos(ang)
        means[:, 1] = scale * np.sin(ang)
    else:
        means[:, 0] = scale * np.linspace(-1.0, 1.0, K)
    y = np.repeat(np.arange(K), n_per_class)
    X = means[y] + spread * rng.standard_normal((y.size, d))
    perm = rng.permutation(y.size)
    return LabeledSet(X[perm], y[perm], role, seed, K)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_forget(data: LabeledSet, forget_frac: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Per-class stratified split into (retain, forget)."""
    retain_idx, forget_idx = split_forget_indices(data, forget_frac, seed)
    return data.subset(retain_idx, "retain"), data.subset(forget_idx, "forget")


def split_forget_indices(data: LabeledSet, forget_frac: float, seed: int):
    if not 0.0 < forget_frac < 1.0:
        raise ValueError("forget_frac must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    forget = []
    for c in range(data.n_classes):
        members = np.flatnonzero(data.y == c)
        if members.size == 0:
            continue
        k = max(1, _round_half_up(forget_frac * members.size))
        if k >= members.size:
            raise ValueError(f"class {c} has {members.size} samples, cannot donate {k}")
        forget.extend(rng.choice(members, size=k, replace=False).tolist())
    forget = np.sort(np.asarray(forget, dtype=np.int64))
    retain = np.setdiff1d(np.arange(len(data)), forget)
    return retain, forget


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0


def train(spec: NetworkSpec, params: ParamVector, data: LabeledSet, epochs: int, lr: float,
          batch_size: int, seed: int) -> ParamVector:
    """Mini-batch gradient descent with a seeded shuffle schedule."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    X = _check_inputs(spec, params, data.X)
    y = data.y
    theta = params.copy()
    if lr == 0 or epochs <= 0:
        return theta
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    bs = max(1, min(batch_size, n))
    onehot = _onehot(y, spec.n_classes)
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            hs, zs = _forward_full(spec, theta, X[idx])
            logits = zs[-1]
            if not np.all(np.isfinite(logits)):
                raise TrainingDiverged(step, float("nan"))
            dlogits = (softmax(logits) - onehot[idx]) / idx.size
            grads, _ = _backward(spec, theta, hs, zs, dlogits)
            for (W, b), (dW, db) in zip(theta.layers(), grads):
                W -= lr * dW
                b -= lr * db
            step += 1
    final = loss(spec, theta, data)
    if not np.isfinite(final):
        raise TrainingDiverged(step, final)
    return theta


def train_from_scratch(spec: NetworkSpec, data: LabeledSet, cfg: TrainConfig) -> ParamVector:
    return train(spec, init_params(spec), data, cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed)
