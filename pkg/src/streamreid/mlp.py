"""Small trainable feature extractor with hand-coded reverse-mode gradients.

A fixed-architecture MLP over descriptors: tanh hidden layers, linear
output, double precision throughout. Forward passes cache the activations
needed by backward; parameter updates bump a version counter so a stale
cache cannot silently feed backward. Includes a linear classifier head,
an Adam optimizer with a linear learning-rate schedule and decoupled
weight decay, and a named-tensor checkpoint format.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

ParamDict = dict[str, np.ndarray]
GradientSet = dict[str, np.ndarray]


class StaleCacheError(RuntimeError):
    """Backward was handed a cache from before a parameter update."""


def _init_linear(rng, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return w, np.zeros(fan_out)


@dataclass
class ForwardCache:
    activations: list[np.ndarray]   # [input, hidden post-tanh ..., output]
    version: int


class MLP:
    """Feature extractor: layer_dims = [d_in, hidden..., feature_dim]."""

    def __init__(self, layer_dims: list[int], seed: int = 0):
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dimensions")
        self.layer_dims = list(layer_dims)
        self.version = 0
        rng = np.random.default_rng(seed)
        self.params: ParamDict = {}
        for i, (a, b) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            w, bias = _init_linear(rng, a, b)
            self.params[f"layer{i}.W"] = w
            self.params[f"layer{i}.b"] = bias

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def mark_updated(self) -> None:
        self.version += 1

    def set_params(self, params: ParamDict) -> None:
        for k, v in params.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"parameter block {k!r} missing or shape-incongruent")
            self.params[k] = v.astype(np.float64, copy=True)
        self.mark_updated()

    def copy_params(self) -> ParamDict:
        return {k: v.copy() for k, v in self.params.items()}

    def forward(self, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """Map an (n, d_in) batch to (n, feature_dim) features.

        Returns the features together with the cache backward needs.
        """
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"batch shape {x.shape} incompatible with d_in={self.d_in}")
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"layer{i}.W"] + self.params[f"layer{i}.b"]
            h = np.tanh(z) if i < self.n_layers - 1 else z
            acts.append(h)
        return h, ForwardCache(acts, self.version)

    def features(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)[0]

    def backward(self, cache: ForwardCache, grad_output: np.ndarray) -> GradientSet:
        """Exact gradients of a scalar loss whose feature-gradient is grad_output."""
        if cache.version != self.version:
            raise StaleCacheError(
                f"cache from version {cache.version}, parameters at {self.version}"
            )
        g = np.asarray(grad_output, dtype=np.float64)
        out = cache.activations[-1]
        if g.shape != out.shape:
            raise ValueError(f"grad_output shape {g.shape} != output shape {out.shape}")
        grads: GradientSet = {}
        for i in range(self.n_layers - 1, -1, -1):
            a_prev = cache.activations[i]
            grads[f"layer{i}.W"] = a_prev.T @ g
            grads[f"layer{i}.b"] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[f"layer{i}.W"].T) * (1.0 - a_prev**2)
        return grads


class ClassifierHead:
    """Linear map features -> K logits; rebuilt whenever K changes."""

    def __init__(self, feature_dim: int, n_classes: int, seed: int = 0):
        if n_classes < 1:
            raise ValueError("head needs at least one class")
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        w, b = _init_linear(rng, feature_dim, n_classes)
        self.params: ParamDict = {"W": w, "b": b}

    def forward(self, features: np.ndarray) -> np.ndarray:
        if features.shape[1] != self.feature_dim:
            raise ValueError("feature dimension mismatch")
        return features @ self.params["W"] + self.params["b"]

    def backward(self, features: np.ndarray, grad_logits: np.ndarray
                 ) -> tuple[GradientSet, np.ndarray]:
        grads = {"W": features.T @ grad_logits, "b": grad_logits.sum(axis=0)}
        grad_features = grad_logits @ self.params["W"].T
        return grads, grad_features


# ---------------------------------------------------------------------------
# Adam with linear LR schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr_initial: float = 3.5e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamDict, grads: GradientSet, state: AdamState,
              schedule_position: float) -> tuple[ParamDict, AdamState]:
    """One Adam update with bias correction, in place.

    Effective learning rate is lr_initial * (1 - schedule_position).
    Decoupled weight decay shrinks weight matrices (keys ending in 'W'),
    never biases, and is not scheduled: at schedule position 1 the only
    remaining movement is the decay itself.
    """
    if not 0.0 <= schedule_position <= 1.0:
        raise ValueError("schedule_position must lie in [0, 1]")
    for name in grads:
        if name not in params:
            raise ValueError(f"gradient for unknown parameter block {name!r}")
        if grads[name].shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch on block {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise ValueError(f"non-finite gradient in parameter block {name!r}")

    state.step_count += 1
    t = state.step_count
    lr_eff = state.lr_initial * (1.0 - schedule_position)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g**2
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] -= lr_eff * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if state.weight_decay > 0 and name.endswith("W"):
            params[name] -= state.lr_initial * state.weight_decay * params[name]
    return params, state


def add_grads(*grad_sets: GradientSet) -> GradientSet:
    """Sum gradient dicts; blocks absent from a set count as zero."""
    total: GradientSet = {}
    for gs in grad_sets:
        for k, v in gs.items():
            total[k] = total[k] + v if k in total else v.copy()
    return total


def scale_grads(grads: GradientSet, factor: float) -> GradientSet:
    return {k: factor * v for k, v in grads.items()}


# ---------------------------------------------------------------------------
# Checkpoint format: text header, then little-endian float64 binary
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "STREAMREID-CKPT 1"


def save_checkpoint(path, named_tensors: ParamDict) -> None:
    header = io.StringIO()
    header.write(f"{_CKPT_MAGIC}\n")
    header.write(f"tensors {len(named_tensors)}\n")
    for name, arr in named_tensors.items():
        dims = ",".join(str(d) for d in arr.shape)
        header.write(f"{name} {dims}\n")
    header.write("data\n")
    with open(path, "wb") as f:
        f.write(header.getvalue().encode("ascii"))
        for arr in named_tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamDict:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        head_end = blob.index(b"data\n") + len(b"data\n")
    except ValueError:
        raise ValueError("checkpoint missing data marker") from None
    lines = blob[:head_end].decode("ascii").splitlines()
    if lines[0] != _CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic: {lines[0]!r}")
    n = int(lines[1].split()[1])
    out: ParamDict = {}
    offset = head_end
    for line in lines[2:2 + n]:
        name, dims = line.rsplit(" ", 1)
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        out[name] = arr.astype(np.float64)
        offset += count * 8
    return out
