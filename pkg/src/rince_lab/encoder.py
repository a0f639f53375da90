"""MLP encoder ``f`` with projection head ``g``, manual backprop and a momentum copy.

The critic is the cosine similarity of projections. Key-side embeddings come
from the momentum copy and never receive gradient.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numeric import NumericError

CHECKPOINT_FORMAT = "rince_lab.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths of ``f`` (input first) and of the one-hidden-layer head ``g``."""

    widths: tuple[int, ...] = (16, 64, 32)
    head_hidden: int = 32
    proj_dim: int = 8
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"encoder needs an input width and at least one layer, got {self.widths}")
        if self.head_hidden < 1 or self.proj_dim < 1:
            raise ValueError("head widths must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def layer_shapes(self) -> list[tuple[str, int, int, bool]]:
        """(name, fan_in, fan_out, relu) for every linear layer, ``f`` then ``g``."""
        out = []
        for i, (a, b) in enumerate(zip(self.widths, self.widths[1:])):
            out.append((f"f{i}", a, b, True))
        out.append(("g0", self.feature_dim, self.head_hidden, True))
        out.append(("g1", self.head_hidden, self.proj_dim, False))
        return out

    def param_names(self) -> list[str]:
        return [f"{n}.{k}" for n, *_ in self.layer_shapes() for k in ("W", "b")]


Params = dict  # name -> ndarray


def init_params(spec: MlpSpec, rng: np.random.Generator) -> Params:
    """Fan-in scaled uniform weights (He bound sqrt(6/fan_in)).

    Biases are uniform in +-1/sqrt(fan_in); nonzero output biases keep a
    projection from collapsing to exactly zero when every relu is off.
    """
    params = {}
    for name, fan_in, fan_out, _ in spec.layer_shapes():
        bound = math.sqrt(6.0 / fan_in)
        params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        params[f"{name}.b"] = rng.uniform(-1.0, 1.0, size=fan_out) / math.sqrt(fan_in)
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class EncoderState:
    spec: MlpSpec
    params: Params
    momentum_params: Params
    momentum: float = 0.99

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, momentum: float = 0.99) -> "EncoderState":
        params = init_params(spec, rng)
        return cls(spec, params, {k: v.copy() for k, v in params.items()}, momentum)

    def copy(self) -> "EncoderState":
        return EncoderState(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.momentum_params.items()},
            self.momentum,
        )


@dataclass
class ForwardTape:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    feature_layer: int
    used: bool = False


def forward_batch(spec: MlpSpec, params: Params, x: np.ndarray):
    """Rows of ``x`` through ``f`` and ``g``; returns (features, projections, tape)."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != spec.input_dim:
        raise NumericError(f"input dimension {h.shape[1]} != encoder input {spec.input_dim}")
    inputs, preacts = [], []
    feats = None
    layers = spec.layer_shapes()
    n_f = len(spec.widths) - 1
    for i, (name, _, _, relu) in enumerate(layers):
        inputs.append(h)
        z = h @ params[f"{name}.W"].T + params[f"{name}.b"]
        preacts.append(z)
        h = np.maximum(z, 0.0) if relu else z
        if i == n_f - 1:
            feats = h
    return feats, h, ForwardTape(inputs, preacts, n_f - 1)


def forward(state: EncoderState, x, use_momentum: bool = False):
    """Single-sample forward: (pre-head feature, projection, tape)."""
    params = state.momentum_params if use_momentum else state.params
    feats, proj, tape = forward_batch(state.spec, params, np.asarray(x, dtype=np.float64)[None, :])
    return feats[0], proj[0], tape


def embed(state: EncoderState, x: np.ndarray, use_momentum: bool = False, head: bool = False) -> np.ndarray:
    params = state.momentum_params if use_momentum else state.params
    feats, proj, _ = forward_batch(state.spec, params, x)
    return proj if head else feats


def backward(spec: MlpSpec, params: Params, tape: ForwardTape, grad_proj: np.ndarray,
             grad_feat: np.ndarray | None = None) -> Params:
    """Exact parameter gradients given upstream gradients on projections (and optionally features)."""
    if tape.used:
        raise RuntimeError("forward tape already consumed by a backward pass")
    tape.used = True
    grads = {}
    delta = np.atleast_2d(np.asarray(grad_proj, dtype=np.float64))
    layers = spec.layer_shapes()
    for i in range(len(layers) - 1, -1, -1):
        name, _, _, relu = layers[i]
        if i == tape.feature_layer and grad_feat is not None:
            delta = delta + np.atleast_2d(grad_feat)
        if relu:
            delta = delta * (tape.preacts[i] > 0.0)
        grads[f"{name}.W"] = delta.T @ tape.inputs[i]
        grads[f"{name}.b"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params[f"{name}.W"]
    return grads


def cosine_scores(zq: np.ndarray, zk: np.ndarray) -> np.ndarray:
    nq = np.linalg.norm(zq, axis=1, keepdims=True)
    nk = np.linalg.norm(zk, axis=1, keepdims=True)
    if np.any(nq == 0.0) or np.any(nk == 0.0):
        raise NumericError("degenerate embedding: zero projection")
    return np.clip((zq / nq) @ (zk / nk).T, -1.0, 1.0)


def cosine_backward(zq: np.ndarray, zk: np.ndarray, grad_scores: np.ndarray) -> np.ndarray:
    """d loss / d zq for scores = cos(zq_b, zk_m); the key side is treated as constant."""
    nq = np.linalg.norm(zq, axis=1, keepdims=True)
    uq = zq / nq
    uk = zk / np.linalg.norm(zk, axis=1, keepdims=True)
    gu = grad_scores @ uk
    return (gu - (gu * uq).sum(axis=1, keepdims=True) * uq) / nq


def critic(state: EncoderState, x, y, y_from_momentum: bool = False) -> float:
    _, zx, _ = forward(state, x)
    _, zy, _ = forward(state, y, use_momentum=y_from_momentum)
    return float(cosine_scores(zx[None, :], zy[None, :])[0, 0])


def momentum_update(state: EncoderState, m: float | None = None) -> EncoderState:
    """In place: momentum copy <- m * momentum copy + (1 - m) * online weights."""
    m = state.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for k, v in state.params.items():
        state.momentum_params[k] = m * state.momentum_params[k] + (1.0 - m) * v
    return state


def flatten(params: Params, names: list[str]) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n in names])


def unflatten(vec: np.ndarray, like: Params, names: list[str]) -> Params:
    out, k = {}, 0
    for n in names:
        size = like[n].size
        out[n] = vec[k:k + size].reshape(like[n].shape).copy()
        k += size
    return out


# -- checkpoints -------------------------------------------------------------------


def _encode(params: Params, names) -> dict:
    return {n: {"shape": list(params[n].shape), "data": params[n].ravel().tolist()} for n in names}


def _decode(blob: dict) -> Params:
    return {n: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for n, v in blob.items()}


def checkpoint_dict(state: EncoderState, rng_state: dict | None = None, extra: dict | None = None) -> dict:
    names = state.spec.param_names()
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": asdict(state.spec),
        "momentum": state.momentum,
        "params": _encode(state.params, names),
        "momentum_params": _encode(state.momentum_params, names),
        "rng_state": rng_state or {},
        "extra": extra or {},
    }


def save_checkpoint(state: EncoderState, path, rng_state: dict | None = None, extra: dict | None = None) -> None:
    text = json.dumps(checkpoint_dict(state, rng_state, extra), sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[EncoderState, dict]:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    spec_d = blob["spec"]
    spec = MlpSpec(tuple(spec_d["widths"]), spec_d["head_hidden"], spec_d["proj_dim"], spec_d["activation"])
    state = EncoderState(spec, _decode(blob["params"]), _decode(blob["momentum_params"]), blob["momentum"])
    return state, blob
