"""Minimal dense-MLP substrate: forward/backward, Adam, sampling, checkpoints.

Everything is float64 and functional: operations return new values, never
mutate their arguments, and take RNGs as explicit parameters. Gradients are
hand-derived reverse mode and are checked against finite differences in the
test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HEADS = ("softmax", "sigmoid", "linear")

# Logits beyond this would round sigmoid output to exactly 0.0 or 1.0 in
# float64; clipping keeps the sigmoid head strictly inside (0, 1).
_SIGMOID_Z_LIMIT = 35.0

_CHECKPOINT_MAGIC = b"SQRL"
_CHECKPOINT_VERSION = 1
_HEAD_CODES = {"softmax": 0, "sigmoid": 1, "linear": 2}
_HEAD_NAMES = {code: name for name, code in _HEAD_CODES.items()}


class ShapeError(ValueError):
    """Dimension mismatch between an operation's inputs."""


class CacheMismatchError(ValueError):
    """A backward call received a cache that does not match the parameters."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf where a finite value is required."""


@dataclass
class MlpParams:
    """Weights of a tanh MLP with a softmax, sigmoid-scalar, or linear head.

    weights[i] has shape (layer_sizes[i+1], layer_sizes[i]); biases[i] has
    shape (layer_sizes[i+1],). The sigmoid head requires a single output unit.
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str

    def copy(self) -> "MlpParams":
        return MlpParams(
            layer_sizes=tuple(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            head=self.head,
        )

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


@dataclass
class MlpGrads:
    """Parameter gradients shaped exactly like the MlpParams they came from."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scaled(self, factor: float) -> "MlpGrads":
        return MlpGrads(
            weights=[w * factor for w in self.weights],
            biases=[b * factor for b in self.biases],
        )


@dataclass
class ForwardCache:
    """Activations recorded by mlp_forward, consumed by the backward pass."""

    layer_sizes: tuple[int, ...]
    head: str
    acts: list[np.ndarray]  # input to each linear layer, 2-D (n, width)
    logits: np.ndarray      # pre-head output, 2-D
    output: np.ndarray      # post-head output, 2-D
    squeezed: bool          # caller passed a 1-D vector


@dataclass
class AdamState:
    """Adam accumulators; shapes mirror the parameters they update."""

    learning_rate: float
    beta1: float
    beta2: float
    eps: float
    step_count: int
    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]


def init_mlp(
    layer_sizes,
    head: str,
    rng: np.random.Generator,
    out_scale: float = 0.01,
) -> MlpParams:
    """Fresh parameters: N(0, 1/sqrt(fan_in)) hidden layers, small output layer.

    The small out_scale makes the initial policy near-uniform and the initial
    sigmoid critic near 0.5.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ShapeError(f"layer_sizes must be >= 2 positive entries, got {sizes}")
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}, expected one of {HEADS}")
    if head == "sigmoid" and sizes[-1] != 1:
        raise ShapeError(f"sigmoid head needs 1 output unit, got {sizes[-1]}")
    weights, biases = [], []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        scale = 1.0 / np.sqrt(sizes[i])
        if i == n_layers - 1:
            scale *= out_scale
        weights.append(rng.normal(0.0, scale, size=(sizes[i + 1], sizes[i])))
        biases.append(np.zeros(sizes[i + 1]))
    return MlpParams(layer_sizes=sizes, weights=weights, biases=biases, head=head)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(logits: np.ndarray) -> np.ndarray:
    z = np.clip(logits, -_SIGMOID_Z_LIMIT, _SIGMOID_Z_LIMIT)
    return 1.0 / (1.0 + np.exp(-z))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stable for large logits. Accepts 1-D or 2-D."""
    arr = np.asarray(logits, dtype=float)
    squeezed = arr.ndim == 1
    if squeezed:
        arr = arr[None, :]
    z = arr - arr.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return out[0] if squeezed else out


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on one vector or a (n, input_dim) batch.

    Returns (output, cache). The cache holds every activation the backward
    pass needs and must only be used with the same parameters.
    """
    arr = np.asarray(x, dtype=float)
    squeezed = arr.ndim == 1
    if squeezed:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != params.layer_sizes[0]:
        raise ShapeError(
            f"input has {arr.shape[-1] if arr.ndim else 0} features, "
            f"expected {params.layer_sizes[0]}"
        )
    acts = [arr]
    h = arr
    n_layers = len(params.weights)
    for i in range(n_layers - 1):
        h = np.tanh(h @ params.weights[i].T + params.biases[i])
        acts.append(h)
    logits = h @ params.weights[-1].T + params.biases[-1]
    if params.head == "softmax":
        output = _softmax(logits)
    elif params.head == "sigmoid":
        output = _sigmoid(logits)
    else:
        output = logits.copy()
    cache = ForwardCache(
        layer_sizes=params.layer_sizes,
        head=params.head,
        acts=acts,
        logits=logits,
        output=output,
        squeezed=squeezed,
    )
    return (output[0] if squeezed else output), cache


def _check_cache(params: MlpParams, cache: ForwardCache) -> None:
    if cache.layer_sizes != params.layer_sizes or cache.head != params.head:
        raise CacheMismatchError(
            f"cache built for layer_sizes={cache.layer_sizes} head={cache.head!r}, "
            f"params have layer_sizes={params.layer_sizes} head={params.head!r}"
        )


def _backward_core(params: MlpParams, cache: ForwardCache, logit_grad: np.ndarray) -> MlpGrads:
    weights_g: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    biases_g: list[np.ndarray] = [None] * len(params.biases)  # type: ignore[list-item]
    delta = logit_grad
    for i in range(len(params.weights) - 1, -1, -1):
        weights_g[i] = delta.T @ cache.acts[i]
        biases_g[i] = delta.sum(axis=0)
        if i > 0:
            # tanh' = 1 - tanh^2, evaluated at the stored activation
            delta = (delta @ params.weights[i]) * (1.0 - cache.acts[i] ** 2)
    return MlpGrads(weights=weights_g, biases=biases_g)


def mlp_backward(params: MlpParams, cache: ForwardCache, output_grad) -> MlpGrads:
    """Gradient of the scalar loss whose output-gradient is output_grad.

    output_grad rows are dL/d(output) per sample; the returned gradient is the
    sum over samples (put any 1/n for a mean into output_grad itself).
    """
    _check_cache(params, cache)
    g = np.asarray(output_grad, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ShapeError(
            f"output_grad shape {g.shape} does not match output shape {cache.output.shape}"
        )
    if params.head == "softmax":
        p = cache.output
        logit_grad = p * (g - (g * p).sum(axis=1, keepdims=True))
    elif params.head == "sigmoid":
        v = cache.output
        logit_grad = g * v * (1.0 - v)
    else:
        logit_grad = g
    return _backward_core(params, cache, logit_grad)


def mlp_backward_from_logits(params: MlpParams, cache: ForwardCache, logit_grad) -> MlpGrads:
    """Backward pass starting from dL/d(logits), bypassing the head Jacobian.

    Used by losses whose logit-gradient has a closed form (cross entropy,
    clipped surrogate): cheaper and avoids dividing by small probabilities.
    """
    _check_cache(params, cache)
    g = np.asarray(logit_grad, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.logits.shape:
        raise ShapeError(
            f"logit_grad shape {g.shape} does not match logits shape {cache.logits.shape}"
        )
    return _backward_core(params, cache, g)


def adam_init(
    params: MlpParams,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        learning_rate=float(learning_rate),
        beta1=float(beta1),
        beta2=float(beta2),
        eps=float(eps),
        step_count=0,
        m_weights=[np.zeros_like(w) for w in params.weights],
        v_weights=[np.zeros_like(w) for w in params.weights],
        m_biases=[np.zeros_like(b) for b in params.biases],
        v_biases=[np.zeros_like(b) for b in params.biases],
    )


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam descent step. Refuses non-finite gradients."""
    if len(grads.weights) != len(params.weights):
        raise ShapeError(
            f"gradient has {len(grads.weights)} layers, params have {len(params.weights)}"
        )
    for gw, w in zip(grads.weights, params.weights):
        if gw.shape != w.shape:
            raise ShapeError(f"gradient shape {gw.shape} does not match weight shape {w.shape}")
        if not np.all(np.isfinite(gw)):
            raise NonFiniteError("non-finite weight gradient passed to adam_step")
    for gb, b in zip(grads.biases, params.biases):
        if gb.shape != b.shape:
            raise ShapeError(f"gradient shape {gb.shape} does not match bias shape {b.shape}")
        if not np.all(np.isfinite(gb)):
            raise NonFiniteError("non-finite bias gradient passed to adam_step")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr = state.learning_rate

    def update(value, grad, m, v):
        m_new = b1 * m + (1.0 - b1) * grad
        v_new = b2 * v + (1.0 - b2) * grad**2
        step = lr * (m_new / bc1) / (np.sqrt(v_new / bc2) + state.eps)
        return value - step, m_new, v_new

    new_weights, new_m_w, new_v_w = [], [], []
    for w, gw, m, v in zip(params.weights, grads.weights, state.m_weights, state.v_weights):
        nw, nm, nv = update(w, gw, m, v)
        new_weights.append(nw)
        new_m_w.append(nm)
        new_v_w.append(nv)
    new_biases, new_m_b, new_v_b = [], [], []
    for b, gb, m, v in zip(params.biases, grads.biases, state.m_biases, state.v_biases):
        nb, nm, nv = update(b, gb, m, v)
        new_biases.append(nb)
        new_m_b.append(nm)
        new_v_b.append(nv)

    new_params = MlpParams(
        layer_sizes=params.layer_sizes,
        weights=new_weights,
        biases=new_biases,
        head=params.head,
    )
    new_state = AdamState(
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
        step_count=t,
        m_weights=new_m_w,
        v_weights=new_v_w,
        m_biases=new_m_b,
        v_biases=new_v_b,
    )
    return new_params, new_state


def sample_categorical(probs, rng: np.random.Generator) -> int:
    """Draw an index with the given probabilities, consuming exactly one draw."""
    # plain-float walk: this sits inside the rollout hot loop where numpy
    # reductions on 2-4 entry vectors cost 10x the arithmetic
    if isinstance(probs, np.ndarray):
        if probs.ndim != 1:
            raise ShapeError(f"probs must be a vector, got shape {probs.shape}")
        p = probs.tolist()
    else:
        p = [float(v) for v in probs]
    total = 0.0
    for v in p:
        if v < 0.0:
            raise ValueError("probs contains negative entries")
        total += v
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probs sum to {total!r}, expected 1 within 1e-6")
    u = rng.random()
    acc = 0.0
    for i, pi in enumerate(p):
        acc += pi
        if u < acc:
            return i
    # u landed in the rounding slack past the last positive entry
    for i in range(len(p) - 1, -1, -1):
        if p[i] > 0.0:
            return i
    raise ValueError("probs has no positive entry")


def save_checkpoint(path, params: MlpParams) -> None:
    """Binary checkpoint: magic, version byte, head byte, sizes, float64 data.

    All floats are little-endian; round-trips are bit-exact.
    """
    parts = [
        _CHECKPOINT_MAGIC,
        struct.pack("<BB", _CHECKPOINT_VERSION, _HEAD_CODES[params.head]),
        struct.pack("<I", len(params.layer_sizes)),
        struct.pack(f"<{len(params.layer_sizes)}I", *params.layer_sizes),
    ]
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r} in {path}")
    version, head_code = struct.unpack_from("<BB", blob, 4)
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} in {path}")
    if head_code not in _HEAD_NAMES:
        raise ValueError(f"unknown head code {head_code} in {path}")
    (n_sizes,) = struct.unpack_from("<I", blob, 6)
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, 10)
    offset = 10 + 4 * n_sizes
    weights, biases = [], []
    for i in range(n_sizes - 1):
        n_out, n_in = sizes[i + 1], sizes[i]
        w = np.frombuffer(blob, dtype="<f8", count=n_out * n_in, offset=offset)
        offset += 8 * n_out * n_in
        b = np.frombuffer(blob, dtype="<f8", count=n_out, offset=offset)
        offset += 8 * n_out
        weights.append(w.reshape(n_out, n_in).astype(float))
        biases.append(b.astype(float))
    if offset != len(blob):
        raise ValueError(f"checkpoint {path} has {len(blob) - offset} trailing bytes")
    return MlpParams(
        layer_sizes=tuple(sizes),
        weights=weights,
        biases=biases,
        head=_HEAD_NAMES[head_code],
    )
