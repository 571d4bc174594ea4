"""Dense softmax classifiers with exact, hand-written gradients.

Everything runs in float64 numpy. A Model is an immutable stack of affine
layers (relu or identity activations) followed by a softmax; training code
never mutates a model, it builds a new one from the old parameters plus an
update. The backward pass differentiates weighted sums of cross-entropy
and entropy terms in closed form, which keeps gradients reproducible to
the last bit and lets callers attach per-example coefficients that are
treated as constants (no gradient flows through them).

Log arguments are clamped at ``LOG_FLOOR``; the clamp only matters where a
probability has underflowed to ~0, and the reported gradient is the exact
gradient of the clamped loss.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, FormatError, ShapeError, UnsupportedLossError

LOG_FLOOR = 1e-12
ACTIVATIONS = ("relu", "id")


def _as_f64(x, name="array"):
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite values")
    return a


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Layer:
    """One affine layer. w[i, j] connects input unit i to output unit j."""

    w: np.ndarray
    b: np.ndarray
    act: str = "relu"


@dataclass(frozen=True)
class Model:
    """Immutable feed-forward classifier; forward() appends a softmax."""

    layers: tuple
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        if self.num_classes < 2:
            raise DomainError(f"num_classes must be >= 2, got {self.num_classes}")
        prev = None
        for i, layer in enumerate(self.layers):
            if layer.act not in ACTIVATIONS:
                raise DomainError(f"layer {i}: unknown activation {layer.act!r}")
            if layer.w.ndim != 2 or layer.b.ndim != 1:
                raise ShapeError(f"layer {i}: w must be 2-d and b 1-d")
            if layer.w.shape[1] != layer.b.shape[0]:
                raise ShapeError(
                    f"layer {i}: w has {layer.w.shape[1]} outputs but b has {layer.b.shape[0]}"
                )
            if prev is not None and layer.w.shape[0] != prev:
                raise ShapeError(
                    f"layer {i}: expects {layer.w.shape[0]} inputs, previous layer emits {prev}"
                )
            if not (np.all(np.isfinite(layer.w)) and np.all(np.isfinite(layer.b))):
                raise DomainError(f"layer {i}: non-finite parameters")
            prev = layer.w.shape[1]
        if prev != self.num_classes:
            raise ShapeError(
                f"final layer emits {prev} units, num_classes is {self.num_classes}"
            )

    @property
    def input_dim(self):
        return self.layers[0].w.shape[0]


def init_model(input_dim, hidden, num_classes, seed):
    """Build a fresh model with He-normal hidden layers and a small
    identity-activated output layer.

    hidden is a sequence of hidden widths; empty gives softmax regression.
    """
    rng = np.random.default_rng(seed)
    widths = [int(input_dim)] + [int(h) for h in hidden] + [int(num_classes)]
    layers = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        last = i == len(widths) - 2
        scale = np.sqrt(1.0 / fan_in) if last else np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, scale, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append(Layer(w=w, b=b, act="id" if last else "relu"))
    return Model(layers=tuple(layers), num_classes=int(num_classes), seed=int(seed))


# ---------------------------------------------------------------------------
# forward


def softmax(z):
    """Row-wise stable softmax."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True)
class ForwardCache:
    """Intermediate state kept for the backward pass."""

    inputs: np.ndarray
    layer_inputs: tuple  # activation input of each layer
    preacts: tuple  # pre-activation of each layer
    probs: np.ndarray


def _check_batch(model, batch):
    x = _as_f64(batch, "batch")
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-d (got ndim={x.ndim})")
    if x.shape[1] != model.input_dim:
        raise ShapeError(
            f"batch has {x.shape[1]} features, model expects {model.input_dim}"
        )
    return x


def forward_cached(model, batch):
    x = _check_batch(model, batch)
    a = x
    layer_inputs, preacts = [], []
    for layer in model.layers:
        z = a @ layer.w + layer.b
        layer_inputs.append(a)
        preacts.append(z)
        a = relu(z) if layer.act == "relu" else z
    probs = softmax(a)
    return probs, ForwardCache(
        inputs=x, layer_inputs=tuple(layer_inputs), preacts=tuple(preacts), probs=probs
    )


def forward(model, batch):
    """Class probabilities, shape (batch, num_classes). Rows sum to 1."""
    probs, _ = forward_cached(model, batch)
    return probs


def predict(model, batch):
    """Predicted labels; argmax breaks ties toward the lowest index."""
    return np.argmax(forward(model, batch), axis=1)


# ---------------------------------------------------------------------------
# losses


def _check_labels(labels, batch_size, num_classes):
    y = np.asarray(labels)
    if y.shape != (batch_size,):
        raise ShapeError(f"labels shape {y.shape} != ({batch_size},)")
    if not np.issubdtype(y.dtype, np.integer):
        raise DomainError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DomainError(
            f"labels must lie in [0, {num_classes}); got range [{y.min()}, {y.max()}]"
        )
    return y.astype(np.int64)


def _check_probs(probs):
    p = _as_f64(probs, "probs")
    if p.ndim != 2:
        raise ShapeError("probs must be 2-d")
    if p.size and (p.min() < -1e-9 or np.abs(p.sum(axis=1) - 1.0).max() > 1e-4):
        raise DomainError("probs rows must be distributions summing to 1")
    return p


def cross_entropy_per_example(probs, labels):
    """-log p_y per row, with the log argument clamped at LOG_FLOOR."""
    p = _check_probs(probs)
    y = _check_labels(labels, p.shape[0], p.shape[1])
    return -np.log(np.maximum(p[np.arange(p.shape[0]), y], LOG_FLOOR))


def cross_entropy(probs, labels):
    """Mean cross-entropy of a probability batch against integer labels."""
    return float(np.mean(cross_entropy_per_example(probs, labels)))


def entropy(probs):
    """Shannon entropy per row, in nats; 0*log(0) counts as 0."""
    p = _check_probs(probs)
    plogp = np.where(p > 0.0, p * np.log(np.maximum(p, LOG_FLOOR)), 0.0)
    return -plogp.sum(axis=1)


# ---------------------------------------------------------------------------
# backward


@dataclass(frozen=True)
class LossTerm:
    """One summand of a composite loss over a single forward pass.

    kind is "ce" (cross-entropy against labels) or "entropy". The term
    contributes mean_b(weight_b * v_b) to the loss. weight may be a scalar
    or a per-example vector; either way it is a constant to the backward
    pass, so per-example coefficients computed from probabilities act as
    blocked (detached) factors.
    """

    kind: str
    labels: np.ndarray | None = None
    weight: object = 1.0


@dataclass(frozen=True)
class BackwardResult:
    loss: float
    param_grads: tuple  # (gw, gb) per layer
    input_grad: np.ndarray


def _term_weight(term, batch_size):
    w = np.asarray(term.weight, dtype=np.float64)
    if w.ndim == 0:
        return np.full(batch_size, float(w))
    if w.shape != (batch_size,):
        raise ShapeError(f"term weight shape {w.shape} != ({batch_size},)")
    if not np.all(np.isfinite(w)):
        raise DomainError("term weight contains non-finite values")
    return w


def _accumulate_terms(probs, terms):
    """Total loss value and dLoss/dprobs for a list of LossTerms."""
    b, m = probs.shape
    loss = 0.0
    g_probs = np.zeros_like(probs)
    for term in terms:
        w = _term_weight(term, b)
        if term.kind == "ce":
            if term.labels is None:
                raise UnsupportedLossError("ce term needs labels")
            y = _check_labels(term.labels, b, m)
            p_y = probs[np.arange(b), y]
            loss += float(np.mean(w * -np.log(np.maximum(p_y, LOG_FLOOR))))
            # d(-log max(p_y, floor))/dp_y is -1/p_y above the clamp, 0 below
            live = p_y > LOG_FLOOR
            g_probs[np.arange(b), y] += np.where(live, -w / (b * np.maximum(p_y, LOG_FLOOR)), 0.0)
        elif term.kind == "entropy":
            plogp = np.where(probs > 0.0, probs * np.log(np.maximum(probs, LOG_FLOOR)), 0.0)
            h = -plogp.sum(axis=1)
            loss += float(np.mean(w * h))
            g = np.where(probs > 0.0, -(np.log(np.maximum(probs, LOG_FLOOR)) + 1.0), 0.0)
            g_probs += (w / b)[:, None] * g
        else:
            raise UnsupportedLossError(f"unknown loss term kind {term.kind!r}")
    return loss, g_probs


def backprop(model, cache, g_probs):
    """Backpropagate dLoss/dprobs through softmax and every layer.

    Returns ((gw, gb) per layer, dLoss/dinputs).
    """
    p = cache.probs
    if g_probs.shape != p.shape:
        raise ShapeError(f"g_probs shape {g_probs.shape} != probs shape {p.shape}")
    # softmax jacobian-vector product
    g = p * (g_probs - np.sum(g_probs * p, axis=1, keepdims=True))
    param_grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.act == "relu":
            g = g * (cache.preacts[i] > 0.0)
        a_in = cache.layer_inputs[i]
        param_grads[i] = (a_in.T @ g, g.sum(axis=0))
        g = g @ layer.w.T
    return tuple(param_grads), g


def backward(model, batch, terms):
    """Loss value plus exact parameter and input gradients.

    terms is a sequence of LossTerm; the loss is the sum of their weighted
    batch means.
    """
    probs, cache = forward_cached(model, batch)
    loss, g_probs = _accumulate_terms(probs, terms)
    param_grads, input_grad = backprop(model, cache, g_probs)
    return BackwardResult(loss=loss, param_grads=param_grads, input_grad=input_grad)


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class OptimState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: tuple
    v: tuple


def adam_init(model, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    if not np.isfinite(lr) or lr < 0:
        raise DomainError(f"lr must be a finite non-negative real, got {lr}")
    zeros = tuple(
        (np.zeros_like(layer.w), np.zeros_like(layer.b)) for layer in model.layers
    )
    return OptimState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0, m=zeros, v=zeros)


def adam_step(model, param_grads, state):
    """One Adam update. Returns (new model, new state); inputs untouched.

    A gradient that is exactly zero in every coordinate of a tensor leaves
    that tensor exactly unchanged on the first step and whenever its moment
    estimates are still zero.
    """
    if len(param_grads) != len(model.layers):
        raise ShapeError("gradient list length does not match layer count")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_layers, new_m, new_v = [], [], []
    for layer, (gw, gb), (mw, mb), (vw, vb) in zip(
        model.layers, param_grads, state.m, state.v
    ):
        if gw.shape != layer.w.shape or gb.shape != layer.b.shape:
            raise ShapeError("gradient shape does not match parameter shape")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise DomainError("non-finite gradient")
        mw2 = b1 * mw + (1 - b1) * gw
        mb2 = b1 * mb + (1 - b1) * gb
        vw2 = b2 * vw + (1 - b2) * gw**2
        vb2 = b2 * vb + (1 - b2) * gb**2
        w2 = layer.w - state.lr * (mw2 / bc1) / (np.sqrt(vw2 / bc2) + state.eps)
        bb2 = layer.b - state.lr * (mb2 / bc1) / (np.sqrt(vb2 / bc2) + state.eps)
        new_layers.append(Layer(w=w2, b=bb2, act=layer.act))
        new_m.append((mw2, mb2))
        new_v.append((vw2, vb2))
    new_model = Model(layers=tuple(new_layers), num_classes=model.num_classes, seed=model.seed)
    new_state = replace(state, step=t, m=tuple(new_m), v=tuple(new_v))
    return new_model, new_state


# ---------------------------------------------------------------------------
# checkpoints


def model_to_json(model):
    """Serialize to the checkpoint schema. Stable: serializing a model
    loaded from this string reproduces it byte for byte."""
    obj = {
        "layers": [
            {"w": layer.w.tolist(), "b": layer.b.tolist(), "act": layer.act}
            for layer in model.layers
        ],
        "num_classes": model.num_classes,
        "seed": model.seed,
    }
    return json.dumps(obj)


def model_from_json(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint is not valid JSON: {e}") from None
    return model_from_obj(obj)


def model_from_obj(obj):
    if not isinstance(obj, dict) or "layers" not in obj or "num_classes" not in obj:
        raise FormatError("checkpoint must be an object with 'layers' and 'num_classes'")
    layers = []
    for i, entry in enumerate(obj["layers"]):
        try:
            w = np.array(entry["w"], dtype=np.float64)
            b = np.array(entry["b"], dtype=np.float64)
            act = entry["act"]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"checkpoint layer {i} is malformed: {e}") from None
        layers.append(Layer(w=w, b=b, act=act))
    return Model(
        layers=tuple(layers),
        num_classes=int(obj["num_classes"]),
        seed=int(obj.get("seed", 0)),
    )


def save_model(model, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(model_to_json(model))
    os.replace(tmp, path)


def load_model(path):
    with open(path) as f:
        return model_from_json(f.read())
