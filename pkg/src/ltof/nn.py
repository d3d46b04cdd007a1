"""Fully connected networks on the tape, with Adam and JSON checkpoints.

The architecture is deliberately small: linear layers with ReLU hidden
activations, optional batch normalization before each activation, optional
inverted dropout after it.  The output layer is purely linear.
"""

import json

import numpy as np

from . import autodiff as ad
from .ioutil import atomic_write_text
from .solvers import DivergenceError

CHECKPOINT_FORMAT_VERSION = 1


class MlpModel:
    """Weights plus normalization state for one feedforward network.

    Parameters
    ----------
    layer_dims : list of int
        Widths [d_in, h_1, ..., h_k, d_out].
    weights, biases : lists of ndarray
        One (fan_in, fan_out) matrix and one (fan_out,) vector per layer.
    dropout_rate : float
        Probability of zeroing a hidden unit during training.
    batchnorm : bool
        Normalize each hidden pre-activation over the batch.
    """

    def __init__(self, layer_dims, weights, biases, dropout_rate=0.0,
                 batchnorm=False, bn_scales=None, bn_shifts=None,
                 bn_means=None, bn_vars=None):
        self.layer_dims = list(layer_dims)
        self.weights = weights
        self.biases = biases
        self.dropout_rate = float(dropout_rate)
        self.batchnorm = bool(batchnorm)
        self.bn_scales = bn_scales
        self.bn_shifts = bn_shifts
        self.bn_means = bn_means
        self.bn_vars = bn_vars
        self.bn_momentum = 0.1
        self.bn_eps = 1e-5
        self.mode = "train"

    @property
    def n_layers(self):
        return len(self.weights)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self


def init_mlp(layer_dims, rng, dropout_rate=0.0, batchnorm=False):
    """Uniform fan-in init: W, b ~ U[-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    if len(layer_dims) < 2:
        raise ValueError(f"need at least input and output dims, got {layer_dims}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    n_hidden = len(layer_dims) - 2
    bn_scales = bn_shifts = bn_means = bn_vars = None
    if batchnorm:
        bn_scales = [np.ones(layer_dims[i + 1]) for i in range(n_hidden)]
        bn_shifts = [np.zeros(layer_dims[i + 1]) for i in range(n_hidden)]
        bn_means = [np.zeros(layer_dims[i + 1]) for i in range(n_hidden)]
        bn_vars = [np.ones(layer_dims[i + 1]) for i in range(n_hidden)]
    return MlpModel(layer_dims, weights, biases, dropout_rate, batchnorm,
                    bn_scales, bn_shifts, bn_means, bn_vars)


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ValueError(
            f"input shape {x.shape} incompatible with layer dims {model.layer_dims} "
            f"(expected (batch, {model.layer_dims[0]}))")
    return x


def forward(model, x, rng=None):
    """Plain numpy forward pass; returns the output batch.

    In train mode this updates batch-norm running statistics and applies
    dropout (`rng` required when dropout_rate > 0), exactly mirroring
    :func:`forward_graph`.
    """
    x = _check_input(model, x)
    training = model.mode == "train"
    if training and model.dropout_rate > 0.0 and rng is None:
        raise ValueError("dropout in train mode needs an rng")
    h = x
    last = model.n_layers - 1
    for layer in range(model.n_layers):
        h = h @ model.weights[layer] + model.biases[layer]
        if layer == last:
            break
        if model.batchnorm:
            if training:
                mean, var = h.mean(axis=0), h.var(axis=0)
                _update_running(model, layer, mean, var)
            else:
                mean, var = model.bn_means[layer], model.bn_vars[layer]
            h = (h - mean) / np.sqrt(var + model.bn_eps)
            h = h * model.bn_scales[layer] + model.bn_shifts[layer]
        h = np.maximum(h, 0.0)
        if training and model.dropout_rate > 0.0:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(h.shape) < keep).astype(np.float64)
            h = h * mask / keep
    return h


def forward_graph(model, tape, x, rng=None):
    """Forward pass recorded on `tape`; returns (output Var, trainable Vars).

    `x` may be an ndarray (lifted as a constant) or a Var already on the
    tape, which lets one network feed another.  The returned parameter list
    matches :func:`parameters` element for element.
    """
    training = model.mode == "train"
    if training and model.dropout_rate > 0.0 and rng is None:
        raise ValueError("dropout in train mode needs an rng")
    if isinstance(x, ad.Var):
        h = x
        if h.value.ndim != 2 or h.value.shape[1] != model.layer_dims[0]:
            raise ValueError(
                f"input shape {h.value.shape} incompatible with layer dims {model.layer_dims}")
    else:
        h = ad.constant(tape, _check_input(model, x))
    params = []
    last = model.n_layers - 1
    for layer in range(model.n_layers):
        w = ad.constant(tape, model.weights[layer])
        b = ad.constant(tape, model.biases[layer])
        params.extend([w, b])
        h = ad.matmul(h, w) + b
        if layer == last:
            break
        if model.batchnorm:
            scale = ad.constant(tape, model.bn_scales[layer])
            shift = ad.constant(tape, model.bn_shifts[layer])
            params.extend([scale, shift])
            if training:
                h, mean, var = ad.batch_norm_train(h, scale, shift, model.bn_eps)
                _update_running(model, layer, mean, var)
            else:
                h = ad.batch_norm_infer(h, scale, shift, model.bn_means[layer],
                                        model.bn_vars[layer], model.bn_eps)
        h = ad.relu(h)
        if training and model.dropout_rate > 0.0:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(h.value.shape) < keep).astype(np.float64)
            h = ad.dropout(h, mask, keep)
    return h, params


def _update_running(model, layer, mean, var):
    m = model.bn_momentum
    model.bn_means[layer] = (1.0 - m) * model.bn_means[layer] + m * mean
    model.bn_vars[layer] = (1.0 - m) * model.bn_vars[layer] + m * var


def parameters(model):
    """Trainable arrays in the same order forward_graph lifts them."""
    out = []
    last = model.n_layers - 1
    for layer in range(model.n_layers):
        out.extend([model.weights[layer], model.biases[layer]])
        if layer != last and model.batchnorm:
            out.extend([model.bn_scales[layer], model.bn_shifts[layer]])
    return out


def set_parameters(model, arrays):
    """Write a parameters() style list back into the model."""
    current = parameters(model)
    if len(arrays) != len(current):
        raise ValueError(f"expected {len(current)} arrays, got {len(arrays)}")
    slots = []
    last = model.n_layers - 1
    for layer in range(model.n_layers):
        slots.append((model.weights, layer))
        slots.append((model.biases, layer))
        if layer != last and model.batchnorm:
            slots.append((model.bn_scales, layer))
            slots.append((model.bn_shifts, layer))
    for (holder, i), arr in zip(slots, arrays):
        if holder[i].shape != arr.shape:
            raise ValueError(f"shape mismatch {holder[i].shape} vs {arr.shape}")
        holder[i] = np.array(arr, dtype=np.float64)


def snapshot(model):
    """Copies of everything mutable: parameters plus running statistics."""
    state = [p.copy() for p in parameters(model)]
    if model.batchnorm:
        state.append([m.copy() for m in model.bn_means])
        state.append([v.copy() for v in model.bn_vars])
    return state


def restore(model, state):
    if model.batchnorm:
        set_parameters(model, state[:-2])
        model.bn_means = [m.copy() for m in state[-2]]
        model.bn_vars = [v.copy() for v in state[-1]]
    else:
        set_parameters(model, state)


class AdamState:
    """First/second moment accumulators for one parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(state, model, grads):
    """One Adam update applied in place to the model's parameters.

    Raises DivergenceError on any non-finite gradient so callers can stop
    a run that has blown up instead of training on NaNs.
    """
    params = parameters(model)
    if len(grads) != len(params):
        raise ValueError(f"got {len(grads)} grads for {len(params)} params")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    new = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient encountered")
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        new.append(p - state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps))
    set_parameters(model, new)


def save_checkpoint(model, path):
    """Serialize the model to versioned JSON (row-major flat weight arrays)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": model.layer_dims,
        "activation": "relu",
        "dropout_rate": model.dropout_rate,
        "weights": [w.reshape(-1).tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "batchnorm": None,
    }
    if model.batchnorm:
        payload["batchnorm"] = {
            "means": [m.tolist() for m in model.bn_means],
            "vars": [v.tolist() for v in model.bn_vars],
            "scales": [s.tolist() for s in model.bn_scales],
            "shifts": [s.tolist() for s in model.bn_shifts],
        }
    atomic_write_text(path, json.dumps(payload))


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version!r}")
    dims = payload["layer_dims"]
    weights = [np.asarray(w, dtype=np.float64).reshape(fi, fo)
               for w, fi, fo in zip(payload["weights"], dims[:-1], dims[1:])]
    biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
    bn = payload.get("batchnorm")
    model = MlpModel(
        dims, weights, biases,
        dropout_rate=payload.get("dropout_rate", 0.0),
        batchnorm=bn is not None,
        bn_scales=[np.asarray(s, dtype=np.float64) for s in bn["scales"]] if bn else None,
        bn_shifts=[np.asarray(s, dtype=np.float64) for s in bn["shifts"]] if bn else None,
        bn_means=[np.asarray(m, dtype=np.float64) for m in bn["means"]] if bn else None,
        bn_vars=[np.asarray(v, dtype=np.float64) for v in bn["vars"]] if bn else None,
    )
    model.eval()
    return model
