"""
Tiny residual MLP sequence classifier with hand-derived gradients.

Per position i the model reads the current and the previous token,
    h0 = E[x_i] + P[x_{i-1}],  x_{-1} := 0
and applies L residual blocks
    h_l = h_{l-1} + W2 tanh(W1 h_{l-1} + b1) + b2
followed by the output head, logits = Wo h_L + bo. The block outputs h_1..h_L are
the feature maps used by SquareHead distillation. Linear weights are stored
(out, in), so rows are output units.
"""

import json
import logging
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import List, NamedTuple

import numpy as np

from sparsekit.errors import DomainError, ShapeError
from sparsekit.formats import load_mask, save_mask
from sparsekit.pruning import PruneMask, freeze_mask
from sparsekit.tensor import dense_matmul, load_matrix, make_rng, save_matrix

__all__ = ["TinyModelConfig",
           "TinyModel",
           "Trace",
           "parameter_shapes",
           "previous_tokens",
           "forward",
           "backward",
           "save_checkpoint",
           "load_checkpoint"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TinyModelConfig:
    vocab: int = 32
    d_model: int = 64
    blocks: int = 2
    seq: int = 16
    expansion: int = 4
    prune_embeddings: bool = False
    prune_head: bool = False

    def __post_init__(self):
        for name in ("vocab", "d_model", "blocks", "seq", "expansion"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % 4:
            raise DomainError(f"d_model must be divisible by 4, got {self.d_model}")

    @property
    def hidden(self):
        return self.expansion * self.d_model


def _block(l, part):
    return f"block{l}.{part}"


def parameter_shapes(config):
    c = config
    shapes = OrderedDict(embed=(c.vocab, c.d_model), prev_embed=(c.vocab, c.d_model))
    for l in range(c.blocks):
        shapes[_block(l, "w1")] = (c.hidden, c.d_model)
        shapes[_block(l, "b1")] = (c.hidden,)
        shapes[_block(l, "w2")] = (c.d_model, c.hidden)
        shapes[_block(l, "b2")] = (c.d_model,)
    shapes["head.w"] = (c.vocab, c.d_model)
    shapes["head.b"] = (c.vocab,)
    return shapes


class TinyModel:
    """
    Parameters (ordered):
        - embed, prev_embed: [V, d]
        - block{l}.w1: [4d, d], block{l}.b1: [4d], block{l}.w2: [d, 4d], block{l}.b2: [d]
        - head.w: [V, d], head.b: [V]
    masks maps prunable weight names to their PruneMask once the model is pruned.
    """

    def __init__(self, config, params, masks=None):
        self.config = config
        self.params = OrderedDict(params)
        self.masks = dict(masks or {})
        expected = parameter_shapes(config)
        if list(self.params) != list(expected):
            raise ShapeError(f"parameter names {list(self.params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def init(cls, config, seed, dtype=np.float32):
        rng = make_rng(seed)
        d, hidden, V = config.d_model, config.hidden, config.vocab
        params = OrderedDict()
        params["embed"] = rng.standard_normal((V, d)) / np.sqrt(2.0)
        params["prev_embed"] = rng.standard_normal((V, d)) / np.sqrt(2.0)
        for l in range(config.blocks):
            params[_block(l, "w1")] = rng.standard_normal((hidden, d)) / np.sqrt(d)
            params[_block(l, "b1")] = np.zeros(hidden)
            params[_block(l, "w2")] = rng.standard_normal((d, hidden)) / np.sqrt(hidden)
            params[_block(l, "b2")] = np.zeros(d)
        params["head.w"] = rng.standard_normal((V, d)) / np.sqrt(d)
        params["head.b"] = np.zeros(V)
        return cls(config, OrderedDict((k, v.astype(dtype)) for k, v in params.items()))

    @classmethod
    def zeros(cls, config, dtype=np.float32):
        params = OrderedDict((name, np.zeros(shape, dtype=dtype))
                             for name, shape in parameter_shapes(config).items())
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def parameters(self):
        return self.params

    def copy(self):
        return TinyModel(self.config, OrderedDict((k, v.copy()) for k, v in self.params.items()),
                         dict(self.masks))

    def astype(self, dtype):
        return TinyModel(self.config, OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()),
                         dict(self.masks))

    def prunable_names(self):
        c = self.config
        names = []
        if c.prune_embeddings:
            names += ["embed", "prev_embed"]
        for l in range(c.blocks):
            names += [_block(l, "w1"), _block(l, "w2")]
        if c.prune_head:
            names.append("head.w")
        return names

    def linear_names(self):
        """ Weights of the linear layers (embedding lookups excluded). """
        names = []
        for l in range(self.config.blocks):
            names += [_block(l, "w1"), _block(l, "w2")]
        return names + ["head.w"]

    def prunable(self):
        return OrderedDict((name, self.params[name]) for name in self.prunable_names())

    def install(self, name, weight, mask):
        """ Replace a prunable weight by its pruned version and freeze its mask. """
        if name not in self.params:
            raise KeyError(name)
        weight = np.asarray(weight, dtype=self.dtype)
        if weight.shape != self.params[name].shape or mask.shape != weight.shape:
            raise ShapeError(f"cannot install {weight.shape} weight with {mask.shape} mask as {name}")
        self.params[name] = mask.apply(weight)
        self.masks[name] = mask

    def sparsity(self):
        """ Fraction of exact zeros over the prunable weights. """
        weights = list(self.prunable().values())
        size = sum(W.size for W in weights)
        return 1.0 - sum(np.count_nonzero(W) for W in weights) / size

    def layer_sparsity(self):
        return OrderedDict((name, 1.0 - np.count_nonzero(W) / W.size) for name, W in self.prunable().items())


class Trace(NamedTuple):
    """ Activations kept by forward for the backward pass. """
    inputs: np.ndarray
    previous: np.ndarray
    hiddens: List[np.ndarray]
    activations: List[np.ndarray]


def previous_tokens(inputs):
    """ x_{i-1} for every position, with x_{-1} := 0. """
    prev = np.zeros_like(inputs)
    prev[:, 1:] = inputs[:, :-1]
    return prev


def forward(model, inputs, keep_trace=False):
    """
    Run the model on a batch of token ids.

    INPUT:
        - model: TinyModel
        - inputs: integer ids of shape [B, seq], each < V
        - keep_trace: also return the Trace needed by backward

    OUTPUT:
        - logits: [B, seq, V]
        - features: list of L block outputs, each [B, seq, d]
        - trace (only with keep_trace)
    """
    inputs = np.asarray(inputs, dtype=np.int64)
    if inputs.ndim != 2:
        raise ShapeError(f"inputs must have shape [B, seq], got {inputs.shape}")
    V = model.config.vocab
    if inputs.size and (inputs.min() < 0 or inputs.max() >= V):
        raise DomainError(f"token ids must lie in [0, {V})")
    p = model.params
    previous = previous_tokens(inputs)
    h = p["embed"][inputs] + p["prev_embed"][previous]
    hiddens, activations, features = [h], [], []
    for l in range(model.config.blocks):
        a = np.tanh(dense_matmul(h, p[_block(l, "w1")].T) + p[_block(l, "b1")])
        h = h + dense_matmul(a, p[_block(l, "w2")].T) + p[_block(l, "b2")]
        activations.append(a)
        hiddens.append(h)
        features.append(h)
    logits = dense_matmul(h, p["head.w"].T) + p["head.b"]
    if keep_trace:
        return logits, features, Trace(inputs, previous, hiddens, activations)
    return logits, features


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def backward(model, trace, breakdown):
    """
    Reverse-mode gradients of breakdown.total with respect to every parameter.

    INPUT:
        - model: TinyModel the trace was recorded on
        - trace: Trace from forward(..., keep_trace=True) on the same batch
        - breakdown: LossBreakdown holding the gradients w.r.t. logits and block outputs

    OUTPUT:
        - grads: OrderedDict name -> array shaped like the parameter; gradients of
          masked weights are zero at pruned positions
    """
    p = model.params
    dlogits = np.asarray(breakdown.grad_logits)
    h_last = trace.hiddens[-1]
    if dlogits.shape != h_last.shape[:2] + (model.config.vocab,):
        raise ShapeError(f"logit gradient {dlogits.shape} does not match the traced batch")
    grad_features = breakdown.grad_features or ()
    grads = OrderedDict()
    grads["head.w"] = _flat(dlogits).T @ _flat(h_last)
    grads["head.b"] = _flat(dlogits).sum(axis=0)
    dh = dlogits @ p["head.w"]
    for l in reversed(range(model.config.blocks)):
        if l < len(grad_features) and grad_features[l] is not None:
            dh = dh + grad_features[l]
        a = trace.activations[l]
        h_in = trace.hiddens[l]
        grads[_block(l, "w2")] = _flat(dh).T @ _flat(a)
        grads[_block(l, "b2")] = _flat(dh).sum(axis=0)
        dz = (dh @ p[_block(l, "w2")]) * (1.0 - a * a)
        grads[_block(l, "w1")] = _flat(dz).T @ _flat(h_in)
        grads[_block(l, "b1")] = _flat(dz).sum(axis=0)
        dh = dh + dz @ p[_block(l, "w1")]
    d_embed = np.zeros_like(p["embed"])
    d_prev = np.zeros_like(p["prev_embed"])
    np.add.at(d_embed, trace.inputs.ravel(), _flat(dh))
    np.add.at(d_prev, trace.previous.ravel(), _flat(dh))
    grads["embed"] = d_embed
    grads["prev_embed"] = d_prev
    ordered = OrderedDict((name, grads[name].astype(p[name].dtype, copy=False)) for name in p)
    for name, mask in model.masks.items():
        ordered[name] = freeze_mask(ordered[name], mask)
    return ordered


def save_checkpoint(model, directory):
    """
    Write one SKDM file per parameter (vectors as 1 x n), an SKPM file per mask and
    manifest.json listing names, shapes and files.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, value in model.params.items():
        fname = f"{name}.skdm"
        save_matrix(os.path.join(directory, fname), np.atleast_2d(value))
        entry = dict(name=name, shape=list(value.shape), file=fname, mask=None)
        if name in model.masks:
            entry["mask"] = f"{name}.mask.skpm"
            save_mask(os.path.join(directory, entry["mask"]), model.masks[name].keep)
        entries.append(entry)
    manifest = dict(config=asdict(model.config), params=entries)
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info("saved checkpoint with %d parameters to %s", len(entries), directory)


def load_checkpoint(directory):
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    config = TinyModelConfig(**manifest["config"])
    params, masks = OrderedDict(), {}
    for entry in manifest["params"]:
        value = load_matrix(os.path.join(directory, entry["file"])).reshape(entry["shape"])
        params[entry["name"]] = value
        if entry.get("mask"):
            masks[entry["name"]] = PruneMask(load_mask(os.path.join(directory, entry["mask"])))
    return TinyModel(config, params, masks)
