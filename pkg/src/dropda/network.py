"""Feature extractor, classifier and MC-dropout discriminator.

All three are stacks of ``DenseLayer``. The extractor applies ReLU after
every layer, the classifier and discriminator after every hidden layer only.
The discriminator additionally drops hidden units; one weight set yields K
different discriminators by drawing K independent mask sets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dropda import diffcore as dc
from dropda.errors import DimensionError, ValidationError

CHECKPOINT_VERSION = 1


@dataclass
class Stack:
    """Dense layers with ReLU between them (and after the last, if ``relu_out``)."""

    layers: list[dc.DenseLayer]
    relu_out: bool = False
    _acts: list = field(default_factory=list, repr=False)

    @classmethod
    def build(cls, dims, rng, relu_out=False):
        layers = [dc.DenseLayer.init(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        return cls(layers, relu_out)

    @property
    def in_dim(self):
        return self.layers[0].in_dim if self.layers else None

    @property
    def out_dim(self):
        return self.layers[-1].out_dim if self.layers else None

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def _relu_after(self, i):
        return self.relu_out or i < len(self.layers) - 1

    def forward(self, x):
        x = dc.as_matrix(x)
        self._acts = []
        for i, layer in enumerate(self.layers):
            inp = x
            x = dc.dense_forward(x, layer)
            self._acts.append((inp, x))
            if self._relu_after(i):
                x = dc.relu(x)
        return x

    def backward(self, grad):
        """Return ``(grad_input, param_grads)``; param grads ordered like ``params()``."""
        grads = []
        for i in reversed(range(len(self.layers))):
            inp, pre = self._acts[i]
            if self._relu_after(i):
                grad = dc.relu_backward(grad, pre)
            grad, gw, gb = dc.dense_backward(grad, self.layers[i], inp)
            grads[:0] = [gw, gb]
        return grad, grads


@dataclass
class Discriminator:
    layers: list[dc.DenseLayer]
    dropout: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.layers and self.layers[-1].out_dim != 1:
            raise DimensionError("discriminator must end in a single logit")

    @classmethod
    def build(cls, dims, rng, dropout=0.5):
        layers = [dc.DenseLayer.init(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        return cls(layers, dropout)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def sample_masks(self, rng):
        return [dc.sample_dropout_mask(layer.out_dim, self.dropout, rng) for layer in self.layers[:-1]]

    def forward(self, h, masks=None):
        """One pass. ``masks=None`` is the deterministic (no-dropout) network.

        Returns ``(logits, cache)``; the cache holds the masks so backward
        reuses exactly what this pass drew.
        """
        x = dc.as_matrix(h)
        cache = []
        for i, layer in enumerate(self.layers):
            inp = x
            x = dc.dense_forward(x, layer)
            if i == len(self.layers) - 1:
                cache.append((inp, None, None))
                break
            pre = x
            x = dc.relu(x)
            mask = masks[i] if masks is not None else None
            if mask is not None:
                x = dc.apply_dropout(x, mask)
            cache.append((inp, pre, mask))
        return x, cache

    def backward(self, grad, cache):
        grads = []
        for i in reversed(range(len(self.layers))):
            inp, pre, mask = cache[i]
            if pre is not None:
                if mask is not None:
                    grad = dc.dropout_backward(grad, mask)
                grad = dc.relu_backward(grad, pre)
            grad, gw, gb = dc.dense_backward(grad, self.layers[i], inp)
            grads[:0] = [gw, gb]
        return grad, grads


@dataclass
class McOutput:
    logits: np.ndarray  # (K, batch, 1)
    masks: list[list[dc.DropoutMask]]
    caches: list = field(repr=False, default_factory=list)

    @property
    def k(self) -> int:
        return self.logits.shape[0]


@dataclass
class NetworkParams:
    extractor: Stack
    classifier: Stack
    discriminator: Discriminator

    @classmethod
    def build(cls, input_dim, n_classes, rng, extractor_hidden=(64, 64),
              classifier_hidden=(), discriminator_hidden=(64,), dropout=0.5):
        ext_dims = [input_dim, *extractor_hidden]
        feat = ext_dims[-1]
        extractor = Stack.build(ext_dims, rng, relu_out=True)
        classifier = Stack.build([feat, *classifier_hidden, n_classes], rng)
        disc = Discriminator.build([feat, *discriminator_hidden, 1], rng, dropout)
        return cls(extractor, classifier, disc)

    @property
    def input_dim(self):
        return self.extractor.in_dim if self.extractor.layers else self.classifier.in_dim

    @property
    def n_classes(self):
        return self.classifier.out_dim

    def groups(self):
        return {"extractor": self.extractor.layers,
                "classifier": self.classifier.layers,
                "discriminator": self.discriminator.layers}


def extract_features(x, extractor: Stack):
    if extractor.layers and dc.as_matrix(x).shape[1] != extractor.in_dim:
        raise DimensionError(f"input has {np.shape(x)[1]} columns, extractor expects {extractor.in_dim}")
    return extractor.forward(x)


def classify(features, classifier: Stack):
    return classifier.forward(features)


def predict(params: NetworkParams, x) -> np.ndarray:
    """Deterministic class predictions; no dropout is involved."""
    return classify(extract_features(x, params.extractor), params.classifier).argmax(axis=1)


def discriminate_mc(features, disc: Discriminator, k: int, rng) -> McOutput:
    if k < 1:
        raise ValidationError(f"number of MC samples must be >= 1, got {k}")
    outs, masks, caches = [], [], []
    for _ in range(k):
        m = disc.sample_masks(rng)
        logits, cache = disc.forward(features, m)
        outs.append(logits)
        masks.append(m)
        caches.append(cache)
    return McOutput(np.stack(outs), masks, caches)


def mc_output_variance(out: McOutput) -> np.ndarray:
    """Unbiased variance across the K sampled discriminators, one value per input row."""
    if out.k < 2:
        raise ValidationError("variance needs at least 2 MC samples")
    z = out.logits[:, :, 0]
    # shifting by the first sample keeps identical samples at exactly zero variance
    return (z - z[0]).var(axis=0, ddof=1)


def save_checkpoint(path, params: NetworkParams) -> None:
    """Write an uncompressed ``.npz``.

    Keys: ``format_version`` (int array), ``meta`` (JSON: layer dims per
    group, dropout rate) and ``<group>.<i>.weights`` / ``<group>.<i>.bias``
    for group in extractor, classifier, discriminator.
    """
    arrays = {"format_version": np.array([CHECKPOINT_VERSION])}
    meta = {"dropout": params.discriminator.dropout, "groups": {}}
    for name, layers in params.groups().items():
        meta["groups"][name] = [[layer.in_dim, layer.out_dim] for layer in layers]
        for i, layer in enumerate(layers):
            arrays[f"{name}.{i}.weights"] = layer.weights
            arrays[f"{name}.{i}.bias"] = layer.bias
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> NetworkParams:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: checkpoint format {version}, expected {CHECKPOINT_VERSION}")
        meta = json.loads(str(z["meta"]))
        groups = {}
        for name, dims in meta["groups"].items():
            layers = []
            for i, (din, dout) in enumerate(dims):
                w = np.array(z[f"{name}.{i}.weights"])
                b = np.array(z[f"{name}.{i}.bias"])
                if w.shape != (dout, din) or b.shape != (dout,):
                    raise DimensionError(f"{path}: {name} layer {i} has weights {w.shape}, expected {(dout, din)}")
                layers.append(dc.DenseLayer(w, b))
            groups[name] = layers
    return NetworkParams(
        Stack(groups["extractor"], relu_out=True),
        Stack(groups["classifier"]),
        Discriminator(groups["discriminator"], meta["dropout"]),
    )
