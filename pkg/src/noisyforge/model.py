"""Layer graph with noise-injection points, plus the desk-scale presets.

A :class:`ModelGraph` is an ordered list of layers and a set of injection
points: layer indices after which additive Gaussian noise is applied when a
noise context is active.  The default placement is after every ReLU and
after the final dense layer (logits); analog accumulators are noisy
everywhere, so including the logits is the conservative choice and can be
switched off per run.  The input image itself is never perturbed.

Noise enters the forward pass as a constant added term, so gradients pass
through injection points unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError
from .noise import NoiseContext, RngStream

KIND_DENSE = "dense"
KIND_CONV = "conv"
KIND_RELU = "relu"
KIND_MAXPOOL = "maxpool"
KIND_FLATTEN = "flatten"


@dataclass
class LayerSpec:
    """One layer: a kind tag, its structural dims, and parameter tensors.

    dims by kind:
      dense   (in_features, out_features)
      conv    (in_channels, out_channels, k, stride, padding)
      maxpool (k, stride)
      relu / flatten  ()
    """

    kind: str
    dims: tuple = ()
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.weight, self.bias) if p is not None]


def _check_params(layer: LayerSpec) -> None:
    if layer.kind == KIND_DENSE:
        fin, fout = layer.dims
        if layer.weight.shape != (fin, fout) or layer.bias.shape != (fout,):
            raise ShapeError(
                f"dense parameter shapes {layer.weight.shape}/{layer.bias.shape} "
                f"do not match dims {layer.dims}"
            )
    elif layer.kind == KIND_CONV:
        cin, cout, k, _, _ = layer.dims
        if layer.weight.shape != (cout, cin, k, k) or layer.bias.shape != (cout,):
            raise ShapeError(
                f"conv parameter shapes {layer.weight.shape}/{layer.bias.shape} "
                f"do not match dims {layer.dims}"
            )
    elif layer.kind in (KIND_RELU, KIND_MAXPOOL, KIND_FLATTEN):
        if layer.weight is not None or layer.bias is not None:
            raise ShapeError(f"{layer.kind} takes no parameters")
    else:
        raise UsageError(f"unknown layer kind {layer.kind!r}")


def _infer_shape(layer: LayerSpec, shape: tuple) -> tuple:
    """Output sample shape (without batch dim) for an input sample shape."""
    if layer.kind == KIND_DENSE:
        fin, fout = layer.dims
        if shape != (fin,):
            raise ShapeError(f"dense expects input ({fin},), got {shape}")
        return (fout,)
    if layer.kind == KIND_CONV:
        cin, cout, k, stride, pad = layer.dims
        if len(shape) != 3 or shape[0] != cin:
            raise ShapeError(f"conv expects input ({cin}, H, W), got {shape}")
        h = (shape[1] + 2 * pad - k) // stride + 1
        w = (shape[2] + 2 * pad - k) // stride + 1
        if k > shape[1] + 2 * pad or k > shape[2] + 2 * pad or h < 1 or w < 1:
            raise ShapeError(f"conv output dims non-positive for input {shape}")
        return (cout, h, w)
    if layer.kind == KIND_MAXPOOL:
        k, stride = layer.dims
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W) input, got {shape}")
        if k > shape[1] or k > shape[2]:
            raise ShapeError(f"maxpool window {k} larger than input {shape}")
        return (shape[0], (shape[1] - k) // stride + 1, (shape[2] - k) // stride + 1)
    if layer.kind == KIND_RELU:
        return shape
    if layer.kind == KIND_FLATTEN:
        return (int(np.prod(shape)),)
    raise UsageError(f"unknown layer kind {layer.kind!r}")


class ModelGraph:
    """Ordered layers plus the injection points used by noisy forwards."""

    def __init__(
        self,
        layers: list[LayerSpec],
        input_shape: tuple,
        num_classes: int,
        injection_points: Optional[list[int]] = None,
    ):
        if not layers:
            raise UsageError("a model needs at least one layer")
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        shape = self.input_shape
        for layer in layers:
            _check_params(layer)
            shape = _infer_shape(layer, shape)
        self.output_shape = shape
        if shape != (num_classes,):
            raise ShapeError(
                f"graph produces {shape} per sample, expected ({num_classes},)"
            )
        if injection_points is None:
            injection_points = default_injection_points(layers)
        pts = list(injection_points)
        if pts != sorted(set(pts)) or any(
            p < 0 or p >= len(layers) for p in pts
        ):
            raise UsageError(
                "injection_points must be strictly increasing valid layer indices"
            )
        self.injection_points = pts
        self._injection_set = frozenset(pts)

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, layer in enumerate(self.layers):
            if layer.weight is not None:
                named.append((f"layer{i}.{layer.kind}.weight", layer.weight))
            if layer.bias is not None:
                named.append((f"layer{i}.{layer.kind}.bias", layer.bias))
        return named

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def with_injection_points(self, points: list[int]) -> "ModelGraph":
        """Same layers/parameters, different injection placement."""
        return ModelGraph(
            self.layers, self.input_shape, self.num_classes, injection_points=points
        )


def default_injection_points(
    layers: list[LayerSpec],
    include_logits: bool = True,
    include_pool: bool = False,
) -> list[int]:
    """After every ReLU, optionally after pools, and after the final layer."""
    pts = [i for i, l in enumerate(layers) if l.kind == KIND_RELU]
    if include_pool:
        pts += [i for i, l in enumerate(layers) if l.kind == KIND_MAXPOOL]
    if include_logits:
        pts.append(len(layers) - 1)
    return sorted(set(pts))


def _kaiming_uniform(shape: tuple, fan_in: int, stream: RngStream) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    n = int(np.prod(shape))
    u = stream.uniforms(n)  # (0, 1]
    return ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape)


def _dense(fin: int, fout: int, stream: RngStream) -> LayerSpec:
    w = Tensor(_kaiming_uniform((fin, fout), fin, stream.child("w")), requires_grad=True)
    b = Tensor(np.zeros(fout, dtype=np.float32), requires_grad=True)
    return LayerSpec(KIND_DENSE, (fin, fout), weight=w, bias=b)


def _conv(cin: int, cout: int, k: int, stride: int, pad: int, stream: RngStream) -> LayerSpec:
    w = Tensor(
        _kaiming_uniform((cout, cin, k, k), cin * k * k, stream.child("w")),
        requires_grad=True,
    )
    b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
    return LayerSpec(KIND_CONV, (cin, cout, k, stride, pad), weight=w, bias=b)


def build_preset(
    name: str,
    input_shape: tuple,
    num_classes: int,
    seed: int,
    include_logit_noise: bool = True,
) -> ModelGraph:
    """Construct one of the desk-scale presets with seeded Kaiming-uniform init.

    lenet5: Conv(6,5x5)-ReLU-Pool2-Conv(16,5x5)-ReLU-Pool2-Flatten-
            Dense(120)-ReLU-Dense(84)-ReLU-Dense(num_classes)
    mlp2:   Flatten-Dense(256)-ReLU-Dense(num_classes)
    """
    stream = RngStream(seed).child("init", name)
    input_shape = tuple(int(d) for d in input_shape)
    layers: list[LayerSpec] = []
    if name == "lenet5":
        if len(input_shape) != 3:
            raise UsageError(f"lenet5 needs a (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        layers.append(_conv(c, 6, 5, 1, 0, stream.child(0)))
        layers.append(LayerSpec(KIND_RELU))
        layers.append(LayerSpec(KIND_MAXPOOL, (2, 2)))
        layers.append(_conv(6, 16, 5, 1, 0, stream.child(3)))
        layers.append(LayerSpec(KIND_RELU))
        layers.append(LayerSpec(KIND_MAXPOOL, (2, 2)))
        layers.append(LayerSpec(KIND_FLATTEN))
        fh = ((h - 4) // 2 - 4) // 2
        fw = ((w - 4) // 2 - 4) // 2
        if fh < 1 or fw < 1:
            raise ShapeError(f"lenet5 input {input_shape} too small")
        layers.append(_dense(16 * fh * fw, 120, stream.child(7)))
        layers.append(LayerSpec(KIND_RELU))
        layers.append(_dense(120, 84, stream.child(9)))
        layers.append(LayerSpec(KIND_RELU))
        layers.append(_dense(84, num_classes, stream.child(11)))
    elif name == "mlp2":
        flat = int(np.prod(input_shape))
        layers.append(LayerSpec(KIND_FLATTEN))
        layers.append(_dense(flat, 256, stream.child(1)))
        layers.append(LayerSpec(KIND_RELU))
        layers.append(_dense(256, num_classes, stream.child(3)))
    else:
        raise UsageError(f"unknown preset {name!r} (expected 'lenet5' or 'mlp2')")
    points = default_injection_points(layers, include_logits=include_logit_noise)
    return ModelGraph(layers, input_shape, num_classes, injection_points=points)


def _apply_layer(layer: LayerSpec, x: Tensor) -> Tensor:
    if layer.kind == KIND_DENSE:
        return ad.add_bias(ad.matmul(x, layer.weight), layer.bias)
    if layer.kind == KIND_CONV:
        _, _, _, stride, pad = layer.dims
        return ad.add_bias(
            ad.conv2d(x, layer.weight, stride=stride, padding=pad), layer.bias
        )
    if layer.kind == KIND_RELU:
        return ad.relu(x)
    if layer.kind == KIND_MAXPOOL:
        k, stride = layer.dims
        return ad.max_pool2d(x, k, stride)
    if layer.kind == KIND_FLATTEN:
        return ad.flatten(x)
    raise UsageError(f"unknown layer kind {layer.kind!r}")


def forward(
    model: ModelGraph, batch: Tensor, noise_ctx: Optional[NoiseContext] = None
) -> Tensor:
    """Run the graph, adding sampled noise after each injection point.

    With ``noise_ctx=None`` (or an all-zero sigma vector) this is exactly the
    clean forward.  Injected noise is a constant w.r.t. autodiff.
    """
    if batch.data.shape[1:] != model.input_shape:
        raise ShapeError(
            f"batch sample shape {batch.data.shape[1:]} does not match model "
            f"input {model.input_shape}"
        )
    inject = noise_ctx is not None and not noise_ctx.all_zero
    x = batch
    for i, layer in enumerate(model.layers):
        x = _apply_layer(layer, x)
        if inject and i in model._injection_set:
            noise = noise_ctx.noise_for_layer(i, x.data.shape)
            x = ad.add_constant(x, noise)
    return x


def predict_accuracy(logits, labels) -> float:
    """Argmax match rate; ties break toward the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    lab = np.asarray(labels, dtype=np.int64)
    if data.ndim != 2 or data.shape[0] != lab.shape[0]:
        raise ShapeError(
            f"logits {data.shape} inconsistent with {lab.shape} labels"
        )
    pred = data.argmax(axis=1)
    return float(np.mean(pred == lab))
