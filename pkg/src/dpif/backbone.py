"""Frozen, truncated convolutional feature extractors.

Three families are available:

* ``vgg16`` - 3x3 conv stacks with 2x2 max-pools, truncation at a pool.
* ``resnet50`` - bottleneck units with inference-mode batch norm. Each of
  stages 2-4 downsamples in its *last* unit and stage 5 keeps 7x7, which is
  the placement that yields the published feature-map sizes for every
  truncation point (``block_2c`` 28x28x256 ... ``block_5c`` 7x7x2048).
* ``tiny`` - three conv/pool stages for 32x32 inputs (4x4x64 output), used
  for desk-scale experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dpif import ops
from dpif.tensor import DEFAULT_DTYPE, Parameter, ShapeError, Tensor, no_grad
from dpif.weights import MissingWeightError, WeightStore

FAMILIES = ("vgg16", "resnet50", "tiny")

# (block name -> H, W, C) at nominal input size
TRUNCATION_SHAPES: dict[str, dict[str, tuple[int, int, int]]] = {
    "vgg16": {
        "block2_pool": (56, 56, 128),
        "block3_pool": (28, 28, 256),
        "block4_pool": (14, 14, 512),
        "block5_pool": (7, 7, 512),
    },
    "resnet50": {
        "block_2c": (28, 28, 256),
        "block_3d": (14, 14, 512),
        "block_4e": (14, 14, 1024),
        "block_4f": (7, 7, 1024),
        "block_5c": (7, 7, 2048),
    },
    "tiny": {
        "block3_pool": (4, 4, 64),
    },
}

DEFAULT_TRUNCATION = {"vgg16": "block4_pool", "resnet50": "block_4e", "tiny": "block3_pool"}
INPUT_SIZE = {"vgg16": 224, "resnet50": 224, "tiny": 32}


@dataclass(frozen=True)
class LayerDesc:
    """One entry of a backbone layer list.

    ``kind`` is ``conv``, ``pool`` or ``bottleneck``. For a bottleneck,
    ``filters`` is the inner width and ``out_filters`` the expanded width.
    ``boundary`` marks layers whose output is a named block boundary.
    """

    kind: str
    name: str
    kernel: int = 1
    filters: int = 0
    stride: int = 1
    padding: str = "same"
    out_filters: int = 0
    boundary: bool = False


def _vgg16_layers() -> list[LayerDesc]:
    layers = []
    for block, (n_conv, filters) in enumerate([(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)], 1):
        for j in range(1, n_conv + 1):
            layers.append(LayerDesc("conv", f"block{block}_conv{j}", 3, filters, 1))
        layers.append(LayerDesc("pool", f"block{block}_pool", 2, stride=2, padding="valid",
                                boundary=True))
    return layers


def _resnet50_layers() -> list[LayerDesc]:
    layers = [LayerDesc("conv", "conv1", 7, 64, 2),
              LayerDesc("pool", "block_1a", 3, stride=2, padding="same", boundary=True)]
    stages = [(2, 64, 256, 3, 2), (3, 128, 512, 4, 2), (4, 256, 1024, 6, 2), (5, 512, 2048, 3, 1)]
    for stage, inner, outer, units, last_stride in stages:
        for u in range(units):
            stride = last_stride if u == units - 1 else 1
            layers.append(LayerDesc("bottleneck", f"block_{stage}{'abcdef'[u]}", 3, inner, stride,
                                    out_filters=outer, boundary=True))
    return layers


def _tiny_layers() -> list[LayerDesc]:
    layers = []
    for block, filters in enumerate((16, 32, 64), 1):
        layers.append(LayerDesc("conv", f"block{block}_conv1", 3, filters, 1))
        layers.append(LayerDesc("pool", f"block{block}_pool", 2, stride=2, padding="valid",
                                boundary=True))
    return layers


_LAYER_BUILDERS = {"vgg16": _vgg16_layers, "resnet50": _resnet50_layers, "tiny": _tiny_layers}


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    truncation: str
    layers: tuple[LayerDesc, ...] = field(repr=False)
    input_size: int
    batchnorm: bool

    @classmethod
    def create(cls, family: str, truncation: str | None = None) -> "BackboneSpec":
        if family not in FAMILIES:
            raise ValueError(f"unknown backbone family {family!r}; expected one of {FAMILIES}")
        truncation = truncation or DEFAULT_TRUNCATION[family]
        if truncation not in TRUNCATION_SHAPES[family]:
            raise ValueError(f"{family} cannot be truncated at {truncation!r}; valid points: "
                             f"{', '.join(TRUNCATION_SHAPES[family])}")
        full = _LAYER_BUILDERS[family]()
        cut = next(i for i, l in enumerate(full) if l.name == truncation)
        return cls(family, truncation, tuple(full[:cut + 1]), INPUT_SIZE[family],
                   family == "resnet50")

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return TRUNCATION_SHAPES[self.family][self.truncation]

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every named tensor the backbone needs, in layer order."""
        shapes: dict[str, tuple[int, ...]] = {}
        c = 3

        def conv(prefix: str, k: int, cin: int, cout: int):
            shapes[f"{prefix}.kernel"] = (k, k, cin, cout)
            shapes[f"{prefix}.bias"] = (cout,)
            if self.batchnorm:
                for stat in ("mean", "var", "gamma", "beta"):
                    shapes[f"{prefix}.bn.{stat}"] = (cout,)

        for layer in self.layers:
            if layer.kind == "conv":
                conv(layer.name, layer.kernel, c, layer.filters)
                c = layer.filters
            elif layer.kind == "bottleneck":
                conv(f"{layer.name}.conv1", 1, c, layer.filters)
                conv(f"{layer.name}.conv2", layer.kernel, layer.filters, layer.filters)
                conv(f"{layer.name}.conv3", 1, layer.filters, layer.out_filters)
                if _needs_projection(layer, c):
                    conv(f"{layer.name}.shortcut", 1, c, layer.out_filters)
                c = layer.out_filters
        return shapes


def _needs_projection(layer: LayerDesc, in_channels: int) -> bool:
    return layer.stride != 1 or in_channels != layer.out_filters


def seeded_weights(spec: BackboneSpec, seed: int, dtype=DEFAULT_DTYPE) -> WeightStore:
    """Fan-in scaled uniform kernels, zero biases, identity batch-norm stats."""
    rng = np.random.default_rng(seed)
    store = WeightStore(metadata={"format_version": 1, "dtype": np.dtype(dtype).name,
                                  "provenance": f"seeded-random:{spec.family}:{seed}"})
    for name, shape in spec.weight_shapes().items():
        if name.endswith(".kernel"):
            fan_in = shape[0] * shape[1] * shape[2]
            limit = math.sqrt(6.0 / fan_in)
            arr = rng.uniform(-limit, limit, size=shape)
        elif name.endswith((".bn.var", ".bn.gamma")):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        store[name] = arr.astype(dtype)
    return store


class Backbone:
    """Immutable feature extractor; all parameters are frozen."""

    def __init__(self, spec: BackboneSpec, params: dict[str, Parameter]):
        self.spec = spec
        self.params = params

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.spec.output_shape

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _conv(self, prefix: str, x: Tensor, stride: int, padding: str, relu: bool) -> Tensor:
        p = self.params
        y = ops.conv2d(x, p[f"{prefix}.kernel"], p[f"{prefix}.bias"], stride, padding)
        if self.spec.batchnorm:
            y = ops.batchnorm_inference(y, p[f"{prefix}.bn.mean"], p[f"{prefix}.bn.var"],
                                        p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"])
        return ops.activation(y, "relu") if relu else y

    def _bottleneck(self, layer: LayerDesc, x: Tensor) -> Tensor:
        n = layer.name
        y = self._conv(f"{n}.conv1", x, layer.stride, "same", True)
        y = self._conv(f"{n}.conv2", y, 1, "same", True)
        y = self._conv(f"{n}.conv3", y, 1, "same", False)
        if _needs_projection(layer, x.shape[-1]):
            x = self._conv(f"{n}.shortcut", x, layer.stride, "same", False)
        return ops.activation(ops.add(y, x), "relu")

    def _check_input(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        s = self.spec.input_size
        if x.ndim != 4 or x.shape[1:3] != (s, s) or x.shape[3] not in (1, 3):
            raise ShapeError(f"{self.spec.family} backbone expects [N,{s},{s},3] input, "
                             f"got {x.shape}")
        if x.shape[3] == 1:
            x = Tensor(np.repeat(x.data, 3, axis=3))
        dtype = next(iter(self.params.values())).dtype
        if x.dtype != dtype:
            x = Tensor(x.data.astype(dtype))
        return x

    def trace(self, images) -> list[tuple[str, Tensor]]:
        """Run every layer, returning (name, output) at each block boundary."""
        x = self._check_input(images)
        out = []
        with no_grad():
            for layer in self.spec.layers:
                if layer.kind == "conv":
                    x = self._conv(layer.name, x, layer.stride, layer.padding, True)
                elif layer.kind == "pool":
                    x = ops.maxpool2d(x, layer.kernel, layer.stride, layer.padding)
                else:
                    x = self._bottleneck(layer, x)
                if layer.boundary:
                    out.append((layer.name, x))
        return out

    def forward_features(self, images) -> Tensor:
        """Feature maps at the truncation point; no graph is recorded."""
        return self.trace(images)[-1][1]

    def export_weights(self) -> WeightStore:
        return WeightStore.from_arrays({k: p.data for k, p in self.params.items()},
                                       family=self.spec.family, truncation=self.spec.truncation)


def build_backbone(spec: BackboneSpec, weights: WeightStore | int, dtype=None) -> Backbone:
    """Assemble a frozen backbone from a weight store or an integer seed.

    Raises MissingWeightError naming the first absent or mis-shaped layer.
    """
    if isinstance(weights, (int, np.integer)) and not isinstance(weights, bool):
        weights = seeded_weights(spec, int(weights), dtype or DEFAULT_DTYPE)
    params = {}
    for name, shape in spec.weight_shapes().items():
        arr = weights.require(name, shape)
        if dtype is not None:
            arr = arr.astype(dtype)
        params[name] = Parameter(name, np.array(arr, copy=True), trainable=False)
        params[name].data.setflags(write=False)
    return Backbone(spec, params)


def forward_features(backbone: Backbone, images) -> Tensor:
    return backbone.forward_features(images)


def truncation_sweep(family: str, images=None, weights: WeightStore | int = 0
                     ) -> list[tuple[str, tuple[int, int, int]]]:
    """Output shape at every tabulated truncation point of ``family``.

    A single pass through the deepest truncation is traced, so every earlier
    boundary is measured on the same forward computation.
    """
    if family not in ("vgg16", "resnet50"):
        raise ValueError(f"truncation sweep is defined for vgg16 and resnet50, not {family!r}")
    names = list(TRUNCATION_SHAPES[family])
    spec = BackboneSpec.create(family, names[-1])
    backbone = build_backbone(spec, weights)
    if images is None:
        s = spec.input_size
        images = np.random.default_rng(0).uniform(0, 1, (1, s, s, 3)).astype(np.float32)
    traced = dict((n, t.shape[1:]) for n, t in backbone.trace(images))
    return [(n, tuple(traced[n])) for n in names]


def layer_shapes(spec: BackboneSpec):
    """Static shape trace (H, W, C) after each layer, without running convolutions."""
    h = w = spec.input_size
    c = 3
    trace = []
    for layer in spec.layers:
        if layer.kind == "conv":
            h = ops.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
            w = ops.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            c = layer.filters
        elif layer.kind == "pool":
            h = ops.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
            w = ops.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
        else:
            h = ops.conv_output_size(h, 1, layer.stride, "same")
            w = ops.conv_output_size(w, 1, layer.stride, "same")
            c = layer.out_filters
        trace.append((layer.name, (h, w, c)))
    return trace
