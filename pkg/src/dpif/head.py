"""Two-stream transform head on top of a frozen backbone.

Visible stream::  features -> compress -> grouped map -> embed
Thermal stream::  features -> compress -> F -> G -> grouped map -> embed

``compress``, the grouped map and the embedding projection are the same
:class:`Parameter` objects in both streams. F and G are thermal-only
residual blocks of 1x1 convolutions. The last convolution of each block
starts at zero, so both streams initially agree exactly while the inner
layers still receive gradient. The visible classifier scores embeddings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Iterator

import numpy as np

from dpif import ops
from dpif.backbone import Backbone
from dpif.ops import ACTIVATIONS
from dpif.tensor import DEFAULT_DTYPE, Parameter, ShapeError, Tensor

EMBEDDING_SIZES = (64, 128, 256, 512, 1024)
ACTIVATION_COMBOS = (("relu", "relu"), ("relu", "tanh"), ("tanh", "tanh"), ("tanh", "relu"))

SHARED = ("compress", "grouped", "embed")
THERMAL_ONLY = ("f1", "f2", "f3", "g1", "g2")
CLASSIFIER = ("classifier",)
# closing convolution of each residual block, zero at initialization
RESIDUAL_OUTPUTS = ("f3", "g2")


@dataclass(frozen=True)
class HeadConfig:
    """Geometry of the head.

    ``channels``, ``height``, ``width`` describe the backbone feature map.
    """

    channels: int
    height: int
    width: int
    embedding_size: int = 256
    num_classes: int = 2
    groups: int = 2
    f_width: int = 200
    activations: tuple[str, str] = ("tanh", "relu")

    def __post_init__(self):
        if self.channels % 2:
            raise ShapeError(f"compression needs an even channel count, got {self.channels}")
        half = self.channels // 2
        if half % 2 or half % self.groups or (half // 2) % self.groups:
            raise ShapeError(f"{self.groups} groups do not divide the grouped map "
                             f"{half} -> {half // 2} channels")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if len(self.activations) != 2:
            raise ValueError("activations must name one function per residual block")
        if self.embedding_size < 1 or self.num_classes < 1:
            raise ValueError("embedding size and class count must be positive")

    @property
    def compressed(self) -> int:
        return self.channels // 2

    @property
    def grouped_out(self) -> int:
        return self.channels // 4

    @property
    def flat_size(self) -> int:
        return self.height * self.width * self.grouped_out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activations"] = list(self.activations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        d["activations"] = tuple(d["activations"])
        return cls(**d)

    @classmethod
    def for_backbone(cls, backbone: Backbone, **kwargs) -> "HeadConfig":
        h, w, c = backbone.output_shape
        return cls(channels=c, height=h, width=w, **kwargs)


def parameter_shapes(cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every head tensor, in a fixed order."""
    c, c2, c4, fw = cfg.channels, cfg.compressed, cfg.grouped_out, cfg.f_width
    shapes = {
        "compress.kernel": (1, 1, c, c2), "compress.bias": (c2,),
        "f1.kernel": (1, 1, c2, fw), "f1.bias": (fw,),
        "f2.kernel": (1, 1, fw, fw), "f2.bias": (fw,),
        "f3.kernel": (1, 1, fw, c2), "f3.bias": (c2,),
        "g1.kernel": (1, 1, c2, c2), "g1.bias": (c2,),
        "g2.kernel": (1, 1, c2, c2), "g2.bias": (c2,),
    }
    for g in range(cfg.groups):
        shapes[f"grouped.kernel.{g}"] = (1, 1, c2 // cfg.groups, c4 // cfg.groups)
    shapes["grouped.bias"] = (c4,)
    shapes["embed.weight"] = (cfg.flat_size, cfg.embedding_size)
    shapes["embed.bias"] = (cfg.embedding_size,)
    shapes["classifier.weight"] = (cfg.embedding_size, cfg.num_classes)
    shapes["classifier.bias"] = (cfg.num_classes,)
    return shapes


def component_of(name: str) -> str:
    return name.split(".", 1)[0]


def component_sizes(cfg: HeadConfig) -> dict[str, int]:
    """Closed-form scalar count per component."""
    c, c2, c4, fw, n = cfg.channels, cfg.compressed, cfg.grouped_out, cfg.f_width, cfg.groups
    d, k = cfg.embedding_size, cfg.num_classes
    return {
        "compress": c * c2 + c2,
        "f1": c2 * fw + fw,
        "f2": fw * fw + fw,
        "f3": fw * c2 + c2,
        "g1": c2 * c2 + c2,
        "g2": c2 * c2 + c2,
        "grouped": n * (c2 // n) * (c4 // n) + c4,
        "embed": cfg.flat_size * d + d,
        "classifier": d * k + k,
    }


class DpitHead:
    """Trainable transform head; see module docstring for the data flow."""

    def __init__(self, config: HeadConfig, seed: int = 0, dtype=DEFAULT_DTYPE,
                 zero_residual: bool = True):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        for name, shape in parameter_shapes(config).items():
            comp = component_of(name)
            if name.endswith("bias") or (zero_residual and comp in RESIDUAL_OUTPUTS):
                arr = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                fan_out = shape[-1] * (shape[0] * shape[1] if len(shape) == 4 else 1)
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                arr = rng.uniform(-limit, limit, size=shape)
            self.params[name] = Parameter(name, arr.astype(dtype))

    # -- parameter bookkeeping -------------------------------------------------

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def select(self, components) -> dict[str, Parameter]:
        return {k: p for k, p in self.params.items() if component_of(k) in components}

    def set_trainable(self, components, flag: bool) -> None:
        for p in self.select(components).values():
            p.set_trainable(flag)

    def freeze_classifier(self) -> None:
        self.set_trainable(CLASSIFIER, False)

    @property
    def classifier_trainable(self) -> bool:
        return self.params["classifier.weight"].trainable

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing head parameter {name!r}")
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    # -- forward pieces --------------------------------------------------------

    def _conv1x1(self, prefix: str, x: Tensor, act: str) -> Tensor:
        p = self.params
        return ops.activation(ops.conv2d(x, p[f"{prefix}.kernel"], p[f"{prefix}.bias"]), act)

    def compress(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.config.channels:
            if x.ndim == 4 and x.shape[-1] % 2:
                raise ShapeError(f"compression needs an even channel count, got {x.shape[-1]}")
            raise ShapeError(f"compress expects [N,h,w,{self.config.channels}], got {x.shape}")
        return self._conv1x1("compress", x, "tanh")

    def dpit_f(self, h: Tensor) -> Tensor:
        act = self.config.activations[0]
        y = self._conv1x1("f1", h, act)
        y = self._conv1x1("f2", y, act)
        y = self._conv1x1("f3", y, act)
        return ops.add(y, h)

    def dpit_g(self, f: Tensor) -> Tensor:
        act = self.config.activations[1]
        y = self._conv1x1("g1", f, act)
        y = self._conv1x1("g2", y, act)
        return ops.add(y, f)

    def grouped_map(self, t: Tensor) -> Tensor:
        n = self.config.groups
        kernels = [self.params[f"grouped.kernel.{g}"] for g in range(n)]
        return ops.activation(
            ops.grouped_conv2d(t, kernels, self.params["grouped.bias"], n), "relu")

    def embed(self, psi: Tensor) -> Tensor:
        return ops.dense(ops.flatten(psi), self.params["embed.weight"], self.params["embed.bias"])

    def classify(self, embedding: Tensor) -> Tensor:
        if embedding.ndim != 2 or embedding.shape[1] != self.config.embedding_size:
            raise ShapeError(f"classifier expects [N,{self.config.embedding_size}], "
                             f"got {embedding.shape}")
        return ops.dense(embedding, self.params["classifier.weight"],
                         self.params["classifier.bias"])

    def visible_features_to_psi(self, feats: Tensor) -> Tensor:
        return self.grouped_map(self.compress(feats))

    def thermal_features_to_psi(self, feats: Tensor) -> Tensor:
        return self.grouped_map(self.dpit_g(self.dpit_f(self.compress(feats))))

    def embed_visible_features(self, feats: Tensor) -> Tensor:
        return self.embed(self.visible_features_to_psi(_tensor(feats)))

    def embed_thermal_features(self, feats: Tensor) -> Tensor:
        return self.embed(self.thermal_features_to_psi(_tensor(feats)))


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class DpifModel:
    """Frozen backbone plus two-stream head."""

    def __init__(self, backbone: Backbone, head: DpitHead):
        h, w, c = backbone.output_shape
        cfg = head.config
        if (cfg.height, cfg.width, cfg.channels) != (h, w, c):
            raise ShapeError(f"head expects {cfg.height}x{cfg.width}x{cfg.channels} features, "
                             f"backbone produces {h}x{w}x{c}")
        self.backbone = backbone
        self.head = head

    def features(self, images) -> Tensor:
        feats = self.backbone.forward_features(images)
        dtype = self.head.params["compress.kernel"].dtype
        return feats if feats.dtype == dtype else Tensor(feats.data.astype(dtype))

    def embed_visible(self, images) -> Tensor:
        return self.head.embed_visible_features(self.features(images))

    def embed_thermal(self, images) -> Tensor:
        return self.head.embed_thermal_features(self.features(images))

    def classify(self, embedding: Tensor) -> Tensor:
        return self.head.classify(embedding)


def count_trainable(model, embedding_size: int | None = None) -> int:
    """Closed-form number of trainable scalars.

    ``model`` may be a :class:`DpitHead`, :class:`DpifModel` or a
    :class:`HeadConfig`; for a bare config the classifier is counted as
    frozen (its state during thermal-stream training). Passing
    ``embedding_size`` evaluates the same geometry at another size.
    """
    if isinstance(model, DpifModel):
        model = model.head
    if isinstance(model, HeadConfig):
        cfg, trainable = model, {c: c not in CLASSIFIER for c in component_sizes(model)}
    else:
        cfg = model.config
        trainable = {component_of(k): p.trainable for k, p in model.params.items()}
    if embedding_size is not None:
        cfg = replace(cfg, embedding_size=embedding_size)
    return sum(n for comp, n in component_sizes(cfg).items() if trainable[comp])
