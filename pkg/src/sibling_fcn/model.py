"""Sibling fully convolutional network: shared residual trunk, detection and
classification heads.

Layer names used in :class:`Parameters` (``<b>`` is the block index)::

    stem.conv.w  stem.bn.{scale,shift}
    m<1-4>.b<i>.conv{1,2}.w  m<1-4>.b<i>.bn{1,2}.{scale,shift}
    m<2,3>.b0.proj.{w,b}                        strided 1x1 shortcut
    det.score.{w,b}  det.up1.w  det.skip.{w,b}  det.up2.w
    cls.score.{w,b}  cls.up.w

Module 4 (``m4``) belongs to the classification branch. A ``single``-head
model (the five-class ablation) has no ``det.*`` parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import xavier_init

TRUNK_PREFIXES = ("stem.", "m1.", "m2.", "m3.")
DETECTION_PREFIXES = ("det.",)
CLASSIFICATION_PREFIXES = ("m4.", "cls.")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_height: int = 32
    image_width: int = 32
    in_channels: int = 3
    base_channels: int = 8
    blocks_per_module: int = 2
    num_categories: int = 4
    scale_preset: str = "desk"
    heads: str = "sibling"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_height % 4 or self.image_width % 4 or self.image_height <= 0 or self.image_width <= 0:
            raise ConfigError("image dimensions must be positive multiples of 4")
        if self.num_categories < 1:
            raise ConfigError("num_categories must be >= 1")
        if self.blocks_per_module < 1:
            raise ConfigError("blocks_per_module must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.scale_preset not in ("full", "desk", "custom"):
            raise ConfigError(f"unknown scale_preset {self.scale_preset!r}")
        if self.heads not in ("sibling", "single"):
            raise ConfigError(f"heads must be 'sibling' or 'single', got {self.heads!r}")

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        kw = dict(image_height=64, image_width=64, base_channels=32, blocks_per_module=9,
                  num_categories=4, scale_preset="full")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        kw = dict(image_height=32, image_width=32, base_channels=8, blocks_per_module=2,
                  num_categories=4, scale_preset="desk")
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Parameters:
    """Named learnable tensors plus batch-norm running statistics."""

    config: ModelConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def decayed_names(self) -> list:
        """Kernel weights only; biases and batch-norm affine terms are not decayed."""
        return [n for n in self.tensors if n.endswith(".w")]

    def copy(self) -> "Parameters":
        return Parameters(
            config=ModelConfig(**self.config.to_dict()),
            tensors={n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()},
            buffers={n: b.copy() for n, b in self.buffers.items()},
        )

    def set_trainable(self, frozen=()) -> None:
        frozen = set(frozen)
        for n, t in self.tensors.items():
            t.requires_grad = n not in frozen


@dataclass
class ForwardOutputs:
    det_probs: Optional[Tensor]
    cls_cond_probs: Tensor
    features: Dict[str, Tensor] = field(default_factory=dict)

    def objectness(self) -> np.ndarray:
        """``p_obj`` as a plain array; for a single-head model the sum of the nuclei channels."""
        if self.det_probs is not None:
            return self.det_probs.data[..., 1, :, :]
        return self.cls_cond_probs.data[..., 1:, :, :].sum(axis=-3)


def group_names(names, prefixes) -> list:
    return [n for n in names if n.startswith(prefixes)]


# ------------------------------------------------------------------ building


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def conv(self, name, c_out, c_in, k, bias=True):
        self.tensors[f"{name}.w"] = Tensor(xavier_init((c_out, c_in, k, k), self.rng), requires_grad=True)
        if bias:
            self.tensors[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def deconv(self, name, c_in, c_out, stride):
        k = 2 * stride
        self.tensors[f"{name}.w"] = Tensor(xavier_init((c_in, c_out, k, k), self.rng), requires_grad=True)

    def bn(self, name, c):
        self.tensors[f"{name}.scale"] = Tensor(np.ones(c), requires_grad=True)
        self.tensors[f"{name}.shift"] = Tensor(np.zeros(c), requires_grad=True)
        self.buffers[f"{name}.running_mean"] = np.zeros(c)
        self.buffers[f"{name}.running_var"] = np.ones(c)

    def block(self, name, c_in, downsample):
        c_out = 2 * c_in if downsample else c_in
        self.conv(f"{name}.conv1", c_out, c_in, 3, bias=False)
        self.bn(f"{name}.bn1", c_out)
        self.conv(f"{name}.conv2", c_out, c_out, 3, bias=False)
        self.bn(f"{name}.bn2", c_out)
        if downsample:
            self.conv(f"{name}.proj", c_out, c_in, 1)
        return c_out


def build(config: ModelConfig, rng_seed: int = 0) -> Parameters:
    """Allocate and Xavier-initialise every parameter for ``config``."""
    config.validate()
    b = _Builder(np.random.default_rng(rng_seed))
    base = config.base_channels
    k1 = config.num_categories + 1

    b.conv("stem.conv", base, config.in_channels, 3, bias=False)
    b.bn("stem.bn", base)
    c = base
    for m in (1, 2, 3):
        for i in range(config.blocks_per_module):
            c = b.block(f"m{m}.b{i}", c, downsample=(m > 1 and i == 0))
    trunk_out = c

    if config.heads == "sibling":
        b.conv("det.score", 2, trunk_out, 1)
        b.deconv("det.up1", 2, 2, 2)
        b.conv("det.skip", 2, 2 * base, 1)
        b.deconv("det.up2", 2, 2, 2)

    for i in range(config.blocks_per_module):
        b.block(f"m4.b{i}", trunk_out, downsample=False)
    b.conv("cls.score", k1, trunk_out, 1)
    b.deconv("cls.up", k1, k1, 4)
    return Parameters(config=config, tensors=b.tensors, buffers=b.buffers)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count; must equal ``build(config).count()``.

    With ``c = base``, ``n = blocks_per_module``, ``K1 = K + 1``:

    * stem: ``9*C_in*c + 2c``
    * identity block at width ``d``: ``18*d^2 + 4d``
    * downsampling block from ``d`` to ``2d``: ``9*2d*d + 9*(2d)^2 + 4*2d + 2d*d + 2d``
    * modules 1-3: ``n`` blocks at ``c``, then a downsampling block plus
      ``n-1`` identity blocks at ``2c`` and at ``4c``
    * module 4: ``n`` identity blocks at ``4c``
    * detection head: ``(4c*2 + 2) + 2*2*16 + (2c*2 + 2) + 2*2*16``
    * classification head: ``4c*K1 + K1 + K1*K1*64``
    """
    c, n, k1 = config.base_channels, config.blocks_per_module, config.num_categories + 1

    def ident(d):
        return 18 * d * d + 4 * d

    def down(d):
        e = 2 * d
        return 9 * e * d + 9 * e * e + 4 * e + e * d + e

    total = 9 * config.in_channels * c + 2 * c
    total += n * ident(c)
    total += down(c) + (n - 1) * ident(2 * c)
    total += down(2 * c) + (n - 1) * ident(4 * c)
    total += n * ident(4 * c)
    if config.heads == "sibling":
        total += (4 * c * 2 + 2) + 64 + (2 * c * 2 + 2) + 64
    total += 4 * c * k1 + k1 + k1 * k1 * 64
    return total


def layer_depth(config: ModelConfig) -> int:
    """Count of learnable convolution/deconvolution layers, shortcuts excluded.

    Reconstructed accounting: stem (1) + 2 convs per block over four modules
    + detection head (score, skip projection, two deconvolutions) +
    classification head (score, deconvolution). The full preset gives 79.
    """
    n = config.blocks_per_module
    depth = 1 + 2 * n * 4 + 2
    if config.heads == "sibling":
        depth += 4
    return depth


# ------------------------------------------------------------------- forward


class Context:
    """Parameters plus mode flags threaded through one forward pass."""

    def __init__(self, params: Parameters, training: bool = True, frozen=()):
        self.p = params.tensors
        self.buffers = params.buffers
        self.training = training
        self.frozen = set(frozen)

    def bn(self, x, name):
        return ad.batch_norm(
            x,
            self.p[f"{name}.scale"],
            self.p[f"{name}.shift"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training=self.training,
            update_stats=f"{name}.scale" not in self.frozen,
        )

    def conv(self, x, name, stride=1, padding=0):
        return ad.conv2d(x, self.p[f"{name}.w"], self.p.get(f"{name}.b"), stride=stride, padding=padding)


def residual_block(x: Tensor, ctx: "Context", name: str, downsample: bool) -> Tensor:
    """``relu(shortcut(x) + bn(conv(relu(bn(conv(x))))))``."""
    stride = 2 if downsample else 1
    h = ad.relu(ctx.bn(ctx.conv(x, f"{name}.conv1", stride=stride, padding=1), f"{name}.bn1"))
    h = ctx.bn(ctx.conv(h, f"{name}.conv2", padding=1), f"{name}.bn2")
    skip = ctx.conv(x, f"{name}.proj", stride=2) if downsample else x
    if skip.shape != h.shape:
        raise ValueError(f"residual paths disagree: shortcut {skip.shape} vs residual {h.shape}")
    return ad.relu(ad.add(skip, h))


def fuse_detection(head_m3: Tensor, features_m2: Tensor, ctx: "Context") -> Tensor:
    """Upsample the module-3 detection scores x2 and add the projected module-2 features."""
    up = ad.conv2d_transpose(head_m3, ctx.p["det.up1.w"], stride=2)
    skip = ctx.conv(features_m2, "det.skip")
    return ad.add(up, skip)


def forward(params: Parameters, image, mode: str = "train", frozen=()) -> ForwardOutputs:
    """Run both heads on an image batch ``(B, C, H, W)`` or a single ``(C, H, W)`` image."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    x = image if isinstance(image, Tensor) else Tensor(image)
    single = x.data.ndim == 3
    if single:
        x = Tensor(x.data[None], requires_grad=x.requires_grad)
    expected = (cfg.in_channels, cfg.image_height, cfg.image_width)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"image shape {x.shape} does not match config {expected}")

    ctx = Context(params, training=(mode == "train"), frozen=set(frozen))
    n = cfg.blocks_per_module
    h = ad.relu(ctx.bn(ctx.conv(x, "stem.conv", padding=1), "stem.bn"))
    feats = {}
    for m in (1, 2, 3):
        for i in range(n):
            h = residual_block(h, ctx, f"m{m}.b{i}", downsample=(m > 1 and i == 0))
        feats[f"m{m}"] = h

    det = None
    if cfg.heads == "sibling":
        score = ctx.conv(feats["m3"], "det.score")
        fused = fuse_detection(score, feats["m2"], ctx)
        det = ad.softmax_channels(ad.conv2d_transpose(fused, ctx.p["det.up2.w"], stride=2))

    c = feats["m3"]
    for i in range(n):
        c = residual_block(c, ctx, f"m4.b{i}", downsample=False)
    feats["m4"] = c
    cls = ad.softmax_channels(ad.conv2d_transpose(ctx.conv(c, "cls.score"), ctx.p["cls.up.w"], stride=4))

    if single:
        det = ad.reshape(det, det.shape[1:]) if det is not None else None
        cls = ad.reshape(cls, cls.shape[1:])
    return ForwardOutputs(det_probs=det, cls_cond_probs=cls, features=feats)
