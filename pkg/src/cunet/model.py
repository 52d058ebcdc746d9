"""Cascaded U-Net: a whole-tumor U-Net feeding a substructure U-Net, with deep supervision.

Channel widths double per level starting at ``base_channels``. Level ``k`` lives at
resolution ``1 / 2**k`` of the input. Every U-Net has ``depth`` pooling steps, so
it exposes ``depth`` auxiliary heads, one on the input of each decoder stage
(the bottleneck output and the decoder outputs at levels ``depth-1 .. 1``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractViolation, NumericError
from .optim import ParamSet

# Output channel of branch 2 -> label value. Channel 0 is background.
SUBSTRUCTURE_LABELS = (1, 2, 4)


@dataclass
class CUNetConfig:
    in_channels: int = 4
    base_channels: int = 16
    depth: int = 4
    branch1_classes: int = 2
    branch2_classes: int = 4
    seed: int = 0
    between_net: bool = True

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        for key in ("in_channels", "base_channels", "branch1_classes", "branch2_classes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.branch2_classes != 1 + len(SUBSTRUCTURE_LABELS):
            raise ConfigError("branch2 needs a background channel plus one per substructure label")
        return self

    @property
    def aux_heads(self):
        return 2 * self.depth

    def widths(self):
        return [self.base_channels * 2**k for k in range(self.depth + 1)]

    def save(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            raw = json.load(f)
        # "classes" is accepted as shorthand for [branch1, branch2].
        if "classes" in raw:
            raw["branch1_classes"], raw["branch2_classes"] = raw.pop("classes")
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw).validate()


@dataclass
class CascadeOutputs:
    branch1: T.Tensor
    branch2: T.Tensor
    aux: list = field(default_factory=list)

    def all(self):
        return [self.branch1, self.branch2, *self.aux]


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv:
    def __init__(self, params, name, in_c, out_c, k, rng, gain=1.0):
        self.padding = k // 2
        self.w = params.add(f"{name}.w", gain * _he(rng, (out_c, in_c, k, k), in_c * k * k))
        self.b = params.add(f"{name}.b", np.zeros(out_c))

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=1, padding=self.padding)


class Up:
    """x2 transposed convolution."""

    def __init__(self, params, name, in_c, out_c, rng):
        self.w = params.add(f"{name}.w", _he(rng, (in_c, out_c, 4, 4), in_c * 4))
        self.b = params.add(f"{name}.b", np.zeros(out_c))

    def __call__(self, x):
        return T.transposed_conv2d(x, self.w, stride=2, bias=self.b)


class ResidualBlock:
    """relu(conv3x3(relu(conv3x3(x))) + shortcut(x)); the shortcut is a 1x1 conv when widths differ.

    The second convolution starts at zero, so without normalization layers the
    activation scale does not compound through the ~20 blocks of the cascade.
    """

    def __init__(self, params, name, in_c, out_c, rng):
        self.conv1 = Conv(params, f"{name}.conv1", in_c, out_c, 3, rng)
        self.conv2 = Conv(params, f"{name}.conv2", out_c, out_c, 3, rng, gain=0.0)
        self.project = Conv(params, f"{name}.project", in_c, out_c, 1, rng) if in_c != out_c else None

    def __call__(self, x):
        h = self.conv2(T.relu(self.conv1(x)))
        shortcut = self.project(x) if self.project is not None else x
        return T.relu(h + shortcut)


def build_residual_block(in_c, out_c, params=None, name="block", seed=0):
    if in_c < 1 or out_c < 1:
        raise ContractViolation("channel counts must be positive")
    params = ParamSet() if params is None else params
    return ResidualBlock(params, name, in_c, out_c, np.random.default_rng(seed))


class AuxHead:
    """``levels`` stacked x2 deconvolutions back to input resolution, then a 1x1 conv and softmax."""

    def __init__(self, params, name, in_c, mid_c, classes, levels, rng):
        self.ups = []
        c = in_c
        for i in range(levels):
            self.ups.append(Up(params, f"{name}.up{i}", c, mid_c, rng))
            c = mid_c
        self.out = Conv(params, f"{name}.out", c, classes, 1, rng)

    def __call__(self, x):
        for up in self.ups:
            x = up(x)
        return T.softmax_channels(self.out(x))


class UNet:
    """One encoder-decoder stage.

    ``bridge_channels[k]``, when given, is the width of an extra feature map
    concatenated onto the input of encoder level ``k``.
    """

    def __init__(self, params, name, in_c, config, classes, rng, bridge_channels=None):
        widths = config.widths()
        depth = config.depth
        self.name = name
        self.depth = depth
        self.encoders = []
        c = in_c
        for k in range(depth):
            extra = bridge_channels[k] if bridge_channels else 0
            self.encoders.append(ResidualBlock(params, f"{name}.enc{k}", c + extra, widths[k], rng))
            c = widths[k]
        self.encoder_in_channels = [blk.conv1.w.shape[1] for blk in self.encoders]
        self.bottleneck = ResidualBlock(params, f"{name}.bottleneck", widths[depth - 1], widths[depth], rng)
        self.ups, self.decoders, self.aux = {}, {}, {}
        for k in reversed(range(depth)):
            self.aux[k + 1] = AuxHead(params, f"{name}.aux{k + 1}", widths[k + 1], config.base_channels, classes, k + 1, rng)
            self.ups[k] = Up(params, f"{name}.up{k}", widths[k + 1], widths[k], rng)
            self.decoders[k] = ResidualBlock(params, f"{name}.dec{k}", 2 * widths[k], widths[k], rng)
        self.head = Conv(params, f"{name}.head", widths[0], classes, 1, rng)

    def __call__(self, x, bridges=None):
        """Returns (branch probabilities, aux probabilities deepest first, decoder features by level)."""
        skips = []
        for k, enc in enumerate(self.encoders):
            if bridges is not None:
                x = T.channel_concat(x, bridges[k])
            x = _finite(enc(x), f"{self.name}.enc{k}")
            skips.append(x)
            x = T.max_pool2(x)
        x = _finite(self.bottleneck(x), f"{self.name}.bottleneck")
        aux, features = [], {}
        for k in reversed(range(self.depth)):
            aux.append(self.aux[k + 1](x))
            x = T.channel_concat(self.ups[k](x), skips[k])
            x = _finite(self.decoders[k](x), f"{self.name}.dec{k}")
            features[k] = x
        branch = _finite(T.softmax_channels(self.head(x)), f"{self.name}.head")
        return branch, aux, features


def _finite(t, where):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activation in layer {where}")
    return t


class CUNet:
    def __init__(self, config):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        self.params = ParamSet()
        widths = config.widths()
        self.unet1 = UNet(self.params, "u1", config.in_channels, config, config.branch1_classes, rng)
        bridges = widths[: config.depth] if config.between_net else None
        self.unet2 = UNet(self.params, "u2", widths[0], config, config.branch2_classes, rng, bridge_channels=bridges)

    def forward(self, x):
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        _check_input(x, self.config)
        b1, aux1, feats1 = self.unet1(x)
        bridges = [feats1[k] for k in range(self.config.depth)] if self.config.between_net else None
        b2, aux2, _ = self.unet2(feats1[0], bridges)
        return CascadeOutputs(b1, b2, aux1 + aux2)

    __call__ = forward


def _check_input(x, config):
    if x.data.ndim != 4 or x.shape[1] != config.in_channels:
        raise ContractViolation(f"expected b x {config.in_channels} x h x w input, got {x.shape}")
    m = 2**config.depth
    if x.shape[2] % m or x.shape[3] % m:
        raise ConfigError(f"spatial extents {x.shape[2:]} must be divisible by 2**depth = {m}")


def build_cunet(config):
    return CUNet(config)


def forward_cascade(model, x):
    return model.forward(x)


def single_unet_parameter_count(config):
    """Parameters of U-Net1 alone, for comparing against the cascade."""
    params = ParamSet()
    UNet(params, "u", config.in_channels, config.validate(), config.branch1_classes, np.random.default_rng(0))
    return params.count()


def fuse_predictions(branch1, branch2, nonbrain_mask):
    """Label map over {0, 1, 2, 4} from branch probabilities and the precomputed non-brain mask.

    Background wherever the mask is set or branch 1 does not pick tumor; elsewhere the
    best of branch 2's substructure channels (its background channel is ignored).
    Ties go to the lower label.
    """
    p1 = branch1.data if isinstance(branch1, T.Tensor) else np.asarray(branch1)
    p2 = branch2.data if isinstance(branch2, T.Tensor) else np.asarray(branch2)
    mask = np.asarray(nonbrain_mask, dtype=bool)
    if p1.ndim == 3:
        p1, p2, mask = p1[None], p2[None], mask[None]
        squeeze = True
    else:
        squeeze = False
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (p1.shape[0],) + mask.shape)
    if p1.shape[0] != p2.shape[0] or p1.shape[2:] != p2.shape[2:] or mask.shape != (p1.shape[0],) + p1.shape[2:]:
        raise ContractViolation(f"shape mismatch: branch1 {p1.shape}, branch2 {p2.shape}, mask {mask.shape}")
    if p2.shape[1] != 1 + len(SUBSTRUCTURE_LABELS):
        raise ContractViolation(f"branch2 must have {1 + len(SUBSTRUCTURE_LABELS)} channels, got {p2.shape[1]}")
    tumor = np.argmax(p1, axis=1) == 1
    sub = np.asarray(SUBSTRUCTURE_LABELS, dtype=np.uint8)[np.argmax(p2[:, 1:], axis=1)]
    labels = np.where(tumor & ~mask, sub, 0).astype(np.uint8)
    return labels[0] if squeeze else labels
