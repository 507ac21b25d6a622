"""Separator architectures: shared encoder, generation branches, ratio head, discriminators.

Four variants:

* ``B1``   encoder + transmission/reflection decoders.
* ``B2``   adds a reconstruction decoder; the first three decoder layers are
  one shared block used by every generation branch.
* ``B3``   B2 plus a scalar content-ratio head used by the content loss.
* ``MASK`` B2 plus a confidence-mask decoder (weak supervision).

Tensors are NCHW. At the nominal 128x128 input the encoder yields features at
64/32/16/8/4 pixels and a 4x4x128 bottleneck; every decoder upsamples back to
128x128 with U-net skips from the encoder at 8, 16, 32 and 64 pixels.
``width_div`` divides every hidden channel count, and ``image_size`` may be any
multiple of 32, for reduced models used in checks and tests.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

ENCODER_CHANNELS = (32, 64, 128, 256, 256)
BOTTLENECK_CHANNELS = 128
DECODER_CHANNELS = (256, 256, 128, 64, 32)
KERNEL = 5
LRELU_SLOPE = 0.2
BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch
INIT_STD = 0.02
SHARED_LAYERS = 3
NUM_STAGES = 5


class Variant(enum.Enum):
    B1 = "b1"
    B2 = "b2"
    B3 = "b3"
    MASK = "mask"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as exc:
            raise ValueError(f"unknown variant {value!r}; valid: b1, b2, b3, mask") from exc


BRANCHES = {
    Variant.B1: ("t", "r"),
    Variant.B2: ("t", "r", "y"),
    Variant.B3: ("t", "r", "y"),
    Variant.MASK: ("t", "r", "y", "m"),
}


class Op(enum.Enum):
    CONV = "conv"
    FCONV = "fconv"


class Activation(enum.Enum):
    LRELU = "lrelu"
    RELU = "relu"
    SIGMOID = "sigmoid"
    NONE = "none"


@dataclass(frozen=True)
class LayerSpec:
    op: Op
    in_channels: int
    out_channels: int
    kernel: int
    stride: Fraction
    pad: int
    batch_norm: bool
    activation: Activation

    def __post_init__(self):
        if self.op is Op.CONV and self.stride not in (1, 2):
            raise ValueError(f"conv stride must be 1 or 2, got {self.stride}")
        if self.op is Op.FCONV and self.stride != Fraction(1, 2):
            raise ValueError(f"fractional-stride conv must use stride 1/2, got {self.stride}")


def _div(c, width_div):
    if c % width_div:
        raise ValueError(f"width_div {width_div} does not divide channel count {c}")
    return c // width_div


def encoder_specs(width_div=1, in_channels=3, head_channels=None, discriminator=False):
    """Layer table for the encoder (``discriminator=False``) or a discriminator."""
    chans = [_div(c, width_div) for c in ENCODER_CHANNELS]
    specs = []
    prev = in_channels
    for i, c in enumerate(chans):
        specs.append(LayerSpec(Op.CONV, prev, c, KERNEL, Fraction(2), 2,
                               discriminator and i > 0, Activation.LRELU))
        prev = c
    if head_channels is None:
        head_channels = 1 if discriminator else _div(BOTTLENECK_CHANNELS, width_div)
    specs.append(LayerSpec(Op.CONV, prev, head_channels, 1, Fraction(1), 0, False,
                           Activation.SIGMOID if discriminator else Activation.NONE))
    return specs


def decoder_specs(width_div=1, out_channels=3):
    """Layer table for one generation branch; skip channels are folded into inputs."""
    enc = [_div(c, width_div) for c in ENCODER_CHANNELS]
    dec = [_div(c, width_div) for c in DECODER_CHANNELS]
    bottleneck = _div(BOTTLENECK_CHANNELS, width_div)
    specs = [LayerSpec(Op.CONV, bottleneck, dec[0], 1, Fraction(1), 0, True, Activation.RELU)]
    # Stage inputs: previous output, concatenated with f_4, f_3, f_2, f_1 from stage 2 on.
    skips = [0, enc[3], enc[2], enc[1], enc[0]]
    outs = dec[1:] + [out_channels]
    prev = dec[0]
    for stage, (skip, out) in enumerate(zip(skips, outs)):
        last = stage == NUM_STAGES - 1
        specs.append(LayerSpec(Op.FCONV, prev + skip, out, KERNEL, Fraction(1, 2), 2,
                               not last, Activation.SIGMOID if last else Activation.RELU))
        prev = out
    return specs


class Block(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        bias = not spec.batch_norm
        if spec.op is Op.CONV:
            self.conv = nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel,
                                  stride=int(spec.stride), padding=spec.pad, bias=bias)
        else:
            self.conv = nn.ConvTranspose2d(spec.in_channels, spec.out_channels, spec.kernel,
                                           stride=2, padding=spec.pad, output_padding=1,
                                           bias=bias)
        self.bn = nn.BatchNorm2d(spec.out_channels, momentum=BN_MOMENTUM) if spec.batch_norm else None

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        act = self.spec.activation
        if act is Activation.LRELU:
            return nn.functional.leaky_relu(x, LRELU_SLOPE)
        if act is Activation.RELU:
            return torch.relu(x)
        if act is Activation.SIGMOID:
            return torch.sigmoid(x)
        return x


@dataclass
class EncoderOutput:
    features: list  # f_1..f_5
    bottleneck: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, specs):
        super().__init__()
        self.blocks = nn.ModuleList(Block(s) for s in specs)

    def forward(self, x):
        feats = []
        for block in self.blocks[:-1]:
            x = block(x)
            feats.append(x)
        return EncoderOutput(feats, self.blocks[-1](x))


class Discriminator(nn.Module):
    def __init__(self, specs):
        super().__init__()
        self.blocks = nn.ModuleList(Block(s) for s in specs)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class Decoder(nn.Module):
    """Six-layer upsampling branch; ``blocks[:SHARED_LAYERS]`` may be shared."""

    def __init__(self, blocks):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)

    def trunk(self, enc):
        f = enc.features
        h = self.blocks[0](enc.bottleneck)
        h = self.blocks[1](h)
        return self.blocks[2](torch.cat([h, f[3]], dim=1))

    def head(self, h, enc):
        f = enc.features
        h = self.blocks[3](torch.cat([h, f[2]], dim=1))
        h = self.blocks[4](torch.cat([h, f[1]], dim=1))
        return self.blocks[5](torch.cat([h, f[0]], dim=1))

    def forward(self, enc):
        return self.head(self.trunk(enc), enc)


class SeparatorModel(nn.Module):
    """Parameters and wiring for one architecture variant.

    Attributes mirror the architecture: ``encoder``, ``decoders`` (keyed by
    branch ``t``/``r``/``y``/``m``), ``ratio`` (B3 only) and ``discriminators``
    (keyed ``t``/``r``). Discriminators see ``cat(y, x)`` when ``conditional``,
    which defaults to True for the supervised variants and False for MASK.
    """

    def __init__(self, variant, width_div=1, image_size=128, conditional=None):
        super().__init__()
        variant = Variant.parse(variant)
        if image_size % 32 or image_size < 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {image_size}")
        if conditional is None:
            conditional = variant is not Variant.MASK
        self.variant = variant
        self.width_div = int(width_div)
        self.image_size = int(image_size)
        self.conditional = bool(conditional)

        self.encoder = Encoder(encoder_specs(width_div))
        shared = None
        decoders = {}
        for branch in BRANCHES[variant]:
            blocks = [Block(s) for s in decoder_specs(width_div, 1 if branch == "m" else 3)]
            if variant is not Variant.B1:
                if shared is None:
                    shared = blocks[:SHARED_LAYERS]
                blocks[:SHARED_LAYERS] = shared
            decoders[branch] = Decoder(blocks)
        self.decoders = nn.ModuleDict(decoders)
        self.ratio = (nn.Linear(_div(BOTTLENECK_CHANNELS, width_div), 1)
                      if variant is Variant.B3 else None)
        d_in = 6 if self.conditional else 3
        self.discriminators = nn.ModuleDict({
            b: Discriminator(encoder_specs(width_div, in_channels=d_in, discriminator=True))
            for b in ("t", "r")
        })

    @property
    def branches(self):
        return BRANCHES[self.variant]

    @property
    def shares_trunk(self):
        return self.variant is not Variant.B1

    def config(self):
        return {"variant": self.variant.value, "width_div": self.width_div,
                "image_size": self.image_size, "conditional": self.conditional}

    def sharing_map(self):
        """Map each aliased parameter/buffer name to its canonical (first) name."""
        canonical = {}
        aliases = {}
        tensors = list(self.named_parameters(remove_duplicate=False))
        tensors += list(self.named_buffers(remove_duplicate=False))
        for name, t in tensors:
            key = id(t)
            if key in canonical:
                aliases[name] = canonical[key]
            else:
                canonical[key] = name
        return aliases

    def generator_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("discriminators.")]

    def discriminator_parameters(self):
        return list(self.discriminators.parameters())

    def mask_parameters(self):
        """Parameters owned by the mask branch alone (its unshared layers)."""
        if "m" not in self.decoders:
            return []
        return [p for b in self.decoders["m"].blocks[SHARED_LAYERS:] for p in b.parameters()]

    def main_generator_parameters(self):
        """Generator parameters excluding the mask branch's private layers."""
        mask_ids = {id(p) for p in self.mask_parameters()}
        return [p for p in self.generator_parameters() if id(p) not in mask_ids]


def init_model(variant, rng, width_div=1, image_size=128, conditional=None,
               dtype=torch.float32):
    """Build a model with deterministic N(0, 0.02) weights drawn from ``rng``.

    Batch-norm scales start at 1, every bias and offset at 0. Parameters are
    drawn in ``named_parameters`` order, aliases once.
    """
    m = SeparatorModel(variant, width_div, image_size, conditional)
    m.to(dtype)
    bn_params = set()
    for mod in m.modules():
        if isinstance(mod, nn.BatchNorm2d):
            bn_params.add(id(mod.weight))
    with torch.no_grad():
        for name, p in m.named_parameters():
            if id(p) in bn_params:
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                draw = rng.normal(0.0, INIT_STD, size=tuple(p.shape))
                p.copy_(torch.from_numpy(draw))
    return m


def count_parameters(m):
    return sum(p.numel() for p in m.parameters())


def _check_batch(m, x, channels, name):
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    s = m.image_size
    if x.ndim != 4 or x.shape[1] != channels or x.shape[2] != s or x.shape[3] != s:
        raise ValueError(f"{name} must have shape (N, {channels}, {s}, {s}), got {tuple(x.shape)}")


def encode(m, y):
    _check_batch(m, y, 3, "y")
    return m.encoder(y)


def decode(m, branch, enc):
    if branch not in m.decoders:
        raise ValueError(f"branch {branch!r} is not active for variant {m.variant.name}")
    return m.decoders[branch](enc)


def ratio_head(m, enc):
    """Content ratio w_y per sample: sigmoid(affine(global-average-pool(bottleneck)))."""
    if m.ratio is None:
        raise ValueError(f"ratio head exists only for B3, not {m.variant.name}")
    pooled = enc.bottleneck.mean(dim=(2, 3))
    return torch.sigmoid(m.ratio(pooled)).squeeze(1)


def discriminate(m, which, x, cond=None):
    """Patch scores in (0, 1) from discriminator ``which`` (``"t"`` or ``"r"``)."""
    if which not in m.discriminators:
        raise ValueError(f"unknown discriminator {which!r}")
    _check_batch(m, x, 3, "x")
    if m.conditional:
        if cond is None:
            raise ValueError("conditional discriminator needs the observed image")
        _check_batch(m, cond, 3, "cond")
        if cond.shape[0] != x.shape[0]:
            raise ValueError("x and cond batch sizes differ")
        x = torch.cat([cond, x], dim=1)
    elif cond is not None:
        raise ValueError("unconditional discriminator takes no conditioning image")
    return m.discriminators[which](x)


def forward(m, y):
    """Run the encoder once and every active branch; also return the encoding."""
    enc = encode(m, y)
    out = {}
    if m.shares_trunk:
        h = m.decoders["t"].trunk(enc)
        for b in m.branches:
            out[b] = m.decoders[b].head(h, enc)
    else:
        for b in m.branches:
            out[b] = m.decoders[b](enc)
    result = {"t_hat": out["t"], "r_hat": out["r"]}
    if "y" in out:
        result["y_hat"] = out["y"]
    if m.variant is Variant.B3:
        result["w_y"] = ratio_head(m, enc)
    if "m" in out:
        mask = out["m"]
        result["mask"] = mask
        result["g_mt"] = mask * out["t"]
        result["g_mr"] = (1.0 - mask) * out["r"]
    return result, enc


def separate(m, y):
    return forward(m, y)[0]


def frozen_encoder(m):
    """Feature extractor using a detached snapshot of the current encoder weights.

    Used by the content and feature-consistency losses: gradients flow through
    the images being compared, not into the extractor.
    """
    params = {k: v.detach().clone() for k, v in m.encoder.named_parameters()}
    buffers = {k: v.detach().clone() for k, v in m.encoder.named_buffers()}
    state = {**params, **buffers}

    def features(x):
        return functional_call(m.encoder, state, (x,)).features

    return features


def images_to_tensor(images, dtype=torch.float32):
    """(N, H, W, C) or (H, W, C) numpy images -> (N, C, H, W) tensor."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_images(x):
    """(N, C, H, W) tensor -> (N, H, W, C) float64 numpy array."""
    return x.detach().to(torch.float64).cpu().numpy().transpose(0, 2, 3, 1).copy()
