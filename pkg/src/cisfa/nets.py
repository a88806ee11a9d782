"""The four models of the framework: a ResNet-style translator whose encoder
exposes intermediate feature taps, a 4-stage U-Net segmenter whose
downsampling path doubles as the global feature encoder, and two
fully convolutional patch discriminators. Plus the MLP projection heads for
both contrastive spaces.

Conventions (the backbone literature's defaults): instance norm + ReLU in the
translator, instance norm + leaky ReLU (0.2) in the discriminators, batch
norm + ReLU in the segmenter; conv weights drawn from N(0, 0.02), biases zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ShapeError

DEFAULT_TAPS = ("input", "down1", "down2", "res1", "res_last")


@dataclass
class GeneratorSpec:
    base_channels: int = 16                 # paper scale uses 64
    n_resblocks: int = 4                    # paper scale uses 9
    in_channels: int = 1
    feature_layers: tuple = DEFAULT_TAPS


@dataclass
class SegmenterSpec:
    stages: int = 4
    base_channels: int = 16
    out_channels: int = 3                   # classes + background


@dataclass
class DiscriminatorSpec:
    layers: int = 3
    in_channels: int = 1                    # C+1 for the mask discriminator
    base_channels: int = 16


@dataclass
class ProjectionHeadSpec:
    out_dim: int = 128
    hidden_dim: int = 256
    depth: int = 2


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Two stride-2 downsampling convs, n residual blocks, two transpose
    convs back to the input size, plus a global input->output skip so the
    freshly initialized translator starts near the identity (the downstream
    segmenter then always sees images aligned with the source labels while
    the translation drifts toward the target domain).

    ``forward_with_features`` returns the translation together with encoder
    feature maps at the requested taps; the same encoder weights serve the
    input and its translation."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        self.down1 = nn.Sequential(nn.Conv2d(spec.in_channels, b, 3, stride=2, padding=1),
                                   nn.InstanceNorm2d(b), nn.ReLU(inplace=True))
        self.down2 = nn.Sequential(nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
                                   nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True))
        self.resblocks = nn.ModuleList(ResBlock(2 * b) for _ in range(spec.n_resblocks))
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(b), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(b, b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(b), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(b, spec.in_channels, 3, padding=1)
        init_weights(self)

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected B x {self.spec.in_channels} x H x W, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"H and W must be divisible by 4, got {tuple(x.shape[2:])}")

    def _resolve_tap(self, tap: str) -> str:
        if tap == "res_last":
            return f"res{self.spec.n_resblocks}"
        return tap

    def encode(self, x, taps=None) -> dict:
        """Run the encoder only; returns {tap: B x c_l x h_l x w_l}."""
        self._check(x)
        taps = set(self._resolve_tap(t) for t in (taps or self.spec.feature_layers))
        feats = {}
        if "input" in taps:
            feats["input"] = x
        h = self.down1(x)
        if "down1" in taps:
            feats["down1"] = h
        h = self.down2(h)
        if "down2" in taps:
            feats["down2"] = h
        for i, block in enumerate(self.resblocks, start=1):
            h = block(h)
            if f"res{i}" in taps:
                feats[f"res{i}"] = h
        missing = taps - set(feats)
        if missing:
            raise ShapeError(f"unknown taps {sorted(missing)}")
        feats["_bottleneck"] = h
        return feats

    def forward_with_features(self, x, taps=None):
        feats = self.encode(x, taps)
        h = feats.pop("_bottleneck")
        h = self.up1(h)
        h = self.up2(h)
        return x + self.head(h), feats

    def forward(self, x):
        out, _ = self.forward_with_features(x, taps=())
        return out


def generator_param_count(spec: GeneratorSpec) -> int:
    """Closed-form trainable parameter count; guards architecture drift."""
    b, c_in, n = spec.base_channels, spec.in_channels, spec.n_resblocks
    conv = lambda ci, co, k: co * ci * k * k + co
    count = conv(c_in, b, 3) + conv(b, 2 * b, 3)            # down1, down2
    count += n * 2 * conv(2 * b, 2 * b, 3)                  # resblocks
    count += conv(2 * b, b, 3) + conv(b, b, 3)              # up1, up2 (transpose)
    count += conv(b, c_in, 3)                               # output head
    return count


class DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.body(x)


class Segmenter(nn.Module):
    """U-Net with ``stages`` resolution stages and mirror skip connections.
    Inputs whose sides are not divisible by 2**stages are padded internally
    and the logits cropped back."""

    def __init__(self, spec: SegmenterSpec):
        super().__init__()
        self.spec = spec
        b, s = spec.base_channels, spec.stages
        chans = [b * 2 ** i for i in range(s)]              # encoder stage widths
        self.enc = nn.ModuleList()
        c_prev = 1
        for c in chans:
            self.enc.append(DoubleConv(c_prev, c))
            c_prev = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = DoubleConv(chans[-1], chans[-1] * 2)
        self.upconvs = nn.ModuleList()
        self.dec = nn.ModuleList()
        c = chans[-1] * 2
        for skip_c in reversed(chans):
            self.upconvs.append(nn.ConvTranspose2d(c, skip_c, 2, stride=2))
            self.dec.append(DoubleConv(2 * skip_c, skip_c))
            c = skip_c
        self.head = nn.Conv2d(chans[0], spec.out_channels, 1)
        init_weights(self)

    def _pad(self, x):
        mult = 2 ** self.spec.stages
        h, w = x.shape[2], x.shape[3]
        ph = (mult - h % mult) % mult
        pw = (mult - w % mult) % mult
        if ph or pw:
            x = nn.functional.pad(x, (0, pw, 0, ph))
        return x, h, w

    def _encode(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected B x 1 x H x W, got {tuple(x.shape)}")
        x, h, w = self._pad(x)
        skips = []
        for enc in self.enc:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        return self.bottleneck(x), skips, (h, w)

    def forward(self, x):
        h, skips, (orig_h, orig_w) = self._encode(x)
        for upconv, dec, skip in zip(self.upconvs, self.dec, reversed(skips)):
            h = upconv(h)
            h = dec(torch.cat([h, skip], dim=1))
        logits = self.head(h)
        return logits[:, :, :orig_h, :orig_w]

    def global_feature(self, x):
        """Spatially pooled bottleneck of the downsampling path, B x d."""
        h, _, _ = self._encode(x)
        return h.mean(dim=(2, 3))

    @property
    def global_feature_dim(self) -> int:
        return self.spec.base_channels * 2 ** self.spec.stages


def segmenter_param_count(spec: SegmenterSpec) -> int:
    b, s, out = spec.base_channels, spec.stages, spec.out_channels
    conv = lambda ci, co, k: co * ci * k * k + co
    bn = lambda c: 2 * c
    double = lambda ci, co: conv(ci, co, 3) + bn(co) + conv(co, co, 3) + bn(co)
    chans = [b * 2 ** i for i in range(s)]
    count = 0
    c_prev = 1
    for c in chans:
        count += double(c_prev, c)
        c_prev = c
    count += double(chans[-1], chans[-1] * 2)
    c = chans[-1] * 2
    for skip_c in reversed(chans):
        count += conv(c, skip_c, 2)                         # transpose conv
        count += double(2 * skip_c, skip_c)
        c = skip_c
    count += conv(chans[0], out, 1)
    return count


class Discriminator(nn.Module):
    """Fully convolutional patch critic: ``layers`` stride-2 convs followed
    by a size-preserving 1-channel score head. Raw scores, no activation.

    Batch norm rather than instance norm: instance norm strips exactly the
    per-image intensity statistics that separate the modalities, which stalls
    the translator on intensity-dominated domain gaps."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        body = [nn.Conv2d(spec.in_channels, b, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True)]
        c = b
        for _ in range(spec.layers - 1):
            body += [nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
                     nn.BatchNorm2d(2 * c), nn.LeakyReLU(0.2, inplace=True)]
            c *= 2
        body.append(nn.Conv2d(c, 1, 3, padding=1))
        self.body = nn.Sequential(*body)
        init_weights(self)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected B x {self.spec.in_channels} x H x W, got {tuple(x.shape)}")
        return self.body(x)


def discriminator_param_count(spec: DiscriminatorSpec) -> int:
    b, c_in = spec.base_channels, spec.in_channels
    conv = lambda ci, co, k: co * ci * k * k + co
    count = conv(c_in, b, 4)
    c = b
    for _ in range(spec.layers - 1):
        count += conv(c, 2 * c, 4) + 2 * (2 * c)        # conv + batch norm affine
        c *= 2
    count += conv(c, 1, 3)
    return count


class ProjectionHead(nn.Module):
    """Two-layer MLP into the contrastive space (normalization is applied by
    the caller)."""

    def __init__(self, in_dim: int, spec: ProjectionHeadSpec):
        super().__init__()
        layers = []
        d = in_dim
        for _ in range(spec.depth - 1):
            layers += [nn.Linear(d, spec.hidden_dim), nn.ReLU(inplace=True)]
            d = spec.hidden_dim
        layers.append(nn.Linear(d, spec.out_dim))
        self.body = nn.Sequential(*layers)
        self.in_dim = in_dim
        init_weights(self)

    def forward(self, x):
        return self.body(x)


def projection_head_param_count(in_dim: int, spec: ProjectionHeadSpec) -> int:
    count, d = 0, in_dim
    for _ in range(spec.depth - 1):
        count += spec.hidden_dim * d + spec.hidden_dim
        d = spec.hidden_dim
    return count + spec.out_dim * d + spec.out_dim


class PatchHeads(nn.Module):
    """One independent projection head per tapped layer, created lazily on
    the first forward (input dims depend on the tap shapes) and fixed
    afterwards."""

    def __init__(self, spec: ProjectionHeadSpec):
        super().__init__()
        self.spec = spec
        self.heads = nn.ModuleDict()

    def head_for(self, tap: str, channels: int) -> ProjectionHead:
        key = tap.replace(".", "_")
        if key not in self.heads:
            self.heads[key] = ProjectionHead(channels, self.spec)
        head = self.heads[key]
        if head.in_dim != channels:
            raise ShapeError(f"tap {tap}: head built for {head.in_dim} channels, got {channels}")
        return head

    def materialize(self, feats: dict) -> None:
        for tap, f in feats.items():
            self.head_for(tap, f.shape[1])
