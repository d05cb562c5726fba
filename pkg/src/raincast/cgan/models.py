"""Generator, discriminator, and the fixed perceptual feature stack.

The generator is a U-Net: stride-2 conv encoder (instance norm + LeakyReLU,
none on the first block), a bottleneck of 3x3 dilated convolutions at the
deepest resolution, and a mirrored transposed-conv decoder with skip
concatenations, closed by a tanh layer. The discriminator is a PatchGAN
over the channel-concatenated (condition, candidate) pair: stride-2 blocks
with widths rising to the last entry of ``disc_widths`` and a 1x1 projection
to a logit patch map, whose mean doubles as the scalar realness score.

Network weights draw from a seeded N(0, 0.02^2); the perceptual extractor
draws once from a variance-preserving normal (std 1/sqrt(fan_in)) and is
never trained.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from .layers import Conv2d, ConvTranspose2d, InstanceNorm, LeakyReLU, Tanh


class _Block:
    """conv (or tconv) -> optional instance norm -> LeakyReLU."""

    def __init__(self, conv, norm: bool, slope: float):
        self.conv = conv
        self.norm = InstanceNorm() if norm else None
        self.act = LeakyReLU(slope)

    def forward(self, x):
        y, c_conv = self.conv.forward(x)
        c_norm = None
        if self.norm is not None:
            y, c_norm = self.norm.forward(y)
        y, c_act = self.act.forward(y)
        return y, (c_conv, c_norm, c_act)

    def backward(self, dy, cache):
        c_conv, c_norm, c_act = cache
        dy = self.act.backward(dy, c_act)
        if self.norm is not None:
            dy = self.norm.backward(dy, c_norm)
        return self.conv.backward(dy, c_conv)


class _ParamMixin:
    """Named parameter/gradient access over a {name: conv-layer} dict."""

    def layer_map(self) -> dict:
        raise NotImplementedError

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layer_map().items():
            out[f"{name}.w"] = layer.w
            out[f"{name}.b"] = layer.b
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layer_map().items():
            out[f"{name}.w"] = layer.gw
            out[f"{name}.b"] = layer.gb
        return out

    def zero_grads(self) -> None:
        for layer in self.layer_map().values():
            layer.gw[...] = 0.0
            layer.gb[...] = 0.0

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        own = self.named_params()
        for name, value in params.items():
            if name not in own:
                raise ShapeMismatch(f"unknown parameter {name!r}")
            if own[name].shape != value.shape:
                raise ShapeMismatch(
                    f"parameter {name!r}: expected shape {own[name].shape}, got {value.shape}"
                )
            own[name][...] = value


class Generator(_ParamMixin):
    def __init__(self, widths: tuple[int, ...] = (64, 128, 256, 512),
                 dilations: tuple[int, ...] = (2, 4), in_ch: int = 1, out_ch: int = 1,
                 slope: float = 0.2, *, rng: np.random.Generator):
        depth = len(widths)
        if depth < 2:
            raise ValueError("generator needs at least 2 encoder widths")
        self.widths = tuple(widths)
        self.depth = depth
        self.in_ch, self.out_ch = in_ch, out_ch
        self.enc = [
            _Block(Conv2d(in_ch if i == 0 else widths[i - 1], widths[i], 4, 2, 1, rng=rng),
                   norm=i > 0, slope=slope)
            for i in range(depth)
        ]
        self.bott = [
            _Block(Conv2d(widths[-1], widths[-1], 3, 1, pad=d, dilation=d, rng=rng),
                   norm=True, slope=slope)
            for d in dilations
        ]
        self.dec = []
        for j in range(depth - 1):
            src = widths[depth - 1 - j] * (1 if j == 0 else 2)
            self.dec.append(_Block(ConvTranspose2d(src, widths[depth - 2 - j], 4, 2, 1, rng=rng),
                                   norm=True, slope=slope))
        self.final = ConvTranspose2d(2 * widths[0], out_ch, 4, 2, 1, rng=rng)
        self.tanh = Tanh()

    def layer_map(self):
        out = {f"enc{i}": b.conv for i, b in enumerate(self.enc)}
        out.update({f"bott{i}": b.conv for i, b in enumerate(self.bott)})
        out.update({f"dec{j}": b.conv for j, b in enumerate(self.dec)})
        out["final"] = self.final
        return out

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"generator expects (N, {self.in_ch}, H, W), got {x.shape}")
        div = 1 << self.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeMismatch(
                f"spatial size {x.shape[2]}x{x.shape[3]} not divisible by 2^{self.depth}"
            )

    def forward(self, x: np.ndarray):
        self.check_input(x)
        caches = {}
        skips = []
        h = x
        for i, blk in enumerate(self.enc):
            h, caches[f"enc{i}"] = blk.forward(h)
            skips.append(h)
        for i, blk in enumerate(self.bott):
            h, caches[f"bott{i}"] = blk.forward(h)
        for j, blk in enumerate(self.dec):
            h, caches[f"dec{j}"] = blk.forward(h)
            h = np.concatenate([h, skips[self.depth - 2 - j]], axis=1)
        h, caches["final"] = self.final.forward(h)
        y, caches["tanh"] = self.tanh.forward(h)
        return y, caches

    def backward(self, dy: np.ndarray, caches) -> np.ndarray:
        dh = self.tanh.backward(dy, caches["tanh"])
        dh = self.final.backward(dh, caches["final"])
        dskips = [None] * self.depth
        for j in reversed(range(len(self.dec))):
            main = self.widths[self.depth - 2 - j]
            dskips[self.depth - 2 - j] = dh[:, main:]
            dh = self.dec[j].backward(np.ascontiguousarray(dh[:, :main]), caches[f"dec{j}"])
        for i in reversed(range(len(self.bott))):
            dh = self.bott[i].backward(dh, caches[f"bott{i}"])
        for i in reversed(range(self.depth)):
            if dskips[i] is not None:
                dh = dh + dskips[i]
            dh = self.enc[i].backward(dh, caches[f"enc{i}"])
        return dh


class Discriminator(_ParamMixin):
    def __init__(self, widths: tuple[int, ...] = (64, 128, 256, 512),
                 cond_ch: int = 1, cand_ch: int = 1, slope: float = 0.2,
                 *, rng: np.random.Generator):
        self.widths = tuple(widths)
        self.depth = len(widths)
        self.cond_ch, self.cand_ch = cond_ch, cand_ch
        in_ch = cond_ch + cand_ch
        self.blocks = [
            _Block(Conv2d(in_ch if i == 0 else widths[i - 1], widths[i], 4, 2, 1, rng=rng),
                   norm=i > 0, slope=slope)
            for i in range(self.depth)
        ]
        self.proj = Conv2d(widths[-1], 1, 1, rng=rng)

    def layer_map(self):
        out = {f"blk{i}": b.conv for i, b in enumerate(self.blocks)}
        out["proj"] = self.proj
        return out

    def forward(self, cond: np.ndarray, cand: np.ndarray):
        if cond.shape[0] != cand.shape[0] or cond.shape[2:] != cand.shape[2:]:
            raise ShapeMismatch(f"condition {cond.shape} vs candidate {cand.shape}")
        div = 1 << self.depth
        if cond.shape[2] % div or cond.shape[3] % div:
            raise ShapeMismatch(
                f"spatial size {cond.shape[2]}x{cond.shape[3]} not divisible by 2^{self.depth}"
            )
        h = np.concatenate([cond, cand], axis=1)
        caches = {}
        for i, blk in enumerate(self.blocks):
            h, caches[f"blk{i}"] = blk.forward(h)
        patch, caches["proj"] = self.proj.forward(h)
        return patch, caches

    def backward(self, dpatch: np.ndarray, caches):
        dh = self.proj.backward(dpatch, caches["proj"])
        for i in reversed(range(self.depth)):
            dh = self.blocks[i].backward(dh, caches[f"blk{i}"])
        dcond = dh[:, :self.cond_ch]
        dcand = dh[:, self.cond_ch:]
        return dcond, dcand


class PerceptualExtractor:
    """Fixed random convolutional stages standing in for a pretrained backbone.

    Three stride-2 stages of widths (16, 32, 64) by default, LeakyReLU
    between them, weights drawn once from N(0, 1/fan_in) so activation
    magnitudes stay comparable to the input. Deterministic given the seed.
    """

    def __init__(self, seed: int, widths: tuple[int, ...] = (16, 32, 64),
                 in_ch: int = 1, slope: float = 0.2):
        self.seed = int(seed)
        self.widths = tuple(widths)
        rng = np.random.default_rng(self.seed)
        self.convs = []
        prev = in_ch
        for w in widths:
            fan_in = prev * 4 * 4
            self.convs.append(Conv2d(prev, w, 4, 2, 1, rng=rng, w_std=1.0 / np.sqrt(fan_in)))
            prev = w
        self.act = LeakyReLU(slope)

    def forward(self, x: np.ndarray):
        feats, caches = [], []
        h = x
        for conv in self.convs:
            h, c_conv = conv.forward(h)
            h, c_act = self.act.forward(h)
            feats.append(h)
            caches.append((c_conv, c_act))
        return feats, caches

    def backward(self, dfeats: list[np.ndarray], caches) -> np.ndarray:
        """Propagate per-stage gradients back to the input (weights stay fixed)."""
        dh = None
        for i in reversed(range(len(self.convs))):
            c_conv, c_act = caches[i]
            grad = dfeats[i] if dh is None else dfeats[i] + dh
            grad = self.act.backward(grad, c_act)
            dh = self.convs[i].backward(grad, c_conv)
        return dh


def generator_forward(gen: Generator, x: np.ndarray) -> np.ndarray:
    """Inference-only generator pass on a (N, 1, H, W) batch."""
    y, _ = gen.forward(x)
    return y


def discriminator_forward(disc: Discriminator, cond: np.ndarray,
                          cand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Patch logit map plus its per-sample mean (the scalar realness score)."""
    patch, _ = disc.forward(cond, cand)
    return patch, patch.mean(axis=(1, 2, 3))


def perceptual_features(x: np.ndarray, extractor: PerceptualExtractor) -> list[np.ndarray]:
    """Multi-stage activations of the fixed extractor for a (N, C, H, W) batch."""
    feats, _ = extractor.forward(x)
    return feats
