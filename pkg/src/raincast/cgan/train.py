"""Adversarial training: losses, cyclic learning rate, Adam, and the loop.

One training step performs a discriminator update on
L_D = 0.5*(BCE(D(x, y), 1) + BCE(D(x, G(x)), 0)) with the generator output
treated as data, then a generator update on
L_G = adv*BCE(D(x, G(x)), 1) + pixel*L1(G(x), y) + perc*L1(phi(G(x)), phi(y)),
both with the learning rate of the current step. Everything is seeded and
single-threaded-deterministic: two runs with the same seed produce the same
metrics bit for bit.

RNG streams are derived from the config seed: [seed, 0] initialises the
network weights (generator first, then discriminator), [seed, 1] drives the
per-epoch shuffle, and [seed, 2] seeds the perceptual extractor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from ..errors import EmptyDataset, NonFiniteLoss, ShapeMismatch
from .layers import bce_with_logits, l1_mean
from .models import Discriminator, Generator, PerceptualExtractor


@dataclass(frozen=True)
class GanArchitecture:
    """Widths and fixed geometry of both networks.

    Defaults are the full-scale profile (64..512); the desk-scale profile
    used by the acceptance suite swaps in (16, 32, 64, 128). All conv blocks
    are kernel 4 / stride 2 / pad 1; the bottleneck stacks 3-wide dilated
    convolutions at the deepest resolution.
    """

    encoder_widths: tuple[int, ...] = (64, 128, 256, 512)
    bottleneck_dilations: tuple[int, ...] = (2, 4)
    disc_widths: tuple[int, ...] = (64, 128, 256, 512)
    leaky_slope: float = 0.2
    in_channels: int = 1
    out_channels: int = 1
    perceptual_widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if len(self.encoder_widths) < 2:
            raise ValueError("need at least 2 encoder widths")

    @staticmethod
    def desk() -> "GanArchitecture":
        return GanArchitecture(encoder_widths=(16, 32, 64, 128), disc_widths=(16, 32, 64, 128))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lr_max: float = 2e-4
    lr_min: float = 2e-5
    lr_cycle_steps: int = 2000
    lambda_pixel: float = 100.0
    lambda_perceptual: float = 10.0
    lambda_adversarial: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if min(self.lambda_pixel, self.lambda_perceptual, self.lambda_adversarial) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def cyclic_lr(step: int, cfg: TrainConfig) -> float:
    """Triangular schedule: lr_min -> lr_max over half a cycle, back down."""
    half = cfg.lr_cycle_steps / 2.0
    phase = step % cfg.lr_cycle_steps
    frac = phase / half if phase <= half else 2.0 - phase / half
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


class Adam:
    """Adam over a named-parameter dict, updating arrays in place."""

    def __init__(self, beta1: float, beta2: float, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class GeneratorLossTerms:
    total: float
    adversarial: float
    pixel: float
    perceptual: float


def loss_discriminator(d_real_logits: np.ndarray, d_fake_logits: np.ndarray) -> float:
    """0.5 * (BCE(real, 1) + BCE(fake, 0)), averaged over the patch maps."""
    real, _ = bce_with_logits(d_real_logits, 1.0)
    fake, _ = bce_with_logits(d_fake_logits, 0.0)
    return 0.5 * (real + fake)


def perceptual_distance(feats_a: list[np.ndarray], feats_b: list[np.ndarray]
                        ) -> tuple[float, list[np.ndarray]]:
    """Mean |a - b| over all stages' elements, with d/da per stage."""
    total = sum(f.size for f in feats_a)
    dist = sum(float(np.abs(a - b).sum()) for a, b in zip(feats_a, feats_b)) / total
    grads = [np.sign(a - b) / total for a, b in zip(feats_a, feats_b)]
    return dist, grads


def loss_generator(d_fake_logits: np.ndarray, fake: np.ndarray, real: np.ndarray,
                   extractor: PerceptualExtractor, cfg: TrainConfig) -> GeneratorLossTerms:
    """Weighted adversarial + pixel (L1) + perceptual loss with its breakdown."""
    if fake.shape != real.shape:
        raise ShapeMismatch(f"fake {fake.shape} vs real {real.shape}")
    adv, _ = bce_with_logits(d_fake_logits, 1.0)
    pixel, _ = l1_mean(fake, real)
    feats_fake, _ = extractor.forward(fake)
    feats_real, _ = extractor.forward(real)
    perc, _ = perceptual_distance(feats_fake, feats_real)
    total = cfg.lambda_adversarial * adv + cfg.lambda_pixel * pixel + cfg.lambda_perceptual * perc
    return GeneratorLossTerms(total=total, adversarial=adv, pixel=pixel, perceptual=perc)


@dataclass
class GanState:
    """Live training state: both networks, their optimizers, and the step count."""

    generator: Generator
    discriminator: Discriminator
    opt_g: Adam
    opt_d: Adam
    config: TrainConfig
    arch: GanArchitecture
    step: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, cfg: TrainConfig, arch: GanArchitecture) -> "GanState":
        rng = np.random.default_rng([cfg.seed, 0])
        gen = Generator(arch.encoder_widths, arch.bottleneck_dilations,
                        arch.in_channels, arch.out_channels, arch.leaky_slope, rng=rng)
        disc = Discriminator(arch.disc_widths, arch.in_channels, arch.out_channels,
                             arch.leaky_slope, rng=rng)
        return cls(generator=gen, discriminator=disc,
                   opt_g=Adam(cfg.adam_beta1, cfg.adam_beta2),
                   opt_d=Adam(cfg.adam_beta1, cfg.adam_beta2),
                   config=cfg, arch=arch)

    def make_extractor(self) -> PerceptualExtractor:
        seed = int(np.random.default_rng([self.config.seed, 2]).integers(0, 2 ** 31))
        return PerceptualExtractor(seed, self.arch.perceptual_widths,
                                   in_ch=self.arch.out_channels, slope=self.arch.leaky_slope)


def train_step(state: GanState, batch: tuple[np.ndarray, np.ndarray],
               extractor: PerceptualExtractor) -> dict:
    """One alternating update; returns the metrics row for this step.

    The discriminator sees the generator output as data (no gradient flows
    back), then the generator is updated through the refreshed discriminator.
    """
    x, y = batch
    if x.shape != y.shape or x.ndim != 4 or x.shape[0] == 0:
        raise ShapeMismatch(f"bad batch shapes: inputs {x.shape}, targets {y.shape}")
    cfg = state.config
    lr = cyclic_lr(state.step, cfg)

    gen, disc = state.generator, state.discriminator
    fake, gen_caches = gen.forward(x)

    # -- discriminator update (fake detached) --
    disc.zero_grads()
    d_real, real_caches = disc.forward(x, y)
    d_fake, fake_caches = disc.forward(x, fake)
    loss_real, dz_real = bce_with_logits(d_real, 1.0)
    loss_fake, dz_fake = bce_with_logits(d_fake, 0.0)
    l_d = 0.5 * (loss_real + loss_fake)
    disc.backward(0.5 * dz_real, real_caches)
    disc.backward(0.5 * dz_fake, fake_caches)
    if not math.isfinite(l_d):
        raise NonFiniteLoss(f"discriminator loss became {l_d} at step {state.step}")
    state.opt_d.step(disc.named_params(), disc.named_grads(), lr)

    # -- generator update through the updated discriminator --
    gen.zero_grads()
    disc.zero_grads()
    d_fake2, fake2_caches = disc.forward(x, fake)
    adv, dz_adv = bce_with_logits(d_fake2, 1.0)
    pixel, dpix = l1_mean(fake, y)
    feats_fake, feat_caches = extractor.forward(fake)
    feats_real, _ = extractor.forward(y)
    perc, dfeats = perceptual_distance(feats_fake, feats_real)
    l_g = cfg.lambda_adversarial * adv + cfg.lambda_pixel * pixel + cfg.lambda_perceptual * perc
    if not math.isfinite(l_g):
        raise NonFiniteLoss(f"generator loss became {l_g} at step {state.step}")

    dfake = cfg.lambda_pixel * dpix
    if cfg.lambda_adversarial != 0.0:
        _, dcand = disc.backward(cfg.lambda_adversarial * dz_adv, fake2_caches)
        dfake = dfake + dcand
    if cfg.lambda_perceptual != 0.0:
        dfake = dfake + extractor.backward(
            [cfg.lambda_perceptual * g for g in dfeats], feat_caches)
    gen.backward(dfake, gen_caches)
    state.opt_g.step(gen.named_params(), gen.named_grads(), lr)

    state.step += 1
    return {
        "step": state.step,
        "lr": lr,
        "L_D": l_d,
        "L_G": l_g,
        "pixel": pixel,
        "perceptual": perc,
        "adversarial": adv,
    }


def flatten_pairs(samples) -> tuple[np.ndarray, np.ndarray]:
    """Stack SequenceSamples into aligned (radiance, rain) frame arrays.

    Every input radiance frame pairs with the rain frame of the same
    timestamp, which is what the per-frame translator trains on.
    """
    xs, ys = [], []
    for sample in samples:
        for t in range(sample.inputs.n_frames):
            xs.append(sample.inputs.values[t])
            ys.append(sample.input_rain.values[t])
    if not xs:
        raise EmptyDataset("no (radiance, rain) pairs to train on")
    return np.stack(xs), np.stack(ys)


def train(pairs: tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
          arch: GanArchitecture | None = None,
          extractor: PerceptualExtractor | None = None,
          on_epoch=None, on_metrics=None) -> GanState:
    """Run the full loop over (N, 1, H, W) paired arrays.

    Each epoch shuffles with the seeded stream and consumes ceil(N/batch)
    batches, the last one partial. ``on_epoch(state, epoch)`` runs after
    every epoch (checkpointing hook); ``on_metrics(row)`` after every step.
    """
    x, y = pairs
    if len(x) == 0:
        raise EmptyDataset("empty training dataset")
    if x.shape != y.shape:
        raise ShapeMismatch(f"inputs {x.shape} vs targets {y.shape}")

    state = GanState.initialize(cfg, arch or GanArchitecture())
    if extractor is None:
        extractor = state.make_extractor()
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    n = len(x)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            row = train_step(state, (x[idx], y[idx]), extractor)
            if on_metrics is not None:
                on_metrics(row)
        if on_epoch is not None:
            on_epoch(state, epoch)
    return state


def predict(state: GanState, frames: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Translate (T, 1, H, W) radiance frames to rain frames, order kept.

    Frames are processed independently; instance norm sees one sample at a
    time regardless of batching, so results do not depend on batch_size.
    """
    if frames.ndim != 4:
        raise ShapeMismatch(f"expected (T, C, H, W), got {frames.shape}")
    out = np.empty((frames.shape[0], state.arch.out_channels,
                    frames.shape[2], frames.shape[3]))
    for start in range(0, frames.shape[0], batch_size):
        chunk = frames[start:start + batch_size]
        y, _ = state.generator.forward(chunk)
        out[start:start + len(chunk)] = y
    return out


def config_to_dict(cfg: TrainConfig, arch: GanArchitecture) -> dict:
    return {"train": asdict(cfg), "arch": asdict(arch)}


def config_from_dict(blob: dict) -> tuple[TrainConfig, GanArchitecture]:
    train_kwargs = dict(blob["train"])
    arch_kwargs = {k: tuple(v) if isinstance(v, list) else v
                   for k, v in blob["arch"].items()}
    return TrainConfig(**train_kwargs), GanArchitecture(**arch_kwargs)
