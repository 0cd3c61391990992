"""Two-stage ACT-GAN generator, conditioned patch discriminator and losses."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import (
    AotParams,
    CbamParams,
    ConfigError,
    Conv,
    DecoderParams,
    EncoderParams,
    PatchDiscParams,
    decoder_layer,
    encoder_layer,
    named_parameters,
    patch_disc_forward,
)
from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    concat_channels,
    conv2d,
    matmul,
    mean,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softplus,
    square,
    sub,
    transpose,
)

# Generator layer table at full scale: layers 1..7 plus the output column.
FULL_RESOLUTION = 256
LAYER_RESOLUTIONS = (256, 128, 64, 32, 64, 128, 256)
LAYER_CHANNELS = (64, 128, 256, 512, 256, 128, 64)
LAYER_KERNELS = (7, 4, 4, 4, 3, 3, 3)
DISC_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class LayerSpec:
    index: int
    resolution: int
    channels: int
    kernel: int


@dataclass(frozen=True)
class GeneratorConfig:
    base_resolution: int = 64
    channel_scale: float = 0.25
    input_channels: int = 2
    cbam_reduction: int = 4
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_channels not in (2, 3):
            raise ConfigError(f"input_channels must be 2 or 3, got {self.input_channels}")
        if self.base_resolution % 16:
            raise ConfigError(f"base_resolution must be a multiple of 16, got {self.base_resolution}")
        for spec in self.layers():
            if spec.channels % 4 or spec.channels % self.cbam_reduction:
                raise ConfigError(f"layer {spec.index}: {spec.channels} channels incompatible with AOT/CBAM")

    @classmethod
    def full(cls, input_channels: int = 2, seed: int = 0) -> "GeneratorConfig":
        return cls(FULL_RESOLUTION, 1.0, input_channels, 16, seed)

    @classmethod
    def desk(cls, input_channels: int = 2, seed: int = 0) -> "GeneratorConfig":
        return cls(64, 0.25, input_channels, 4, seed)

    def layers(self) -> list[LayerSpec]:
        f = self.base_resolution / FULL_RESOLUTION
        return [
            LayerSpec(i + 1, int(r * f), int(round(c * self.channel_scale)), k)
            for i, (r, c, k) in enumerate(zip(LAYER_RESOLUTIONS, LAYER_CHANNELS, LAYER_KERNELS))
        ]

    def disc_widths(self) -> tuple[int, ...]:
        return tuple(int(round(w * self.channel_scale)) for w in DISC_WIDTHS)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class StageParams:
    encoders: list[EncoderParams]
    decoders: list[DecoderParams]
    head: Conv


@dataclass
class GeneratorWeights:
    stage1: StageParams
    stage2: StageParams

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(named_parameters(self))


def _build_stage(rng, cfg: GeneratorConfig, in_channels: int) -> StageParams:
    dtype = cfg.np_dtype
    specs = cfg.layers()
    encoders = []
    cin = in_channels
    for spec in specs[:4]:
        stride = 1 if spec.index == 1 else 2
        padding = (spec.kernel - 1) // 2 if stride == 1 else 1
        conv = Conv.init(rng, cin, spec.channels, spec.kernel, stride=stride, padding=padding, dtype=dtype)
        encoders.append(
            EncoderParams(
                conv,
                CbamParams.init(rng, spec.channels, cfg.cbam_reduction, dtype),
                AotParams.init(rng, spec.channels, dtype),
            )
        )
        cin = spec.channels
    decoders = []
    # layer 5 has no same-resolution encoder partner; layers 6, 7 take skips from 3, 2
    skip_channels = (0, specs[2].channels, specs[1].channels)
    for spec, extra in zip(specs[4:], skip_channels):
        tconv = Conv.init(
            rng, cin + extra, spec.channels, spec.kernel, stride=2, padding=1, transposed=True, output_padding=1, dtype=dtype
        )
        decoders.append(DecoderParams(tconv))
        cin = spec.channels
    head = Conv.init(rng, cin + specs[0].channels, 1, 3, dtype=dtype)
    return StageParams(encoders, decoders, head)


def init_generator(cfg: GeneratorConfig) -> GeneratorWeights:
    rng = np.random.default_rng(cfg.seed)
    stage1 = _build_stage(rng, cfg, cfg.input_channels)
    stage2 = _build_stage(rng, cfg, cfg.input_channels + 1)
    return GeneratorWeights(stage1, stage2)


def init_discriminator(cfg: GeneratorConfig) -> PatchDiscParams:
    rng = np.random.default_rng(cfg.seed + 7919)
    return PatchDiscParams.init(rng, cfg.input_channels + 1, cfg.disc_widths(), cfg.np_dtype)


def stage_forward(x: Tensor, p: StageParams) -> Tensor:
    """One encoder-decoder pass; returns pre-sigmoid logits."""
    feats = []
    h = x
    for enc in p.encoders:
        h = encoder_layer(h, enc)
        feats.append(h)
    h = decoder_layer(h, None, p.decoders[0])
    h = decoder_layer(h, feats[2], p.decoders[1])
    h = decoder_layer(h, feats[1], p.decoders[2])
    return p.head(concat_channels([h, feats[0]]))


def generator_forward(inputs: Tensor, w: GeneratorWeights, cut_stage_link: bool = False) -> tuple[Tensor, Tensor]:
    """Run both stages; stage 2 sees the inputs plus the stage-1 map.

    ``cut_stage_link`` feeds zeros instead of the stage-1 map (ablation hook).
    """
    expected_cin = w.stage1.encoders[0].conv.weight.shape[1]
    if inputs.ndim != 4 or inputs.shape[1] != expected_cin:
        raise ShapeError(f"generator expects {expected_cin} input channels, got shape {inputs.shape}")
    size = inputs.shape[2]
    if inputs.shape[3] != size or size % 16:
        raise ShapeError(f"generator needs square inputs with side divisible by 16, got {inputs.shape[2:]}")
    stage1 = sigmoid(stage_forward(inputs, w.stage1))
    link = Tensor(np.zeros_like(stage1.data)) if cut_stage_link else stage1
    stage2 = sigmoid(stage_forward(concat_channels([inputs, link]), w.stage2))
    return stage1, stage2


def check_resolution(inputs: Tensor, cfg: GeneratorConfig) -> None:
    if inputs.shape[2:] != (cfg.base_resolution, cfg.base_resolution):
        raise ShapeError(f"model built for {cfg.base_resolution}px maps, got {inputs.shape[2:]}")


def discriminator_forward(condition: Tensor, candidate: Tensor, p: PatchDiscParams) -> Tensor:
    return patch_disc_forward(condition, candidate, p)


# feature pyramid ---------------------------------------------------------

PYRAMID_WIDTHS = (8, 16, 32, 32, 32)
PYRAMID_SEED = 20240229


@dataclass
class FeaturePyramid:
    """Frozen five-stage conv stack; taps after every stage."""

    stages: list[Conv]

    @classmethod
    def build(cls, seed: int = PYRAMID_SEED, widths=PYRAMID_WIDTHS, dtype=np.float32) -> "FeaturePyramid":
        rng = np.random.default_rng(seed)
        stages = []
        cin = 1
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages.append(Conv.init(rng, cin, w, 3, stride=stride, padding=1, dtype=dtype, trainable=False))
            cin = w
        return cls(stages)

    def __call__(self, x: Tensor) -> list[Tensor]:
        taps = []
        h = x
        for conv in self.stages:
            h = relu(conv2d(h, conv.weight, conv.bias, conv.stride, 1, conv.padding))
            taps.append(h)
        return taps


# losses ------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    per: float = 0.1
    sty: float = 250.0
    adv: float = 0.01

    def __post_init__(self):
        if min(self.mse, self.per, self.sty, self.adv) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def _same_shape(pred: Tensor, target: Tensor, what: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{what}: prediction {pred.shape} vs target {target.shape}")


def loss_mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "loss_mse")
    return mean(square(sub(pred, target)))


def _perceptual_from_taps(pa: list[Tensor], pb: list[Tensor]) -> Tensor:
    total = None
    for a, b in zip(pa, pb):
        term = mean(abs_(sub(a, b)))
        total = term if total is None else total + term
    return total


def _style_from_taps(pa: list[Tensor], pb: list[Tensor]) -> Tensor:
    terms = [mean(abs_(sub(gram(a), gram(b)))) for a, b in zip(pa, pb)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def loss_perceptual(pred: Tensor, target: Tensor, pyr: FeaturePyramid) -> Tensor:
    _same_shape(pred, target, "loss_perceptual")
    return _perceptual_from_taps(pyr(pred), pyr(target))


def gram(features: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C,C), normalised by C*H*W."""
    b, c, h, w = features.shape
    f = reshape(features, (b, c, h * w))
    return matmul(f, transpose(f, (0, 2, 1))) * (1.0 / (c * h * w))


def loss_style(pred: Tensor, target: Tensor, pyr: FeaturePyramid) -> Tensor:
    _same_shape(pred, target, "loss_style")
    return _style_from_taps(pyr(pred), pyr(target))


def loss_adversarial(disc_logits_on_fake: Tensor) -> Tensor:
    """Generator BCE against the 'real' label, mean over patches."""
    return mean(softplus(-disc_logits_on_fake))


def disc_loss(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    return mean(softplus(-logits_real)) + mean(softplus(logits_fake))


@dataclass
class LossTerms:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)


def loss_total(
    pred_stage2: Tensor,
    pred_stage1: Tensor,
    target: Tensor,
    disc_logits: Tensor | None,
    weights: LossWeights,
    pyr: FeaturePyramid,
) -> LossTerms:
    """Weighted stage-2 objective plus auxiliary MSE on the stage-1 map."""
    mse2 = loss_mse(pred_stage2, target)
    mse1 = loss_mse(pred_stage1, target)
    parts = {"mse": mse2, "mse_stage1": mse1}
    total = mse2 * weights.mse + mse1 * weights.mse
    if weights.per or weights.sty:
        _same_shape(pred_stage2, target, "loss_total")
        taps_pred = pyr(pred_stage2)
        with no_grad():
            taps_target = pyr(target.detach())
    if weights.per:
        parts["per"] = _perceptual_from_taps(taps_pred, taps_target)
        total = total + parts["per"] * weights.per
    if weights.sty:
        parts["sty"] = _style_from_taps(taps_pred, taps_target)
        total = total + parts["sty"] * weights.sty
    if weights.adv and disc_logits is not None:
        parts["adv"] = loss_adversarial(disc_logits)
        total = total + parts["adv"] * weights.adv
    return LossTerms(total, {k: v.item() for k, v in parts.items()})
