"""Building blocks of the generator and the patch discriminator.

Parameter containers are plain dataclasses of :class:`Tensor`; the forward
functions are free functions so the same weights can be evaluated from
several threads without shared mutable state.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    amax,
    concat_channels,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    mean,
    relu,
    sigmoid,
)

AOT_DILATIONS = (1, 2, 4, 8)


class ConfigError(ValueError):
    """Model geometry cannot be built as requested."""


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    transposed: bool = False
    output_padding: int = 0

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        cin: int,
        cout: int,
        k: int,
        *,
        stride: int = 1,
        dilation: int = 1,
        padding: int | None = None,
        transposed: bool = False,
        output_padding: int = 0,
        dtype=np.float32,
        trainable: bool = True,
    ) -> "Conv":
        if padding is None:
            padding = dilation * (k - 1) // 2
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        w = kaiming_uniform(rng, shape, cin * k * k, dtype)
        return cls(
            Tensor(w, requires_grad=trainable),
            Tensor(np.zeros(cout, dtype=dtype), requires_grad=trainable),
            stride,
            dilation,
            padding,
            transposed,
            output_padding,
        )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested dataclasses/lists and yield every Tensor with a dotted name."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            if isinstance(child, (Tensor, list, tuple)) or dataclasses.is_dataclass(child):
                yield from named_parameters(child, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_parameters(child, f"{prefix}.{i}" if prefix else str(i))


# AOT block ---------------------------------------------------------------

@dataclass
class AotParams:
    branches: list[Conv]
    fuse: Conv
    gate: Conv

    @classmethod
    def init(cls, rng, channels: int, dtype=np.float32) -> "AotParams":
        if channels % 4:
            raise ConfigError(f"AOT block needs channels divisible by 4, got {channels}")
        quarter = channels // 4
        branches = [Conv.init(rng, channels, quarter, 3, dilation=d, dtype=dtype) for d in AOT_DILATIONS]
        fuse = Conv.init(rng, channels, channels, 3, dtype=dtype)
        gate = Conv.init(rng, channels, 1, 3, dtype=dtype)
        return cls(branches, fuse, gate)


def aot_forward(x: Tensor, p: AotParams, gate_bias: float | None = None) -> Tensor:
    """Split into four dilated branches, fuse, and gate against the identity.

    ``gate_bias`` replaces the learned gate bias; large positive/negative
    values pin the gate to 1/0 for testing.
    """
    c = x.shape[1]
    if c % 4:
        raise ConfigError(f"AOT block needs channels divisible by 4, got {c}")
    branches = [relu(conv(x)) for conv in p.branches]
    x2 = p.fuse(concat_channels(branches))
    if gate_bias is None:
        logits = p.gate(x2)
    else:
        bias = Tensor(np.full(1, gate_bias, dtype=x.dtype))
        logits = conv2d(x2, p.gate.weight, bias, padding=p.gate.padding)
    g = sigmoid(logits)
    return x2 * g + x * (1.0 - g)


# CBAM --------------------------------------------------------------------

@dataclass
class CbamParams:
    mlp_in: Conv
    mlp_out: Conv
    spatial: Conv

    @classmethod
    def init(cls, rng, channels: int, reduction: int, dtype=np.float32) -> "CbamParams":
        if channels % reduction:
            raise ConfigError(f"CBAM reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        return cls(
            Conv.init(rng, channels, hidden, 1, dtype=dtype),
            Conv.init(rng, hidden, channels, 1, dtype=dtype),
            Conv.init(rng, 2, 1, 7, dtype=dtype),
        )


def cbam_forward(x: Tensor, p: CbamParams, return_attention: bool = False):
    """Channel attention followed by spatial attention."""

    def mlp(v):
        return p.mlp_out(relu(p.mlp_in(v)))

    avg = mean(x, axis=(2, 3), keepdims=True)
    mx = amax(x, axis=(2, 3), keepdims=True)
    a_c = sigmoid(mlp(avg) + mlp(mx))
    refined = x * a_c
    pooled = concat_channels([mean(refined, axis=1, keepdims=True), amax(refined, axis=1, keepdims=True)])
    a_s = sigmoid(p.spatial(pooled))
    out = refined * a_s
    if return_attention:
        return out, a_c, a_s
    return out


# encoder / decoder layers ------------------------------------------------

@dataclass
class EncoderParams:
    conv: Conv
    cbam: CbamParams
    aot: AotParams


def encoder_layer(x: Tensor, p: EncoderParams) -> Tensor:
    return aot_forward(cbam_forward(relu(p.conv(x)), p.cbam), p.aot)


@dataclass
class DecoderParams:
    tconv: Conv


def decoder_layer(x: Tensor, skip: Tensor | None, p: DecoderParams) -> Tensor:
    """Concatenate the skip features (if any) and upsample with a T-Conv."""
    if skip is not None:
        if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
            raise ShapeError(f"decoder skip {skip.shape} does not match decoder features {x.shape}")
        x = concat_channels([x, skip])
    expected = p.tconv.weight.shape[0]
    if x.shape[1] != expected:
        raise ShapeError(f"decoder T-Conv expects {expected} input channels, got {x.shape[1]}")
    return relu(p.tconv(x))


# patch discriminator -----------------------------------------------------

@dataclass
class PatchDiscParams:
    convs: list[Conv] = field(default_factory=list)
    head: Conv | None = None

    @classmethod
    def init(cls, rng, in_channels: int, widths=(64, 128, 256, 512), dtype=np.float32) -> "PatchDiscParams":
        convs = []
        cin = in_channels
        for w in widths:
            convs.append(Conv.init(rng, cin, w, 4, stride=2, padding=1, dtype=dtype))
            cin = w
        head = Conv.init(rng, cin, 1, 3, dtype=dtype)
        return cls(convs, head)


def patch_disc_forward(condition: Tensor, candidate: Tensor, p: PatchDiscParams) -> Tensor:
    """Patch logits for ``candidate`` judged against the generator inputs."""
    if candidate.shape[1] != 1 or candidate.shape[0] != condition.shape[0] or candidate.shape[2:] != condition.shape[2:]:
        raise ShapeError(f"discriminator candidate {candidate.shape} does not match condition {condition.shape}")
    h = concat_channels([condition, candidate])
    for conv in p.convs:
        h = leaky_relu(conv(h), 0.2)
    return p.head(h)
