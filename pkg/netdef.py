# netdef.py
"""
Network components of the view-synthesis model.

Layer tables (numbers are the row numbers used throughout logs and audits):

    1-27   feature extractor, MobileNet 1.0 without the classifier, relu6
    28-47  disparity estimator, one per branch, relu6 except 47 (relu)
    48-55  refiner, one per branch, relu except 55 (linear)
    56-60  confidence-based merger, one per branch, relu except 60 (sigmoid)

One parameter-free x2 upsampling is inserted between rows 46 and 47 so that
the disparity map comes out at input resolution (six stride-2 layers in the
extractor against five upsamplings in the estimator table). Convolutions use
zero "same" padding and carry a bias; there is no batch normalization.

Components are only mutated by the trainer; forward passes may run from
several threads as long as no optimizer step is in flight.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import torch
import torch.nn.functional as F
from torch import nn

import weightfile
from consistency import PredictionBundle, blend
from warp import WarpDirection, warp

logger = logging.getLogger(__name__)

INPUT_DIVISOR = 64
INIT_STD = 0.02
ENCODER_TAPS = (4, 8, 12, 24)
CBM_INPUT_CHANNELS = 4  # DBP image (3) + disparity (1)


class LayerKind(str, Enum):
    CONV = "conv"
    DEPTHWISE = "depthwise_conv"
    UPSAMPLE = "upsample"
    CONCAT = "concat"


class Activation(str, Enum):
    RELU = "relu"
    RELU6 = "relu6"
    SIGMOID = "sigmoid"
    NONE = "none"


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: LayerKind
    stride: int = 1
    filters: Optional[int] = None
    kernel: Optional[tuple[int, int]] = None
    activation: Activation = Activation.NONE
    concat_target: Optional[int] = None
    inserted: bool = False

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"layer {self.index}: stride must be positive")
        if self.kind is LayerKind.DEPTHWISE and self.filters is not None:
            raise ValueError(f"layer {self.index}: depthwise layers carry no filter count")
        if self.kind is LayerKind.CONV and not (self.filters and self.filters > 0):
            raise ValueError(f"layer {self.index}: conv layers need a positive filter count")
        if self.kind in (LayerKind.CONV, LayerKind.DEPTHWISE) and self.kernel is None:
            raise ValueError(f"layer {self.index}: convolutions need a kernel size")
        if self.kind is LayerKind.CONCAT and self.concat_target is None:
            raise ValueError(f"layer {self.index}: concat layers need a concat target")
        if self.kind is LayerKind.UPSAMPLE and (self.stride != 2 or self.kernel is not None):
            raise ValueError(f"layer {self.index}: upsample layers have stride 2 and no kernel")

    @property
    def key(self) -> str:
        return f"layer{self.index}" + ("_inserted" if self.inserted else "")

    def encode(self) -> tuple:
        """Row encoding used by the architecture audit."""
        return (self.index, self.kind.value, self.stride, self.filters, self.kernel,
                self.activation.value, self.concat_target)


def _conv(index: int, filters: int, kernel: int, stride: int = 1, act: Activation = Activation.RELU6) -> LayerSpec:
    return LayerSpec(index, LayerKind.CONV, stride, filters, (kernel, kernel), act)


def _dw(index: int, stride: int = 1) -> LayerSpec:
    return LayerSpec(index, LayerKind.DEPTHWISE, stride, None, (3, 3), Activation.RELU6)


def _up(index: int, inserted: bool = False) -> LayerSpec:
    return LayerSpec(index, LayerKind.UPSAMPLE, 2, inserted=inserted)


def _concat(index: int, target: int) -> LayerSpec:
    return LayerSpec(index, LayerKind.CONCAT, 1, concat_target=target)


FEATURE_EXTRACTOR_LAYERS = (
    _conv(1, 32, 3, stride=2),
    _dw(2), _conv(3, 64, 1),
    _dw(4, 2), _conv(5, 128, 1),
    _dw(6), _conv(7, 128, 1),
    _dw(8, 2), _conv(9, 256, 1),
    _dw(10), _conv(11, 256, 1),
    _dw(12, 2), _conv(13, 512, 1),
    # 14-23: five repeated blocks
    *[layer for i in range(5) for layer in (_dw(14 + 2 * i), _conv(15 + 2 * i, 512, 1))],
    _dw(24, 2), _conv(25, 1024, 1),
    _dw(26, 2), _conv(27, 1024, 1),
)

DISPARITY_ESTIMATOR_LAYERS = (
    _dw(28), _conv(29, 512, 1), _up(30), _concat(31, 24),
    _dw(32), _conv(33, 512, 1), _up(34), _concat(35, 12),
    _dw(36), _conv(37, 256, 1), _up(38), _concat(39, 8),
    _dw(40), _conv(41, 128, 1), _up(42), _concat(43, 4),
    _dw(44), _conv(45, 64, 1), _up(46),
    _up(46, inserted=True),
    _conv(47, 1, 2, act=Activation.RELU),
)

REFINER_LAYERS = (
    *[_conv(i, 64, 3, act=Activation.RELU) for i in range(48, 55)],
    _conv(55, 3, 3, act=Activation.NONE),
)

# Row 60 has a single filter: the blend weight is one scalar per pixel.
CBM_LAYERS = (
    *[_conv(i, 32, 3, act=Activation.RELU) for i in range(56, 60)],
    _conv(60, 1, 3, act=Activation.SIGMOID),
)


def _padding(spec: LayerSpec):
    if spec.stride == 1:
        return "same"
    return (spec.kernel[0] // 2, spec.kernel[1] // 2)


def _activate(x: torch.Tensor, activation: Activation) -> torch.Tensor:
    if activation is Activation.RELU6:
        return F.relu6(x)
    if activation is Activation.RELU:
        return F.relu(x)
    if activation is Activation.SIGMOID:
        return torch.sigmoid(x)
    return x


def trace_shapes(
    layers: Iterable[LayerSpec],
    in_channels: int,
    in_scale: int = 1,
    skip_shapes: Optional[dict[int, tuple[int, int]]] = None,
) -> list[tuple[int, int]]:
    """Propagate (channels, downsampling factor) through ``layers``.

    Raises ValueError when a concat joins maps of different resolution, so a
    mis-wired decoder fails at construction time instead of at the first batch.
    """
    skip_shapes = skip_shapes or {}
    channels, scale = in_channels, in_scale
    shapes = []
    for spec in layers:
        if spec.kind is LayerKind.CONV:
            channels = spec.filters
            scale *= spec.stride
        elif spec.kind is LayerKind.DEPTHWISE:
            scale *= spec.stride
        elif spec.kind is LayerKind.UPSAMPLE:
            if scale % 2:
                raise ValueError(f"layer {spec.index}: cannot upsample past input resolution")
            scale //= 2
        elif spec.kind is LayerKind.CONCAT:
            if spec.concat_target not in skip_shapes:
                raise ValueError(f"layer {spec.index}: no skip activation from layer {spec.concat_target}")
            skip_channels, skip_scale = skip_shapes[spec.concat_target]
            if skip_scale != scale:
                raise ValueError(
                    f"layer {spec.index}: cannot concatenate a 1/{scale} map with layer "
                    f"{spec.concat_target} at 1/{skip_scale}"
                )
            channels += skip_channels
        shapes.append((channels, scale))
    return shapes


class NetworkComponent(nn.Module):
    """A stack of table rows evaluated in order.

    ``taps`` lists row numbers whose activations are returned when
    ``return_taps=True``; concat rows read their partner from ``skips``.
    """

    def __init__(
        self,
        name: str,
        layers: Iterable[LayerSpec],
        in_channels: int,
        taps: Iterable[int] = (),
        in_scale: int = 1,
        skip_shapes: Optional[dict[int, tuple[int, int]]] = None,
        input_divisor: int = 1,
    ):
        super().__init__()
        self.name = name
        self.layers = tuple(layers)
        self.in_channels = in_channels
        self.taps = tuple(taps)
        self.input_divisor = input_divisor
        self.shapes = trace_shapes(self.layers, in_channels, in_scale, skip_shapes)
        self.out_channels, self.out_scale = self.shapes[-1]

        self.ops = nn.ModuleDict()
        channels = in_channels
        for spec, (out_channels, _) in zip(self.layers, self.shapes):
            if spec.kind is LayerKind.CONV:
                self.ops[spec.key] = nn.Conv2d(channels, spec.filters, spec.kernel, spec.stride,
                                               padding=_padding(spec))
            elif spec.kind is LayerKind.DEPTHWISE:
                self.ops[spec.key] = nn.Conv2d(channels, channels, spec.kernel, spec.stride,
                                               padding=_padding(spec), groups=channels)
            channels = out_channels

    def tap_shapes(self) -> dict[int, tuple[int, int]]:
        return {spec.index: shape for spec, shape in zip(self.layers, self.shapes)
                if spec.index in self.taps and not spec.inserted}

    def forward(self, x: torch.Tensor, skips: Optional[dict[int, torch.Tensor]] = None,
                return_taps: bool = False):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"{self.name}: expected N×{self.in_channels}×H×W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.input_divisor or w % self.input_divisor:
            raise ValueError(f"{self.name}: input {h}×{w} is not divisible by {self.input_divisor}")

        taps = {}
        for spec in self.layers:
            if spec.kind is LayerKind.UPSAMPLE:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            elif spec.kind is LayerKind.CONCAT:
                x = torch.cat([x, skips[spec.concat_target]], dim=1)
            else:
                x = self.ops[spec.key](x)
            x = _activate(x, spec.activation)
            if spec.index in self.taps and not spec.inserted:
                taps[spec.index] = x
        return (x, taps) if return_taps else x


def build_feature_extractor(input_channels: int = 3) -> NetworkComponent:
    if input_channels != 3:
        raise ValueError(f"the feature extractor takes RGB input, got {input_channels} channels")
    return NetworkComponent("feature_extractor", FEATURE_EXTRACTOR_LAYERS, input_channels,
                            taps=ENCODER_TAPS, input_divisor=INPUT_DIVISOR)


def build_disparity_estimator(encoder: NetworkComponent, name: str = "disparity_estimator") -> NetworkComponent:
    skip_shapes = encoder.tap_shapes()
    missing = [i for i in (24, 12, 8, 4) if i not in skip_shapes]
    if missing:
        raise ValueError(f"encoder does not expose skip activations for layers {missing}")
    component = NetworkComponent(name, DISPARITY_ESTIMATOR_LAYERS, encoder.out_channels,
                                 in_scale=encoder.out_scale, skip_shapes=skip_shapes)
    if component.out_scale != 1:
        raise ValueError(f"{name} ends at 1/{component.out_scale} resolution instead of full resolution")
    return component


def build_refiner(name: str = "refiner") -> NetworkComponent:
    return NetworkComponent(name, REFINER_LAYERS, 3)


def build_cbm(name: str = "cbm", in_channels: int = CBM_INPUT_CHANNELS) -> NetworkComponent:
    return NetworkComponent(name, CBM_LAYERS, in_channels)


@dataclass(frozen=True)
class DBPOutput:
    left_dbp: torch.Tensor
    right_dbp: torch.Tensor
    d_lr: torch.Tensor
    d_rl: torch.Tensor


COMPONENT_NAMES = ("encoder", "decoder_lr", "decoder_rl", "refiner_l", "refiner_r", "cbm_l", "cbm_r")
COMPONENT_GROUPS = {
    "dbp": ("encoder", "decoder_lr", "decoder_rl"),
    "decoders": ("decoder_lr", "decoder_rl"),
    "refiners": ("refiner_l", "refiner_r"),
    "cbms": ("cbm_l", "cbm_r"),
    "all": COMPONENT_NAMES,
}


class ModelGraph(nn.Module):
    """Shared encoder, twin decoders, and one refiner / CBM per target view.

    The left-to-right branch reads L and produces R (decoder_lr, refiner_r,
    cbm_r); the right-to-left branch reads R and produces L.
    """

    def __init__(self):
        super().__init__()
        self.encoder = build_feature_extractor(3)
        self.decoder_lr = build_disparity_estimator(self.encoder, "decoder_lr")
        self.decoder_rl = build_disparity_estimator(self.encoder, "decoder_rl")
        self.refiner_l = build_refiner("refiner_l")
        self.refiner_r = build_refiner("refiner_r")
        self.cbm_l = build_cbm("cbm_l")
        self.cbm_r = build_cbm("cbm_r")

    def components(self) -> dict[str, NetworkComponent]:
        return {name: getattr(self, name) for name in COMPONENT_NAMES}

    def resolve(self, names: Iterable[str]) -> list[str]:
        """Expand group aliases ("dbp", "refiners", ...) into component names."""
        resolved = []
        for name in names:
            members = COMPONENT_GROUPS.get(name, (name,))
            for member in members:
                if member not in COMPONENT_NAMES:
                    raise KeyError(f"unknown component {name!r}; known: {', '.join(COMPONENT_NAMES)}")
                if member not in resolved:
                    resolved.append(member)
        return resolved

    def disparity(self, x: torch.Tensor, direction: WarpDirection | str) -> torch.Tensor:
        direction = WarpDirection.parse(direction)
        features, taps = self.encoder(x, return_taps=True)
        decoder = self.decoder_lr if direction is WarpDirection.LEFT_TO_RIGHT else self.decoder_rl
        return decoder(features, skips=taps)

    def branch_from_disparity(self, x: torch.Tensor, disparity: torch.Tensor,
                              direction: WarpDirection | str) -> PredictionBundle:
        """Warp, refine, estimate V and blend for a given disparity map."""
        direction = WarpDirection.parse(direction)
        if direction is WarpDirection.LEFT_TO_RIGHT:
            refiner, cbm = self.refiner_r, self.cbm_r
        else:
            refiner, cbm = self.refiner_l, self.cbm_l
        dbp = warp(x, disparity, direction)
        ref = refiner(dbp)
        v = cbm(torch.cat([dbp, disparity], dim=1))
        return PredictionBundle(input=x, dbp=dbp, ref=ref, blended=blend(dbp, ref, v), disparity=disparity, v=v)

    def predict(self, x: torch.Tensor, direction: WarpDirection | str) -> PredictionBundle:
        return self.branch_from_disparity(x, self.disparity(x, direction), direction)

    def dbp(self, left: torch.Tensor, right: torch.Tensor) -> DBPOutput:
        d_lr = self.disparity(left, WarpDirection.LEFT_TO_RIGHT)
        d_rl = self.disparity(right, WarpDirection.RIGHT_TO_LEFT)
        return DBPOutput(
            left_dbp=warp(right, d_rl, WarpDirection.RIGHT_TO_LEFT),
            right_dbp=warp(left, d_lr, WarpDirection.LEFT_TO_RIGHT),
            d_lr=d_lr,
            d_rl=d_rl,
        )

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> tuple[PredictionBundle, PredictionBundle]:
        """Both branches; returns (bundle predicting L, bundle predicting R)."""
        return self.predict(right, WarpDirection.RIGHT_TO_LEFT), self.predict(left, WarpDirection.LEFT_TO_RIGHT)


def initialize_parameters(module: nn.Module, seed: int, std: float = INIT_STD) -> None:
    """Weights ~ N(0, std), biases zero, drawn in parameter-name order from ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                param.normal_(0.0, std, generator=gen)


def build_model(seed: int = 0, encoder_weights: Optional[Path] = None) -> ModelGraph:
    model = ModelGraph()
    initialize_parameters(model, seed)
    if encoder_weights is not None:
        weightfile.load_into(model.encoder, Path(encoder_weights), prefix="encoder.")
        logger.info("Encoder initialized from %s", encoder_weights)
    logger.debug("Built model with %d parameters (seed %d)", count_parameters(model), seed)
    return model


def count_parameters(component: nn.Module) -> int:
    """Trainable scalars; parameters shared between submodules are counted once."""
    seen = set()
    total = 0
    for param in component.parameters():
        if id(param) not in seen:
            seen.add(id(param))
            total += param.numel()
    return total


def dbp_parameter_count(model: ModelGraph) -> int:
    return sum(count_parameters(getattr(model, name)) for name in COMPONENT_GROUPS["dbp"])


def analytic_parameter_count(layers: Iterable[LayerSpec], in_channels: int,
                             skip_shapes: Optional[dict[int, tuple[int, int]]] = None,
                             in_scale: int = 1) -> int:
    """k·k·c_in·c_out + c_out per conv, k·k·c + c per depthwise, from the table alone."""
    layers = tuple(layers)
    shapes = trace_shapes(layers, in_channels, in_scale, skip_shapes)
    total = 0
    channels = in_channels
    for spec, (out_channels, _) in zip(layers, shapes):
        if spec.kind is LayerKind.CONV:
            kh, kw = spec.kernel
            total += kh * kw * channels * spec.filters + spec.filters
        elif spec.kind is LayerKind.DEPTHWISE:
            kh, kw = spec.kernel
            total += kh * kw * channels + channels
        channels = out_channels
    return total


def serialize_layers(component: NetworkComponent, include_inserted: bool = False) -> list[tuple]:
    return [spec.encode() for spec in component.layers if include_inserted or not spec.inserted]


def layer_table(component: NetworkComponent) -> str:
    """Plain-text table of a component's rows with per-row parameter counts."""
    header = f"{'Number':>6}  {'Type - stride':<22} {'Filters':>7}  {'Kernel':<6} {'Activation':<10} {'Params':>9}"
    lines = [f"{component.name}", header, "-" * len(header)]
    for spec in component.layers:
        op = component.ops[spec.key] if spec.key in component.ops else None
        params = sum(p.numel() for p in op.parameters()) if op is not None else 0
        kind = f"{spec.kind.value} - {spec.stride}"
        if spec.kind is LayerKind.CONCAT:
            kind = f"concat (to layer {spec.concat_target})"
        number = f"({spec.index})" if spec.inserted else str(spec.index)
        kernel = f"{spec.kernel[0]}*{spec.kernel[1]}" if spec.kernel else ""
        filters = str(spec.filters) if spec.filters else ""
        lines.append(f"{number:>6}  {kind:<22} {filters:>7}  {kernel:<6} {spec.activation.value:<10} {params:>9}")
    lines.append(f"{'':>6}  {'total':<22} {'':>7}  {'':<6} {'':<10} {count_parameters(component):>9}")
    return "\n".join(lines)
