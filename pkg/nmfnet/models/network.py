"""
Model assembly: four-block CNN / CNMF networks with optional 1x1 mixing.

Block layout:

    main (CNN conv or CNMF) -> [BN] -> ReLU -> [1x1 conv -> [BN] -> ReLU]

The very last layer emits the logits and is not followed by ReLU. Every
other layer is, so each NMF layer receives non-negative input.
"""
from typing import Optional

import numpy as np
import structlog

from ..core.tensor import ConvSpec, Tensor, default_dtype, ensure_finite, flatten
from ..errors import ConfigError, NonFiniteError, ShapeError, TrainingError
from ..schemas.network import BlockConfig, NetworkConfig
from .enums import BackwardEngine, BlockKind, GradMode, Preset
from .layers import BatchNorm2d, Cnmf, Conv2d, Layer, ReLU

log = structlog.get_logger(__name__)

BASE_CHANNELS = (32, 64, 96)
# (kernel, stride, padding) per block: 28 -> 14 -> 7 -> 3 -> 1
BLOCK_GEOMETRY = ((5, 2, 2), (5, 2, 2), (5, 2, 1), (3, 1, 0))
# batch norm is omitted in the final two blocks
BLOCK_BATCH_NORM = (True, True, False, False)

_PRESETS = {
    Preset.CNN: (BlockKind.CNN, False),
    Preset.CNMF: (BlockKind.CNMF, False),
    Preset.CNN_MIX: (BlockKind.CNN, True),
    Preset.CNMF_MIX: (BlockKind.CNMF, True),
}


def preset_config(
    preset,
    width_multiplier: int = 1,
    groups: int = 1,
    nmf_iters: Optional[int] = None,
    nmf_epsilon: Optional[float] = None,
    backward: BackwardEngine = BackwardEngine.APPROX,
    grad_mode: GradMode = GradMode.DIRECT,
    class_count: int = 10,
) -> NetworkConfig:
    """Configuration of one of the four named architectures.

    `groups` is applied to every layer except the first main layer (3 input
    channels) and the final block (class_count channels).
    """
    preset = Preset(preset)
    kind, mix = _PRESETS[preset]
    channels = [c * width_multiplier for c in BASE_CHANNELS] + [class_count]
    extra = {}
    if nmf_iters is not None:
        extra["nmf_iters"] = nmf_iters
    if nmf_epsilon is not None:
        extra["nmf_epsilon"] = nmf_epsilon

    blocks = []
    last = len(BLOCK_GEOMETRY) - 1
    for i, ((k, s, p), bn) in enumerate(zip(BLOCK_GEOMETRY, BLOCK_BATCH_NORM)):
        blocks.append(
            BlockConfig(
                kind=kind,
                mix_1x1=mix,
                out_channels=channels[i],
                kernel=(k, k),
                stride=s,
                padding=p,
                groups_main=1 if i in (0, last) else groups,
                groups_mix=1 if i == last else groups,
                batch_norm=bn,
                **extra,
            )
        )
    return NetworkConfig(
        preset=preset,
        blocks=blocks,
        width_multiplier=width_multiplier,
        groups=groups,
        class_count=class_count,
        backward=backward,
        grad_mode=grad_mode,
    )


def block_specs(config: NetworkConfig) -> list[tuple[ConvSpec, Optional[ConvSpec]]]:
    """ConvSpecs of (main, mix) per block, validating the spatial path to 1x1."""
    in_c, h, w = config.input_shape
    specs = []
    for i, block in enumerate(config.blocks, start=1):
        try:
            main = ConvSpec(
                kernel_h=block.kernel[0],
                kernel_w=block.kernel[1],
                stride=block.stride,
                padding=block.padding,
                groups=block.groups_main,
                in_channels=in_c,
                out_channels=block.out_channels,
            )
            h, w = main.output_size(h, w)
            mix = None
            if block.mix_1x1:
                mix = ConvSpec(
                    kernel_h=1,
                    kernel_w=1,
                    groups=block.groups_mix,
                    in_channels=block.out_channels,
                    out_channels=block.out_channels,
                )
        except (ValueError, ShapeError) as e:
            raise ConfigError(f"block {i}: {e}") from e
        specs.append((main, mix))
        in_c = block.out_channels
    if (h, w) != (1, 1):
        raise ConfigError(
            f"block {len(config.blocks)}: spatial path ends at {h}x{w}, expected 1x1"
        )
    return specs


class Model:
    def __init__(self, config: NetworkConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers
        self.training = True
        self._forwarded = False

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.parameters().values())).dtype

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ShapeError(f"expected input [B, {self.config.input_shape}], got {x.shape}")
        out = x
        for layer in self.layers:
            try:
                out = layer.forward(out, self.training)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{layer.name} ({exc.where})") from exc
            ensure_finite(out, layer.name)
        self._forwarded = True
        return flatten(out)

    __call__ = forward

    def backward(self, phi_logits: Tensor) -> dict[str, Tensor]:
        if not self._forwarded:
            raise TrainingError("backward called before forward")
        d = phi_logits.reshape(phi_logits.shape[0], self.config.class_count, 1, 1)
        for layer in reversed(self.layers):
            d = ensure_finite(layer.backward(d), f"{layer.name} (backward)")
        return self.gradients()

    def parameters(self) -> dict[str, Tensor]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def gradients(self) -> dict[str, Tensor]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.grads.items()}

    def buffers(self) -> dict[str, Tensor]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.buffers.items()}

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def nmf_layers(self) -> list[Cnmf]:
        return [l for l in self.layers if isinstance(l, Cnmf)]

    def parameter_breakdown(self) -> dict[str, int]:
        counts = {"nmf": 0, "conv": 0}
        for layer in self.layers:
            counts[layer.family] += sum(p.size for p in layer.params.values())
        return counts

    def parameter_count(self) -> int:
        return sum(self.parameter_breakdown().values())


def build(config: NetworkConfig, seed: int = 0, dtype: Optional[np.dtype] = None) -> Model:
    dtype = np.dtype(dtype or default_dtype())
    rng = np.random.default_rng(seed)
    specs = block_specs(config)
    layers: list[Layer] = []
    n_blocks = len(config.blocks)
    for i, (block, (main, mix)) in enumerate(zip(config.blocks, specs), start=1):
        prefix = f"block{i}"
        if block.kind == BlockKind.CNMF:
            layers.append(
                Cnmf(
                    f"{prefix}.main",
                    main,
                    rng,
                    dtype,
                    block.nmf_iters,
                    block.nmf_epsilon,
                    config.backward,
                    config.grad_mode,
                )
            )
        else:
            layers.append(Conv2d(f"{prefix}.main", main, rng, dtype))
        stages = [("main", main)] + ([("mix", mix)] if mix is not None else [])
        for j, (role, spec) in enumerate(stages):
            if role == "mix":
                layers.append(Conv2d(f"{prefix}.mix", spec, rng, dtype))
            is_logits = i == n_blocks and j == len(stages) - 1
            if is_logits:
                continue
            if block.batch_norm:
                layers.append(BatchNorm2d(f"{prefix}.{role}_bn", spec.out_channels, dtype))
            layers.append(ReLU(f"{prefix}.{role}_relu"))

    model = Model(config, layers)
    log.debug(
        "model built",
        preset=config.preset.value if config.preset else None,
        layers=len(layers),
        parameters=model.parameter_count(),
    )
    return model


def analytic_parameter_count(config: NetworkConfig) -> dict[str, int]:
    """Parameter counts computed from the configuration alone."""
    in_c = config.input_shape[0]
    nmf = conv = 0
    n_blocks = len(config.blocks)
    for i, block in enumerate(config.blocks, start=1):
        out = block.out_channels
        kernel = (in_c // block.groups_main) * block.kernel[0] * block.kernel[1]
        if block.kind == BlockKind.CNMF:
            nmf += out * kernel
        else:
            conv += out * kernel + out
        if block.batch_norm and not (i == n_blocks and not block.mix_1x1):
            conv += 2 * out
        if block.mix_1x1:
            conv += out * (out // block.groups_mix) + out
            if block.batch_norm and i != n_blocks:
                conv += 2 * out
        in_c = out
    return {"nmf": nmf, "conv": conv, "total": nmf + conv}


def conv_to_nmf_ratio(counts: dict[str, int]) -> Optional[float]:
    return counts["conv"] / counts["nmf"] if counts["nmf"] else None
