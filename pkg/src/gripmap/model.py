"""Multi-encoder feature-pyramid network for dense grip-map prediction.

Each selected modality (RGB, thermal, reflectance-with-validity) runs through
its own residual encoder; per scale, the modality features are concatenated
channel-wise and reduced by a lateral 1x1 convolution; a top-down pathway
merges scales by upsample-and-sum; a shared head with dropout emits 4 linear
channels (grip plus water / ice / snow thickness) at quarter resolution,
bilinearly upsampled to the input size.  Outputs are unbounded; grip is
clamped to [0, 1] only at visualization time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, InputError
from .tensorio import read_checkpoint, write_checkpoint

MODALITY_ORDER = ("rgb", "thermal", "reflectance")
MODALITY_CHANNELS = {"rgb": 3, "thermal": 1, "reflectance": 2}


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the default is the desk-scale network."""

    modalities: tuple[str, ...] = ("rgb", "thermal", "reflectance")
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    num_scales: int = 4
    blocks_per_stage: int = 1
    decoder_width: int = 64
    dropout_final: float = 0.20

    def __post_init__(self):
        mods = tuple(self.modalities)
        if len(mods) == 0:
            raise ConfigError("at least one modality is required")
        for m in mods:
            if m not in MODALITY_ORDER:
                raise ConfigError(f"unknown modality {m!r}")
        if len(set(mods)) != len(mods):
            raise ConfigError("duplicate modality in config")
        canonical = tuple(m for m in MODALITY_ORDER if m in mods)
        object.__setattr__(self, "modalities", canonical)
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if self.num_scales < 2:
            raise ConfigError("need at least 2 scales for the quarter-resolution head")
        if len(self.encoder_widths) != self.num_scales:
            raise ConfigError("encoder_widths must list one width per scale")
        if any(w <= 0 for w in self.encoder_widths):
            raise ConfigError("encoder widths must be positive")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be at least 1")
        if self.decoder_width <= 0:
            raise ConfigError("decoder width must be positive")
        if not 0.0 <= self.dropout_final < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def stride(self) -> int:
        return 2 ** self.num_scales

    def to_text(self) -> str:
        return "\n".join([
            f"modalities={','.join(self.modalities)}",
            f"encoder_widths={','.join(str(w) for w in self.encoder_widths)}",
            f"num_scales={self.num_scales}",
            f"blocks_per_stage={self.blocks_per_stage}",
            f"decoder_width={self.decoder_width}",
            f"dropout_final={self.dropout_final!r}",
        ])

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
        try:
            return cls(
                modalities=tuple(fields["modalities"].split(",")),
                encoder_widths=tuple(int(w) for w in fields["encoder_widths"].split(",")),
                num_scales=int(fields["num_scales"]),
                blocks_per_stage=int(fields["blocks_per_stage"]),
                decoder_width=int(fields["decoder_width"]),
                dropout_final=float(fields["dropout_final"]),
            )
        except KeyError as exc:
            raise ConfigError(f"checkpoint config is missing key {exc}") from exc


def paper_scale_config(modalities=MODALITY_ORDER) -> ModelConfig:
    """Preset mirroring an 18-layer residual encoder's stage layout."""
    return ModelConfig(modalities=tuple(modalities),
                       encoder_widths=(64, 128, 256, 512),
                       num_scales=4, blocks_per_stage=2, decoder_width=256)


# ---------------------------------------------------------------------------
# Network


def _group_norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    raise AssertionError("unreachable")


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = _group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = _group_norm(channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class _Stage(nn.Module):
    """Stride-2 downsample followed by residual blocks."""

    def __init__(self, in_ch: int, out_ch: int, blocks: int):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False)
        self.norm = _group_norm(out_ch)
        self.blocks = nn.Sequential(*[_ResBlock(out_ch) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(F.relu(self.norm(self.down(x))))


class _Encoder(nn.Module):
    """One modality's feature stack: one feature map per scale."""

    def __init__(self, in_ch: int, config: ModelConfig):
        super().__init__()
        stages = []
        prev = in_ch
        for w in config.encoder_widths:
            stages.append(_Stage(prev, w, config.blocks_per_stage))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class GripNet(nn.Module):
    """The full fusion network; forward takes a dict of B x C x H x W tensors."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoders = nn.ModuleDict({
            m: _Encoder(MODALITY_CHANNELS[m], config) for m in config.modalities})
        d = config.decoder_width
        n_mod = len(config.modalities)
        # Pyramid levels are scales 1..S-1 (strides 4..2^S); the stride-2
        # scale feeds the trunk but gets no lateral, as in standard FPN use.
        self.laterals = nn.ModuleList([
            nn.Conv2d(n_mod * config.encoder_widths[s], d, 1)
            for s in range(1, config.num_scales)])
        self.smooths = nn.ModuleList([
            nn.Sequential(nn.Conv2d(d, d, 3, padding=1, bias=False),
                          _group_norm(d), nn.ReLU(inplace=True))
            for _ in range(config.num_scales - 2)])
        self.head = nn.Sequential(
            nn.Conv2d(d, d, 3, padding=1, bias=False),
            _group_norm(d),
            nn.ReLU(inplace=True),
            nn.Dropout2d(config.dropout_final),
            nn.Conv2d(d, 4, 1),
        )

    def forward(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        expected = set(self.config.modalities)
        if set(inputs) != expected:
            raise InputError(
                f"inputs carry modalities {sorted(inputs)}, config wants "
                f"{sorted(expected)}")
        h, w = None, None
        for m in self.config.modalities:
            x = inputs[m]
            if x.dim() != 4 or x.shape[1] != MODALITY_CHANNELS[m]:
                raise InputError(
                    f"{m} input must be B x {MODALITY_CHANNELS[m]} x H x W, "
                    f"got {tuple(x.shape)}")
            if h is None:
                h, w = x.shape[2], x.shape[3]
            elif (x.shape[2], x.shape[3]) != (h, w):
                raise InputError("all modalities must share the spatial shape")
        if h % self.config.stride or w % self.config.stride:
            raise InputError(
                f"spatial shape {h}x{w} not divisible by 2^{self.config.num_scales}")
        # Normalization needs spatial extent at the coarsest scale.
        if h < 2 * self.config.stride or w < 2 * self.config.stride:
            raise InputError(
                f"spatial shape {h}x{w} leaves under 2 px at the coarsest scale")

        per_scale = [[] for _ in range(self.config.num_scales)]
        for m in self.config.modalities:
            for s, feat in enumerate(self.encoders[m](inputs[m])):
                per_scale[s].append(feat)
        fused = [torch.cat(feats, dim=1) for feats in per_scale]

        top = self.laterals[-1](fused[-1])
        for i in range(self.config.num_scales - 3, -1, -1):
            lateral = self.laterals[i](fused[i + 1])
            top = F.interpolate(top, scale_factor=2, mode="nearest") + lateral
            top = self.smooths[i](top)
        out = self.head(top)
        return F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# Functional interface


@dataclass
class ModelInputs:
    """Single-frame inputs keyed by modality, image-layout numpy arrays."""

    images: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for m in self.images:
            if m not in MODALITY_ORDER:
                raise InputError(f"unknown modality {m!r}")

    @property
    def present(self) -> set[str]:
        return set(self.images)


@dataclass
class GripMapOutput:
    """Dense per-pixel predictions; thickness channels are in millimeters."""

    grip: np.ndarray
    d_water: np.ndarray
    d_ice: np.ndarray
    d_snow: np.ndarray

    def __post_init__(self):
        shape = self.grip.shape
        for name in ("d_water", "d_ice", "d_snow"):
            if getattr(self, name).shape != shape:
                raise InputError("output channels must share one shape")
        for name in ("grip", "d_water", "d_ice", "d_snow"):
            if not np.isfinite(getattr(self, name)).all():
                raise InputError(f"non-finite values in {name} output")

    def stack(self) -> np.ndarray:
        return np.stack([self.grip, self.d_water, self.d_ice, self.d_snow])


def sample_to_inputs(sample, modalities) -> ModelInputs:
    """Build network inputs from a pipeline sample for the given modalities."""
    images = {}
    for m in modalities:
        if m == "rgb":
            images[m] = np.asarray(sample.rgb, dtype=np.float32)
        elif m == "thermal":
            images[m] = np.asarray(sample.thermal, dtype=np.float32)[..., None]
        elif m == "reflectance":
            images[m] = np.stack([
                np.asarray(sample.reflectance, dtype=np.float32),
                sample.reflectance_valid.astype(np.float32)], axis=-1)
        else:
            raise InputError(f"unknown modality {m!r}")
    return ModelInputs(images=images)


def inputs_to_tensors(inputs: ModelInputs, dtype=torch.float32
                      ) -> dict[str, torch.Tensor]:
    """H x W x C numpy images to a 1 x C x H x W tensor dict."""
    out = {}
    for m, img in inputs.images.items():
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.ndim != 3 or arr.shape[2] != MODALITY_CHANNELS[m]:
            raise InputError(
                f"{m} image must be H x W x {MODALITY_CHANNELS[m]}, "
                f"got {arr.shape}")
        out[m] = torch.from_numpy(arr).permute(2, 0, 1)[None].to(dtype)
    return out


def init_model(config: ModelConfig, seed: int) -> GripNet:
    """Build a network with fan-in-scaled random weights, deterministically."""
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        model = GripNet(config)
    return model


def forward(model: GripNet, inputs: ModelInputs, training: bool = False
            ) -> GripMapOutput:
    """Run one frame through the network.

    The input modality set must match the model config exactly; absent or
    extra modalities are rejected rather than zero-filled.
    """
    if inputs.present != set(model.config.modalities):
        raise InputError(
            f"inputs carry {sorted(inputs.present)}, model wants "
            f"{sorted(model.config.modalities)}")
    dtype = next(model.parameters()).dtype
    tensors = inputs_to_tensors(inputs, dtype=dtype)
    mode_was_training = model.training
    model.train(training)
    try:
        if training:
            maps = model(tensors)[0]
        else:
            with torch.no_grad():
                maps = model(tensors)[0]
    finally:
        model.train(mode_was_training)
    arr = maps.detach().cpu().numpy().astype(np.float64)
    return GripMapOutput(grip=arr[0], d_water=arr[1], d_ice=arr[2], d_snow=arr[3])


def count_params(config: ModelConfig) -> int:
    """Exact number of learnable scalars for a config."""
    model = init_model(config, seed=0)
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(path: Path | str, model: GripNet) -> None:
    """Write config text plus all named parameter tensors."""
    tensors = {name: tensor.detach().cpu().numpy()
               for name, tensor in model.state_dict().items()}
    write_checkpoint(path, model.config.to_text(), tensors)


def load_model(path: Path | str) -> GripNet:
    config_text, tensors = read_checkpoint(path)
    config = ModelConfig.from_text(config_text)
    model = GripNet(config)
    state = {name: torch.from_numpy(np.array(arr)) for name, arr in tensors.items()}
    if any(t.dtype == torch.float64 for t in state.values()):
        model.double()
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint tensors do not fit the config: {exc}") from exc
    return model
