"""LinkNet encoder/decoder producing a per-pixel tumor probability map."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

SIZE_MULTIPLE = 32


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LinkNetConfig:
    in_channels: int = 1
    encoder_filters: tuple[int, ...] = (64, 128, 256, 512)
    block_count: int = 4
    initial_kernel: int = 7
    initial_stride: int = 2
    pool_stride: int = 2
    head_channels: int = 32
    out_channels: int = 1
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_filters", tuple(int(f) for f in self.encoder_filters))
        if len(self.encoder_filters) != self.block_count:
            raise ConfigError(
                f"encoder_filters has {len(self.encoder_filters)} entries but block_count is {self.block_count}"
            )
        if self.block_count != 4 or self.initial_stride != 2 or self.pool_stride != 2:
            raise ConfigError("only the 4-block, stride-2/stride-2 topology is supported")
        counts = (self.in_channels, self.head_channels, self.out_channels, *self.encoder_filters)
        if any(c <= 0 for c in counts):
            raise ConfigError(f"channel counts must be positive: {counts}")
        if any(f < 4 for f in self.encoder_filters):
            raise ConfigError("encoder filters must be >= 4 (decoders reduce channels by 4)")
        if self.initial_kernel < 1 or self.initial_kernel % 2 == 0:
            raise ConfigError("initial_kernel must be a positive odd integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        return d


def _conv_bn_relu(cin, cout, k, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class EncoderBlock(nn.Module):
    """Residual unit: 3x3 conv (strided) -> 3x3 conv, projected shortcut when shapes change."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class DecoderBlock(nn.Module):
    # B, m, H, W -> B, m/4, H, W -> B, m/4, sH, sW -> B, n, sH, sW
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        mid = cin // 4
        self.reduce = _conv_bn_relu(cin, mid, 1)
        if stride == 2:
            up = nn.ConvTranspose2d(mid, mid, 3, stride=2, padding=1, output_padding=1, bias=False)
        else:
            up = nn.Conv2d(mid, mid, 3, padding=1, bias=False)
        self.up = nn.Sequential(up, nn.BatchNorm2d(mid), nn.ReLU(inplace=True))
        self.expand = _conv_bn_relu(mid, cout, 1)
        self.stride = stride

    def forward(self, x):
        return self.expand(self.up(self.reduce(x)))


class LinkNet(nn.Module):
    """Initial block, four encoders, four decoders with additive skips, sigmoid head.

    ``prior`` optionally holds a (H, W) probability map concatenated as a
    second input channel by :func:`model_input`.
    """

    def __init__(self, config: LinkNetConfig):
        super().__init__()
        self.config = config
        f = config.encoder_filters
        k = config.initial_kernel
        self.initial = nn.Sequential(
            nn.Conv2d(config.in_channels, f[0], k, stride=config.initial_stride, padding=k // 2, bias=False),
            nn.BatchNorm2d(f[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=config.pool_stride, padding=1),
        )
        self.encoders = nn.ModuleList(
            EncoderBlock(f[i - 1] if i else f[0], f[i], 1 if i == 0 else 2) for i in range(4)
        )
        # decoders[i] mirrors encoders[i]; applied deepest first
        self.decoders = nn.ModuleList(
            DecoderBlock(f[i], f[i - 1] if i else f[0], 1 if i == 0 else 2) for i in range(4)
        )
        h = config.head_channels
        self.head = nn.Sequential(
            nn.ConvTranspose2d(f[0], h, 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(h),
            nn.ReLU(inplace=True),
            nn.Conv2d(h, h, 3, padding=1, bias=False),
            nn.BatchNorm2d(h),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(h, config.out_channels, 2, stride=2),
            nn.Sigmoid(),
        )
        self.prior: torch.Tensor | None = None

    def forward(self, x):
        x = self.initial(x)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        x = skips[-1]
        for i in range(3, -1, -1):
            x = self.decoders[i](x)
            if i > 0:
                x = x + skips[i - 1]
        return self.head(x)

    @property
    def parameter_count(self) -> int:
        return count_parameters(self)


SegmentationModel = LinkNet


def _init_parameters(model: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=g)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_linknet(config: LinkNetConfig = LinkNetConfig()) -> LinkNet:
    model = LinkNet(config)
    _init_parameters(model, config.init_seed)
    # additive skips need equal shapes; check on the smallest legal input
    trace_shapes(model, (1, config.in_channels, SIZE_MULTIPLE, SIZE_MULTIPLE))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def check_input_shape(config: LinkNetConfig, shape) -> None:
    if len(shape) != 4:
        raise ShapeError(f"expected a (batch, channels, height, width) shape, got {tuple(shape)}")
    _, c, h, w = shape
    if c != config.in_channels:
        raise ShapeError(f"input has {c} channels, model expects {config.in_channels}")
    if h <= 0 or w <= 0 or h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise ShapeError(f"input size {h}x{w} is not divisible by {SIZE_MULTIPLE}")


class StageShape(NamedTuple):
    stage: str
    channels: int
    height: int
    width: int


@dataclass
class ShapeTrace:
    stages: list[StageShape] = field(default_factory=list)

    def __getitem__(self, name: str) -> StageShape:
        for s in self.stages:
            if s.stage == name:
                return s
        raise KeyError(name)

    def names(self) -> list[str]:
        return [s.stage for s in self.stages]


def trace_shapes(model: LinkNet, input_shape) -> ShapeTrace:
    """Per-stage (channels, height, width) from stride arithmetic alone."""
    cfg = model.config
    check_input_shape(cfg, input_shape)
    _, c, h, w = input_shape
    f = cfg.encoder_filters
    t = ShapeTrace([StageShape("input", c, h, w)])
    k = cfg.initial_kernel
    # conv: floor((n + 2p - k) / s) + 1 with p = k // 2
    h = (h + 2 * (k // 2) - k) // cfg.initial_stride + 1
    w = (w + 2 * (k // 2) - k) // cfg.initial_stride + 1
    t.stages.append(StageShape("initial_conv", f[0], h, w))
    h = (h + 2 - 3) // cfg.pool_stride + 1
    w = (w + 2 - 3) // cfg.pool_stride + 1
    t.stages.append(StageShape("initial", f[0], h, w))
    enc = []
    for i in range(4):
        if i:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        enc.append(StageShape(f"encoder{i + 1}", f[i], h, w))
        t.stages.append(enc[-1])
    for i in range(3, -1, -1):
        if i:
            h, w = 2 * h, 2 * w
        cout = f[i - 1] if i else f[0]
        t.stages.append(StageShape(f"decoder{i + 1}", cout, h, w))
        if i:
            skip = enc[i - 1]
            if (skip.channels, skip.height, skip.width) != (cout, h, w):
                raise ShapeError(
                    f"decoder{i + 1} output {(cout, h, w)} cannot be added to "
                    f"encoder{i} output {(skip.channels, skip.height, skip.width)}"
                )
    h, w = 2 * h, 2 * w
    t.stages.append(StageShape("head_upconv", cfg.head_channels, h, w))
    t.stages.append(StageShape("head_conv", cfg.head_channels, h, w))
    h, w = 2 * h, 2 * w
    t.stages.append(StageShape("output", cfg.out_channels, h, w))
    if (h, w) != tuple(input_shape[2:]):
        raise ShapeError(f"output {h}x{w} does not restore input {tuple(input_shape[2:])}")
    return t


def model_input(model: LinkNet, images: torch.Tensor) -> torch.Tensor:
    """Append the prior-map channel when the model was built for two inputs."""
    if model.config.in_channels == 2 and images.shape[1] == 1:
        if model.prior is None:
            raise ShapeError("model expects a prior-map channel but has no prior attached")
        prior = model.prior.to(images.dtype).to(images.device)
        images = torch.cat([images, prior.expand(images.shape[0], 1, *prior.shape[-2:])], dim=1)
    return images


@torch.no_grad()
def forward(model: LinkNet, batch: torch.Tensor) -> torch.Tensor:
    """Evaluation-mode probability maps for ``batch`` (N, C, H, W)."""
    batch = torch.as_tensor(batch, dtype=torch.float32)
    batch = model_input(model, batch.to(next(model.parameters()).device))
    check_input_shape(model.config, batch.shape)
    model.eval()
    return model(batch)


def save_checkpoint(model: LinkNet, path: str | os.PathLike) -> None:
    torch.save(
        {
            "format": "viewseg-linknet/1",
            "config": model.config.to_dict(),
            "init_seed": model.config.init_seed,
            "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
            "prior": None if model.prior is None else model.prior.detach().cpu(),
        },
        path,
    )


def load_checkpoint(path: str | os.PathLike, map_location="cpu") -> LinkNet:
    ckpt = torch.load(path, map_location=map_location, weights_only=True)
    if ckpt.get("format") != "viewseg-linknet/1":
        raise ValueError(f"{path}: not a viewseg checkpoint")
    model = LinkNet(LinkNetConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.prior = ckpt["prior"]
    model.eval()
    return model
