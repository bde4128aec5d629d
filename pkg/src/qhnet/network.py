"""QHNet blocks and the encoder-decoder purifier.

All layers take flat feature maps ``(B, 4C, H, W)`` in component-major
order (see :mod:`qhnet.qtensor`). ``C`` counts quaternion channels.
Setting ``algebra="real"`` builds the real-valued twin: the same graph with
ordinary convolutions over ``4C`` real channels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .polythresh import PolyThresholdLayer
from .qtensor import QTensor, from_rgb, hamilton_weight, init_qkernel
from .wht import is_power_of_two, iwht2d, wht2d

__all__ = [
    "QHNetConfig",
    "QConv2d",
    "QHPDB",
    "ChannelAttention",
    "SpatialAttention",
    "QDRB",
    "QFARB",
    "QHNet",
    "parameter_breakdown",
    "count_parameters",
    "qhpdb_forward",
    "qdrb_forward",
    "qfarb_forward",
]


@dataclass
class QHNetConfig:
    base_q_channels: int = 8
    blocks_per_scale: int = 2
    scales: int = 3
    pt_degree: int = 5
    attention_reduction: int = 2
    pt_delta_init: float = 0.05
    pt_steepness: float = 1.0
    pt_coeffs_init: str = "identity"
    use_qhpdb: bool = True
    use_qfarb: bool = True
    use_attention: bool = True
    use_pt: bool = True
    algebra: str = "quaternion"

    def __post_init__(self):
        if self.scales != 3:
            raise ValueError("QHNet uses exactly 3 scales")
        if self.blocks_per_scale < 1 or self.base_q_channels < 1:
            raise ValueError("blocks_per_scale and base_q_channels must be >= 1")
        if self.algebra not in ("quaternion", "real"):
            raise ValueError(f"algebra must be 'quaternion' or 'real', got {self.algebra!r}")

    @classmethod
    def toy(cls, **overrides) -> "QHNetConfig":
        return cls(**{"base_q_channels": 4, "blocks_per_scale": 1, "pt_steepness": 20.0, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QHNetConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class QConv2d(nn.Module):
    """Quaternion convolution over flat component-major maps."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(init_qkernel(out_channels, in_channels, kernel_size))
        self.bias = nn.Parameter(torch.zeros(4 * out_channels)) if bias else None

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            self.weight.copy_(init_qkernel(self.out_channels, self.in_channels, self.weight.shape[-1], generator))
            if self.bias is not None:
                self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, hamilton_weight(self.weight), self.bias, stride=self.stride, padding=self.padding)


class _RealConv2d(nn.Conv2d):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, bias: bool = True):
        super().__init__(4 * in_channels, 4 * out_channels, kernel_size, stride, kernel_size // 2, bias=bias)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        k = self.kernel_size[0]
        bound = (6.0 / ((self.in_channels + self.out_channels) * k * k)) ** 0.5
        with torch.no_grad():
            u = torch.rand(self.weight.shape, generator=generator)
            self.weight.copy_((2 * u - 1) * bound)
            if self.bias is not None:
                self.bias.zero_()


def _conv(cfg: QHNetConfig, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True) -> nn.Module:
    cls = QConv2d if cfg.algebra == "quaternion" else _RealConv2d
    return cls(cin, cout, k, stride, bias)


def _gate(cfg: QHNetConfig, logits: torch.Tensor) -> torch.Tensor:
    """Real attention gate from conv logits.

    Quaternion: sigmoid per component, averaged over the four components,
    then shared by all four. Real twin: sigmoid per channel.
    """
    g = torch.sigmoid(logits)
    if cfg.algebra == "real":
        return g
    b, c4 = g.shape[:2]
    g = g.reshape(b, 4, c4 // 4, *g.shape[2:]).mean(dim=1, keepdim=True)
    return g.expand(b, 4, c4 // 4, *g.shape[3:]).reshape(b, c4, *g.shape[3:])


class QHPDB(nn.Module):
    """WHT -> pointwise quaternion scaling -> thresholding -> inverse WHT."""

    def __init__(self, cfg: QHNetConfig, width: int):
        super().__init__()
        self.scale = _conv(cfg, width, width, k=1, bias=False)
        self.pt = (
            PolyThresholdLayer(
                4 * width,
                n_terms=cfg.pt_degree,
                delta_init=cfg.pt_delta_init,
                coeffs_init=cfg.pt_coeffs_init,
                steepness=cfg.pt_steepness,
            )
            if cfg.use_pt
            else None
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if not (is_power_of_two(h) and is_power_of_two(w)):
            raise ValueError(f"QHPDB needs power-of-two spatial dims, got {h}x{w}")
        y = self.scale(wht2d(x))
        if self.pt is not None:
            y = self.pt(y)
        return iwht2d(y)


class ChannelAttention(nn.Module):
    def __init__(self, cfg: QHNetConfig, width: int):
        super().__init__()
        self.cfg = cfg
        reduced = max(1, width // cfg.attention_reduction)
        self.squeeze = _conv(cfg, width, reduced, k=1)
        self.expand = _conv(cfg, reduced, width, k=1)

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(-2, -1), keepdim=True)
        return _gate(self.cfg, self.expand(torch.relu(self.squeeze(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention_map(x)


class SpatialAttention(nn.Module):
    def __init__(self, cfg: QHNetConfig, width: int):
        super().__init__()
        self.cfg = cfg
        reduced = max(1, width // cfg.attention_reduction)
        self.conv1 = _conv(cfg, width, width)
        self.conv2 = _conv(cfg, width, reduced)
        self.conv3 = _conv(cfg, reduced, width)

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        return _gate(self.cfg, self.conv3(torch.relu(self.conv2(self.conv1(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention_map(x)


class QDRB(nn.Module):
    """Residual block: ``SA(CA(QHPDB(conv1 x) + conv2 x)) + x``.

    Without QHPDB the transform-domain branch becomes a plain 3×3 conv.
    """

    def __init__(self, cfg: QHNetConfig, width: int):
        super().__init__()
        self.conv1 = _conv(cfg, width, width)
        self.hpdb = QHPDB(cfg, width) if cfg.use_qhpdb else _conv(cfg, width, width, bias=False)
        self.conv2 = _conv(cfg, width, width)
        self.ca = ChannelAttention(cfg, width) if cfg.use_attention else None
        self.sa = SpatialAttention(cfg, width) if cfg.use_attention else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.hpdb(self.conv1(x)) + self.conv2(x)
        if self.ca is not None:
            h = self.sa(self.ca(h))
        return h + x


class QFARB(nn.Module):
    """Blend of features and a pooled refinement: ``y * m2 + (1 - m2) * m1``."""

    def __init__(self, cfg: QHNetConfig, width: int):
        super().__init__()
        self.refine1 = _conv(cfg, width, width, k=1)
        self.refine2 = _conv(cfg, width, width, k=1)
        self.attn1 = _conv(cfg, width, width)
        self.attn2 = _conv(cfg, width, width)

    def maps(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = y.mean(dim=(-2, -1), keepdim=True)
        m1 = torch.tanh(self.refine2(self.refine1(pooled)))
        m2 = torch.sigmoid(self.attn2(self.attn1(y)))
        return m1, m2

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        m1, m2 = self.maps(y)
        return y * m2 + (1 - m2) * m1


def _stage(cfg: QHNetConfig, width: int) -> nn.Sequential:
    return nn.Sequential(*[QDRB(cfg, width) for _ in range(cfg.blocks_per_scale)])


class _Up(nn.Module):
    def __init__(self, cfg: QHNetConfig, cin: int, cout: int):
        super().__init__()
        self.conv = _conv(cfg, cin, cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class QHNet(nn.Module):
    """Encoder-decoder purifier that predicts and subtracts the attack noise.

    ``model.train()`` puts every thresholding layer in surrogate mode and
    ``model.eval()`` in hard mode, which blocks input gradients.
    """

    def __init__(self, config: QHNetConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = self.config = config or QHNetConfig()
        c0 = cfg.base_q_channels
        c1, c2 = 2 * c0, 4 * c0
        self.shallow = _conv(cfg, 1, c0)
        self.enc0 = _stage(cfg, c0)
        self.down0 = _conv(cfg, c0, c1, stride=2)
        self.enc1 = _stage(cfg, c1)
        self.down1 = _conv(cfg, c1, c2, stride=2)
        self.mid = _stage(cfg, c2)
        self.up1 = _Up(cfg, c2, c1)
        self.dec1 = _stage(cfg, c1)
        self.up0 = _Up(cfg, c1, c0)
        self.dec0 = _stage(cfg, c0)
        self.qfarb = QFARB(cfg, c0) if cfg.use_qfarb else None
        self.head = _conv(cfg, c0, 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (QConv2d, _RealConv2d)):
                m.reset_parameters(g)
        # residual head starts at zero so the untrained net is the identity
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        """Predicted noise as a flat one-quaternion map ``(B, 4, H, W)``."""
        f0 = self.enc0(self.shallow(x))
        f1 = self.enc1(self.down0(f0))
        f2 = self.mid(self.down1(f1))
        d1 = self.dec1(self.up1(f2) + f1)
        d0 = self.dec0(self.up0(d1) + f0)
        if self.qfarb is not None:
            d0 = self.qfarb(d0)
        return self.head(d0)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        if not (is_power_of_two(h) and is_power_of_two(w)) or min(h, w) < 4:
            raise ValueError(f"input dims must be powers of two >= 4, got {h}x{w}")
        q = from_rgb(image).flat()
        res = self.residual(q)
        return (image - res[:, 1:4]).clamp(0.0, 1.0)

    def pt_layers(self) -> list[PolyThresholdLayer]:
        return [m for m in self.modules() if isinstance(m, PolyThresholdLayer)]

    def pt_mode(self) -> set[str]:
        return {m.mode for m in self.pt_layers()}

    def load_pt_coeffs(self, coeffs) -> None:
        for m in self.pt_layers():
            m.load_coeffs(coeffs)


def parameter_breakdown(model: nn.Module) -> dict[str, int]:
    """Real parameter counts split into network weights and thresholding parameters."""
    pt = {id(p) for m in model.modules() if isinstance(m, PolyThresholdLayer) for p in m.parameters()}
    weights = sum(p.numel() for p in model.parameters() if id(p) not in pt)
    thresholds = sum(p.numel() for p in model.parameters() if id(p) in pt)
    return {"weights": weights, "thresholds": thresholds, "total": weights + thresholds}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def qhpdb_forward(x: QTensor, block: QHPDB) -> QTensor:
    return QTensor.from_flat(block(x.flat()))


def qdrb_forward(x: QTensor, block: QDRB) -> QTensor:
    return QTensor.from_flat(block(x.flat()))


def qfarb_forward(y: QTensor, block: QFARB) -> QTensor:
    return QTensor.from_flat(block(y.flat()))
