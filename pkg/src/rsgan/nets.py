"""Generator and discriminator networks.

Three encoders split an image into a contrast vector (``E_C``), a
rib-suppressed structure map (``E_S``) and a rib-bone structure map
(``E_B``). Four decoders rebuild the suppressed image (``G_Q``), the rib
residual (``G_R``), the bone projection (``G_B``) and the lung mask (``G_L``).
Discriminators are PatchGAN stacks without a final activation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DEMOD_EPS = 1e-8


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    base_channels: int = 8
    contrast_dim: int = 16
    feature_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        for k, v in asdict(self).items():
            if k != "seed" and v < 8:
                raise ValueError(f"{k} must be >= 8, got {v}")

    @classmethod
    def full_size(cls, seed: int = 0) -> "NetConfig":
        """Full-size layout: 320 px input, 256-d contrast and 256-channel structure maps."""
        return cls(image_size=320, base_channels=64, contrast_dim=256, feature_channels=256,
                   seed=seed)

    def decoder_channels(self) -> tuple[int, int, int]:
        f = self.feature_channels
        return (f, max(8, f // 2), max(8, f // 4))


def _check_image(x: torch.Tensor, size: int, name: str) -> None:
    if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != (size, size):
        raise ValueError(f"{name} expects N x 1 x {size} x {size} input, got {tuple(x.shape)}")


class ResBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1 projected) skip."""

    def __init__(self, cin, cout, norm=False, act="lrelu"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.norm1 = nn.InstanceNorm2d(cout, affine=True) if norm else nn.Identity()
        self.norm2 = nn.InstanceNorm2d(cout, affine=True) if norm else nn.Identity()
        self.act = nn.LeakyReLU(0.2) if act == "lrelu" else nn.ReLU()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class ContrastEncoder(nn.Module):
    """Four stride-2 3x3 convs, global average pooling and a linear layer."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        chans = [1, b, 2 * b, 4 * b, 8 * b]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(chans[-1], cfg.contrast_dim)

    def forward(self, x):
        _check_image(x, self.cfg.image_size, "E_C")
        h = self.convs(x).mean(dim=(2, 3))
        return self.fc(h)


class StructureEncoder(nn.Module):
    """Two stride-2 3x3 convs followed by a residual block at 1/4 resolution."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        self.down = nn.Sequential(
            nn.Conv2d(1, b, 3, stride=2, padding=1), nn.InstanceNorm2d(b, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * b, affine=True),
            nn.LeakyReLU(0.2),
        )
        self.res = ResBlock(2 * b, cfg.feature_channels, norm=True)

    def forward(self, x):
        _check_image(x, self.cfg.image_size, "structure encoder")
        return self.res(self.down(x))


class ModulatedConv(nn.Module):
    """3x3 convolution with style modulation and weight demodulation.

    The style vector is mapped affinely to one scale per input channel
    (bias initialised to 1); the scaled kernel of every output channel is
    then divided by its L2 norm.
    """

    def __init__(self, cin, cout, style_dim, kernel_size=3):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, kernel_size
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.affine = nn.Linear(style_dim, cin)
        # same values init_weights assigns, so a standalone layer is usable
        nn.init.normal_(self.weight, 0.0, 0.02)
        nn.init.normal_(self.affine.weight, 0.0, 0.02)
        nn.init.ones_(self.affine.bias)

    def modulated_weight(self, style: torch.Tensor) -> torch.Tensor:
        """Per-sample demodulated kernels, N x cout x cin x k x k."""
        s = self.affine(style)
        w = self.weight[None] * s[:, None, :, None, None]
        d = torch.rsqrt((w * w).sum(dim=(2, 3, 4), keepdim=True) + DEMOD_EPS)
        return w * d

    def forward(self, x, style):
        if style.shape[-1] != self.affine.in_features:
            raise ValueError(f"style has length {style.shape[-1]}, "
                             f"expected {self.affine.in_features}")
        n, c, h, w_ = x.shape
        if c != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got {c}")
        wt = self.modulated_weight(style)
        out = F.conv2d(x.reshape(1, n * c, h, w_), wt.reshape(n * self.cout, c, self.k, self.k),
                       padding=self.k // 2, groups=n)
        return out.reshape(n, self.cout, h, w_) + self.bias[None, :, None, None]


class DemodBlock(nn.Module):
    def __init__(self, cin, cout, style_dim):
        super().__init__()
        self.conv = ModulatedConv(cin, cout, style_dim)
        self.act = nn.ReLU()

    def forward(self, x, style):
        return self.act(self.conv(x, style))


class _Decoder(nn.Module):
    """Three blocks at 1/4, 1/2 and full resolution, each with a 1x1 image branch.

    A lower-resolution image is upsampled (bilinear, x2) and added to the
    next block's image, so the output is the sum of all three branches.
    """

    styled = False

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.decoder_channels()
        ins = (cfg.feature_channels, c1, c2)
        outs = (c1, c2, c3)
        if self.styled:
            self.blocks = nn.ModuleList(DemodBlock(i, o, cfg.contrast_dim) for i, o in zip(ins, outs))
        else:
            self.blocks = nn.ModuleList(ResBlock(i, o, act="relu") for i, o in zip(ins, outs))
        self.to_image = nn.ModuleList(nn.Conv2d(o, 1, 1) for o in outs)

    def _run(self, feat, style=None, return_stages=False):
        q = self.cfg.image_size // 4
        if feat.dim() != 4 or feat.shape[1] != self.cfg.feature_channels \
                or tuple(feat.shape[-2:]) != (q, q):
            raise ValueError(f"structure map must be N x {self.cfg.feature_channels} x {q} x {q}, "
                             f"got {tuple(feat.shape)}")
        h = feat
        img = None
        stages = []
        for i, (block, head) in enumerate(zip(self.blocks, self.to_image)):
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = block(h, style) if self.styled else block(h)
            out = head(h)
            stages.append(out)
            if img is not None:
                out = out + F.interpolate(img, scale_factor=2, mode="bilinear",
                                          align_corners=False)
            img = out
        return (img, stages) if return_stages else img


class StyledDecoder(_Decoder):
    styled = True

    def forward(self, structure, contrast, return_stages=False):
        return self._run(structure, contrast, return_stages)


class PlainDecoder(_Decoder):
    def __init__(self, cfg: NetConfig, activation: str = "tanh"):
        super().__init__(cfg)
        self.activation = activation

    def forward(self, structure, return_stages=False):
        img, stages = self._run(structure, return_stages=True)
        img = torch.tanh(img) if self.activation == "tanh" else torch.sigmoid(img)
        return (img, stages) if return_stages else img


class PatchDiscriminator(nn.Module):
    """Four stride-2 4x4 convs and a 1x1 conv; output is input size / 16."""

    def __init__(self, in_channels: int, base_channels: int):
        super().__init__()
        b = base_channels
        chans = [in_channels, b, 2 * b, 4 * b, 8 * b]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(chans[-1], 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or min(x.shape[-2:]) < 16:
            raise ValueError(f"discriminator input must be N x C x H x W with H, W >= 16, "
                             f"got {tuple(x.shape)}")
        return self.net(x)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, ModulatedConv):
            nn.init.normal_(m.weight, 0.0, 0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for m in module.modules():
        # modulation starts as the identity scale
        if isinstance(m, ModulatedConv):
            nn.init.normal_(m.affine.weight, 0.0, 0.02)
            nn.init.ones_(m.affine.bias)
        # no normalization inside the contrast encoder: fan-in scaling keeps its output from vanishing
        elif isinstance(m, ContrastEncoder):
            for layer in m.modules():
                if isinstance(layer, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(layer.weight, a=0.2, nonlinearity="leaky_relu")


GENERATOR_NAMES = ("E_C", "E_S", "E_B", "G_Q", "G_R", "G_B", "G_L", "E_L")
DISCRIMINATOR_NAMES = ("D_x", "D_d", "D_B", "D_grad")


class GeneratorBundle(nn.Module):
    """All generator sub-networks.

    ``E_L`` is a structure encoder with the ``E_S`` architecture that feeds
    only the lung decoder. It trains with ``G_L`` during lung pretraining and
    is frozen with it afterwards, so the lung masks stay fixed while ``E_S``
    trains on.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        with _seeded(g):
            self.E_C = ContrastEncoder(cfg)
            self.E_S = StructureEncoder(cfg)
            self.E_B = StructureEncoder(cfg)
            self.G_Q = StyledDecoder(cfg)
            self.G_R = StyledDecoder(cfg)
            self.G_B = PlainDecoder(cfg, "tanh")
            self.G_L = PlainDecoder(cfg, "sigmoid")
            self.E_L = StructureEncoder(cfg)
            init_weights(self)
        self.lung_frozen = False

    def freeze_lung(self) -> None:
        self.lung_frozen = True
        for p in list(self.G_L.parameters()) + list(self.E_L.parameters()):
            p.requires_grad_(False)

    def lung_mask(self, x):
        return self.G_L(self.E_L(x))

    def trainable(self, names=None):
        names = names or ("E_C", "E_S", "E_B", "G_Q", "G_R", "G_B")
        return [p for n in names for p in getattr(self, n).parameters() if p.requires_grad]


class DiscriminatorBundle(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed + 7919)
        with _seeded(g):
            self.D_x = PatchDiscriminator(1, cfg.base_channels)
            self.D_d = PatchDiscriminator(1, cfg.base_channels)
            self.D_B = PatchDiscriminator(1, cfg.base_channels)
            self.D_grad = PatchDiscriminator(2, cfg.base_channels)
            init_weights(self)


class _seeded:
    """Route default-RNG initialisation through a private generator."""

    def __init__(self, gen: torch.Generator):
        self.gen = gen

    def __enter__(self):
        self._state = torch.random.get_rng_state()
        torch.random.set_rng_state(self.gen.get_state())

    def __exit__(self, *exc):
        torch.random.set_rng_state(self._state)
        return False


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def demod_norm_deviation(gen: GeneratorBundle, style_dim: int | None = None,
                         n_probe: int = 2, seed: int = 0) -> float:
    """Largest |norm - 1| of demodulated kernels over every modulated conv."""
    style_dim = style_dim or gen.cfg.contrast_dim
    g = torch.Generator().manual_seed(seed)
    styles = torch.randn(n_probe, style_dim, generator=g)
    worst = 0.0
    with torch.no_grad():
        for m in gen.modules():
            if isinstance(m, ModulatedConv):
                w = m.modulated_weight(styles)
                norms = w.pow(2).sum(dim=(2, 3, 4)).sqrt()
                worst = max(worst, float((norms - 1).abs().max()))
    return worst


__all__ = [
    "NetConfig", "ContrastEncoder", "StructureEncoder", "ModulatedConv", "DemodBlock",
    "StyledDecoder", "PlainDecoder", "PatchDiscriminator", "GeneratorBundle",
    "DiscriminatorBundle", "ResBlock", "demod_norm_deviation", "param_count",
]
