"""U-Net generator with a ViT bottleneck carrying one style token, plus a patch discriminator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ParameterError, ShapeError


@dataclass
class GeneratorConfig:
    input_size: int = 64
    stage_channels: tuple[int, ...] = (16, 32, 64)
    scales: tuple[int, ...] = (1, 2, 4, 16)
    token_dim: int = 64
    vit_depth: int = 2
    vit_heads: int = 4
    mlp_ratio: float = 2.0
    extra_tokens: int = 1
    init_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.scales = tuple(int(k) for k in self.scales)
        self.validate()

    def validate(self):
        ks = self.scales
        if self.extra_tokens != 1:
            raise ConfigError("exactly one extra (style) token is supported")
        if len(ks) < 2 or ks[0] != 1 or list(ks) != sorted(set(ks)):
            raise ConfigError(f"scales must be strictly increasing and start at 1, got {ks}")
        for k in ks:
            if k & (k - 1) or k > self.input_size:
                raise ConfigError(f"scale {k} must be a power of two <= input_size {self.input_size}")
        if self.input_size % ks[-1]:
            raise ConfigError(f"input_size {self.input_size} not divisible by bottleneck factor {ks[-1]}")
        if len(self.stage_channels) != len(ks) - 1:
            raise ConfigError("need one stage channel count per convolutional scale "
                              f"({len(ks) - 1}), got {len(self.stage_channels)}")
        if self.token_dim % self.vit_heads:
            raise ConfigError("token_dim must be divisible by vit_heads")

    @property
    def bottleneck_factor(self) -> int:
        return self.scales[-1]

    @property
    def grid_size(self) -> int:
        return self.input_size // self.bottleneck_factor

    def channels_at(self, scale: int) -> int:
        if scale == self.bottleneck_factor:
            return self.token_dim
        return self.stage_channels[self.scales.index(scale)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["scales"] = list(self.scales)
        return d


class FeaturePyramid:
    """Per-scale encoder maps ``{k: (B, C_k, H/k, W/k)}``; the largest k is the token grid."""

    def __init__(self, maps: dict[int, torch.Tensor]):
        self.maps = dict(sorted(maps.items()))

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(self.maps)

    def __getitem__(self, k: int) -> torch.Tensor:
        return self.maps[k]

    def __iter__(self) -> Iterator[int]:
        return iter(self.maps)

    def __len__(self):
        return len(self.maps)

    def items(self):
        return self.maps.items()

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid({k: v.detach() for k, v in self.maps.items()})


class GeneratorOutput(NamedTuple):
    image: torch.Tensor
    pyramid: FeaturePyramid
    style: torch.Tensor  # (B, D) final extra token after the transformer


def _conv(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(cout, affine=True), nn.GELU()]


def _conv_block(cin, cout):
    return nn.Sequential(*_conv(cin, cout), *_conv(cout, cout))


def _upsample(cin, cout, factor):
    # nearest upsampling + conv avoids transposed-convolution checkerboards
    return nn.Sequential(nn.Upsample(scale_factor=factor, mode="nearest"), *_conv(cin, cout))


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class StyleModulation(nn.Module):
    """FiLM-style per-channel scale/shift driven by the style token."""

    def __init__(self, token_dim, channels):
        super().__init__()
        self.affine = nn.Linear(token_dim, 2 * channels)

    def forward(self, x, style):
        gamma, beta = self.affine(style).chunk(2, dim=-1)
        return x * (1 + gamma[..., None, None]) + beta[..., None, None]


def init_weights(module: nn.Module, seed: int, gain: float = 1.0) -> None:
    """Seeded normal init, std = gain / sqrt(fan_in); biases zero."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:  # LayerNorm weights
                p.fill_(1.0)
            elif "style_token" in name or "pos_embed" in name:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.02)
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * (gain / math.sqrt(fan_in)))


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        ks, chans, dim = cfg.scales, cfg.stage_channels, cfg.token_dim

        stages = [_conv_block(3, chans[0])]
        for i in range(1, len(chans)):
            r = ks[i] // ks[i - 1]
            stages.append(nn.Sequential(nn.Conv2d(chans[i - 1], chans[i], r, stride=r),
                                        nn.InstanceNorm2d(chans[i], affine=True), nn.GELU(),
                                        *_conv(chans[i], chans[i])))
        self.stages = nn.ModuleList(stages)

        r = ks[-1] // ks[-2]
        self.patch_embed = nn.Conv2d(chans[-1], dim, r, stride=r)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.grid_size ** 2, dim))
        self.style_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.blocks = nn.ModuleList(TransformerBlock(dim, cfg.vit_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.vit_depth))
        self.norm = nn.LayerNorm(dim)

        self.bottleneck_mod = StyleModulation(dim, dim)
        self.up_bottleneck = _upsample(dim, chans[-1], r)
        decoders, mods, ups = [], [], []
        for i in reversed(range(len(chans))):
            decoders.append(nn.Sequential(*_conv(2 * chans[i], chans[i])))
            mods.append(StyleModulation(dim, chans[i]))
            if i > 0:
                step = ks[i] // ks[i - 1]
                ups.append(_upsample(chans[i], chans[i - 1], step))
        self.decoders = nn.ModuleList(decoders)
        self.modulations = nn.ModuleList(mods)
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(chans[0], 3, 1)
        init_weights(self, cfg.seed, cfg.init_gain)

    @property
    def scales(self):
        return self.config.scales

    def _check_input(self, x):
        n = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2:] != (n, n):
            raise ShapeError(f"expected input (B, 3, {n}, {n}), got {tuple(x.shape)}")

    def _encode(self, x):
        self._check_input(x)
        maps = {}
        h = x
        skips = []
        for k, stage in zip(self.config.scales, self.stages):
            h = stage(h)
            maps[k] = h
            skips.append(h)
        tokens = self.patch_embed(h)
        b, d, gh, gw = tokens.shape
        seq = tokens.flatten(2).transpose(1, 2) + self.pos_embed
        seq = torch.cat([self.style_token.expand(b, -1, -1), seq], dim=1)
        for blk in self.blocks:
            seq = blk(seq)
        seq = self.norm(seq)
        style = seq[:, 0]
        grid = seq[:, 1:].transpose(1, 2).reshape(b, d, gh, gw)
        maps[self.config.bottleneck_factor] = grid
        return FeaturePyramid(maps), skips, style

    def encode(self, x) -> FeaturePyramid:
        return self._encode(x)[0]

    def decode(self, grid, skips, style):
        h = self.up_bottleneck(self.bottleneck_mod(grid, style))
        for i, (dec, mod) in enumerate(zip(self.decoders, self.modulations)):
            h = mod(dec(torch.cat([h, skips[-1 - i]], dim=1)), style)
            if i < len(self.ups):
                h = self.ups[i](h)
        return torch.tanh(self.head(h))

    def forward(self, x, style_override: Optional[torch.Tensor] = None,
                style_transform: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> GeneratorOutput:
        """Translate ``x``.

        The decoder is driven by the style token read back from the transformer.
        ``style_override`` replaces that token, ``style_transform`` maps it
        (used for prototype fusion); the returned ``style`` is always the
        network's own token.
        """
        pyramid, skips, style = self._encode(x)
        drive = style
        if style_override is not None:
            drive = torch.as_tensor(style_override, dtype=style.dtype, device=style.device)
            if drive.shape[-1] != self.config.token_dim:
                raise ShapeError(f"style override has dimension {drive.shape[-1]}, "
                                 f"expected {self.config.token_dim}")
            drive = drive.expand_as(style)
        elif style_transform is not None:
            drive = style_transform(style)
        image = self.decode(pyramid[self.config.bottleneck_factor], skips, drive)
        return GeneratorOutput(image, pyramid, style)

    def translate(self, x, **kw) -> torch.Tensor:
        return self(x, **kw).image


class PatchDiscriminator(nn.Module):
    """Strided patch discriminator: ``n_stages`` stride-2 convolutions then a 1-channel head."""

    def __init__(self, base_channels: int = 32, n_stages: int = 3, seed: int = 0, init_gain: float = 1.0):
        super().__init__()
        layers, cin = [], 3
        for i in range(n_stages):
            cout = base_channels * 2 ** i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        init_weights(self, seed, init_gain)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        return self.net(x)


def check_finite_parameters(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite parameter {name}")


# ---------------------------------------------------------------- masked autoencoder pretraining

def random_patch_mask(batch: int, grid: int, mask_ratio: float, generator: torch.Generator) -> torch.Tensor:
    """Boolean (B, grid, grid) mask with exactly floor(ratio * grid**2) masked patches per sample."""
    if not 0.0 < mask_ratio < 1.0:
        raise ParameterError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    n = grid * grid
    n_masked = int(math.floor(mask_ratio * n))
    mask = torch.zeros(batch, n, dtype=torch.bool)
    for b in range(batch):
        mask[b, torch.randperm(n, generator=generator)[:n_masked]] = True
    return mask.view(batch, grid, grid)


def expand_patch_mask(mask: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, g, g) patch mask -> (B, 1, g*patch, g*patch) pixel mask."""
    return mask.repeat_interleave(patch, 1).repeat_interleave(patch, 2)[:, None]


def masked_reconstruction_loss(pred, target, pixel_mask) -> torch.Tensor:
    """Mean squared error over masked pixels (all channels) only."""
    m = pixel_mask.to(pred.dtype).expand_as(pred)
    denom = m.sum()
    if denom == 0:
        return pred.new_zeros(())
    return (((pred - target) ** 2) * m).sum() / denom


def mae_pretrain_step(model: Generator, optimizer: torch.optim.Optimizer, batch: torch.Tensor,
                      mask_ratio: float, generator: torch.Generator) -> float:
    """One masked-autoencoder step on the generator backbone; returns the loss value.

    Masked patches live on the bottleneck token grid (patch = bottleneck factor
    pixels) and are zeroed in the input.
    """
    cfg = model.config
    mask = random_patch_mask(batch.shape[0], cfg.grid_size, mask_ratio, generator)
    pixel_mask = expand_patch_mask(mask, cfg.bottleneck_factor)
    masked_input = batch.masked_fill(pixel_mask, 0.0)
    pred = model(masked_input).image
    loss = masked_reconstruction_loss(pred, batch, pixel_mask)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())
