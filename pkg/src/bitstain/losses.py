"""Training objectives: multiscale content consistency, cycle/identity, LSGAN and style statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import torch

from .errors import ConfigError, ShapeError
from .networks import FeaturePyramid, GeneratorConfig
from .style import token_stats


@dataclass
class ChannelSubset:
    """Channel indices compared at each scale; ``None`` means every channel."""

    indices: dict[int, Optional[tuple[int, ...]]]
    rule: str = "first"

    def select(self, k: int, fmap: torch.Tensor) -> torch.Tensor:
        idx = self.indices.get(k)
        if idx is None:
            return fmap
        return fmap[:, list(idx)]


def build_channel_subset(config: GeneratorConfig, n_channels: int = 16, rule: str = "first",
                         seed: int = 0) -> ChannelSubset:
    """Full channels at k=1 and at the token grid, ``n_channels`` at the intermediate scales.

    ``rule="first"`` keeps the first N channels; ``rule="random"`` draws a fixed
    seeded subset. Both are deterministic in the configuration.
    """
    if rule not in ("first", "random"):
        raise ConfigError(f"unknown channel subset rule {rule!r}")
    gen = torch.Generator().manual_seed(int(seed))
    indices: dict[int, Optional[tuple[int, ...]]] = {}
    for k in config.scales:
        c = config.channels_at(k)
        if k == 1 or k == config.bottleneck_factor or n_channels >= c:
            indices[k] = None
        elif rule == "first":
            indices[k] = tuple(range(n_channels))
        else:
            indices[k] = tuple(sorted(torch.randperm(c, generator=gen)[:n_channels].tolist()))
    return ChannelSubset(indices, rule)


def mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def multiscale_content_loss(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid,
                            subset: Optional[ChannelSubset] = None, stop_grad_on: str = "b") -> torch.Tensor:
    """Average over scales of the mean absolute difference between channel-subsetted maps.

    ``stop_grad_on`` ("a", "b" or "none") names the operand treated as a constant target.
    """
    if stop_grad_on not in ("a", "b", "none"):
        raise ValueError(f"stop_grad_on must be 'a', 'b' or 'none', got {stop_grad_on!r}")
    if tuple(pyr_a.scales) != tuple(pyr_b.scales):
        raise ShapeError(f"scale sets differ: {pyr_a.scales} vs {pyr_b.scales}")
    per_scale = []
    for k in pyr_a.scales:
        fa, fb = pyr_a[k], pyr_b[k]
        if subset is not None:
            fa, fb = subset.select(k, fa), subset.select(k, fb)
        if fa.shape != fb.shape:
            raise ShapeError(f"scale {k}: shapes {tuple(fa.shape)} and {tuple(fb.shape)} differ")
        if stop_grad_on == "a":
            fa = fa.detach()
        elif stop_grad_on == "b":
            fb = fb.detach()
        per_scale.append(mean_l1(fa, fb))
    return torch.stack(per_scale).mean()


def check_compatible(g_b2h, g_h2b) -> None:
    ca, cb = g_b2h.config, g_h2b.config
    if (ca.scales != cb.scales or ca.stage_channels != cb.stage_channels
            or ca.token_dim != cb.token_dim or ca.input_size != cb.input_size):
        raise ConfigError("generators must share scales, stage channels, token dim and input size "
                          "for their features to be comparable")


def msc_pair(pyr_bit_online, pyr_bit_target, pyr_he_online, pyr_he_target,
             subset: Optional[ChannelSubset] = None):
    """``(L_BIT, L_HE)`` from already computed pyramids; targets are treated as constants."""
    l_bit = multiscale_content_loss(pyr_bit_online, pyr_bit_target, subset, stop_grad_on="b")
    l_he = multiscale_content_loss(pyr_he_online, pyr_he_target, subset, stop_grad_on="b")
    return l_bit, l_he


def bidirectional_msc(x_bit, y_he, g_b2h, g_h2b, subset: Optional[ChannelSubset] = None,
                      fake_he=None, fake_bit=None):
    """Return ``(L_BIT, L_HE)``.

    L_BIT compares the BIT->H&E encoder features of ``x_bit`` with the (constant)
    H&E->BIT encoder features of its translation; L_HE mirrors it. Translations
    may be passed in when the caller already computed them.
    """
    check_compatible(g_b2h, g_h2b)
    if fake_he is None:
        fake_he = _image(g_b2h, x_bit)
    if fake_bit is None:
        fake_bit = _image(g_h2b, y_he)
    with torch.no_grad():
        target_bit = g_h2b.encode(fake_he)
        target_he = g_b2h.encode(fake_bit)
    return msc_pair(g_b2h.encode(x_bit), target_bit, g_h2b.encode(y_he), target_he, subset)


def _image(g, x):
    out = g(x)
    return out.image if hasattr(out, "image") else out


def cycle_loss(x, g_fwd: Callable, g_bwd: Callable) -> torch.Tensor:
    return mean_l1(x, _image(g_bwd, _image(g_fwd, x)))


def identity_loss(y, g: Callable) -> torch.Tensor:
    return mean_l1(y, _image(g, y))


def lsgan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * (((d_real - 1) ** 2).mean() + (d_fake ** 2).mean())


def lsgan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return ((d_fake - 1) ** 2).mean()


def adversarial_losses(D: Callable, real, fake):
    """Least-squares GAN objectives ``(d_loss, g_loss)``; ``d_loss`` sees ``fake`` detached."""
    d_loss = lsgan_d_loss(D(real), D(fake.detach()))
    g_loss = lsgan_g_loss(D(fake))
    return d_loss, g_loss


def style_statistics_loss(s_fake: torch.Tensor, s_real: torch.Tensor) -> torch.Tensor:
    """Squared gap in token mean and std; ``s_real`` is a constant target. Batched tokens are averaged."""
    s_fake = torch.as_tensor(s_fake)
    s_real = torch.as_tensor(s_real)
    if s_fake.shape[-1] != s_real.shape[-1]:
        raise ShapeError(f"token dims differ: {s_fake.shape[-1]} vs {s_real.shape[-1]}")
    mu_f, sigma_f = token_stats(s_fake)
    with torch.no_grad():
        mu_r, sigma_r = token_stats(s_real.detach())
    return ((mu_f - mu_r) ** 2 + (sigma_f - sigma_r) ** 2).mean()


@dataclass
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_idt: float = 0.5
    lambda_msc: float = 1.0
    lambda_style: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")


def total_generator_loss(components: dict, weights: LossWeights):
    """``λc·cycle + λi·identity + λm·msc_total + λs·style + adversarial``.

    A zero weight drops its term entirely, so a non-finite component under a zero
    weight cannot leak into the total.
    """
    terms = [(weights.lambda_cycle, components["cycle"]),
             (weights.lambda_idt, components["identity"]),
             (weights.lambda_msc, components["msc_total"]),
             (weights.lambda_style, components["style"]),
             (1.0, components["adversarial"])]
    total = 0.0
    for w, v in terms:
        if w != 0:
            total = total + w * v
    return total


@dataclass
class LossReport:
    adversarial_b2h: float = 0.0
    adversarial_h2b: float = 0.0
    cycle_bit: float = 0.0
    cycle_he: float = 0.0
    identity_bit: float = 0.0
    identity_he: float = 0.0
    msc_bit: float = 0.0
    msc_he: float = 0.0
    msc_total: float = 0.0
    style: float = 0.0
    total: float = 0.0
    disc_he: float = 0.0
    disc_bit: float = 0.0
    step: int = 0
    fusion_weight: float = 0.0

    def components(self) -> dict:
        return {"cycle": self.cycle_bit + self.cycle_he,
                "identity": self.identity_bit + self.identity_he,
                "msc_total": self.msc_total, "style": self.style,
                "adversarial": self.adversarial_b2h + self.adversarial_h2b}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossReport":
        return cls(**data)

    def first_non_finite(self) -> Optional[str]:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                return f.name
        return None
