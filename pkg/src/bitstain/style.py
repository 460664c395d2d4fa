"""Token-space AdaIN fusion, the EMA H&E style prototype and the cosine fusion schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .errors import MissingPrototypeError, ParameterError, ShapeError, StateError

EPS = 1e-5
PROTOTYPE_KEY = "style_prototype"


def token_stats(s: torch.Tensor, eps: float = EPS):
    """Mean and population std over the embedding (last) dimension; std floored at ``eps``."""
    s = torch.as_tensor(s)
    if s.shape[-1] < 2:
        raise ParameterError(f"token dimension must be >= 2, got {s.shape[-1]}")
    mu = s.mean(dim=-1)
    var = ((s - mu[..., None]) ** 2).mean(dim=-1)
    # sqrt(max(var, eps^2)) == max(std, eps) without the infinite sqrt slope at 0
    sigma = torch.sqrt(torch.clamp(var, min=eps * eps))
    return mu, sigma


class StylePrototype:
    """Running EMA of real H&E style tokens (one writer at a time)."""

    def __init__(self, dim: int, alpha: float = 0.99, dtype=torch.float32):
        if not 0.0 < alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
        self.dim = int(dim)
        self.alpha = float(alpha)
        self.values = torch.zeros(self.dim, dtype=dtype)
        self.observations = 0
        self.initialized = False

    @classmethod
    def from_values(cls, values, alpha: float = 0.99, observations: int = 1):
        values = torch.as_tensor(values)
        proto = cls(values.shape[-1], alpha, dtype=values.dtype)
        proto.values = values.detach().clone()
        proto.observations = observations
        proto.initialized = True
        return proto

    def copy(self) -> "StylePrototype":
        other = StylePrototype(self.dim, self.alpha, self.values.dtype)
        other.values = self.values.clone()
        other.observations = self.observations
        other.initialized = self.initialized
        return other

    def stats(self):
        return token_stats(self.values)

    def state_dict(self) -> dict:
        return {"dim": self.dim, "alpha": self.alpha, "observations": self.observations,
                "initialized": self.initialized, "values": self.values.clone()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "StylePrototype":
        proto = cls(state["dim"], state["alpha"], dtype=state["values"].dtype)
        proto.values = state["values"].clone()
        proto.observations = int(state["observations"])
        proto.initialized = bool(state["initialized"])
        return proto

    def __eq__(self, other):
        if not isinstance(other, StylePrototype):
            return NotImplemented
        return (self.dim == other.dim and self.alpha == other.alpha
                and self.observations == other.observations
                and self.initialized == other.initialized
                and self.values.dtype == other.values.dtype
                and torch.equal(self.values, other.values))

    def __repr__(self):
        return (f"StylePrototype(dim={self.dim}, alpha={self.alpha}, "
                f"observations={self.observations}, initialized={self.initialized})")


def ema_update(proto: StylePrototype, s_obs) -> StylePrototype:
    """First observation initialises; afterwards ``alpha * old + (1 - alpha) * new``. Mutates and returns ``proto``."""
    s = torch.as_tensor(s_obs).detach()
    if s.shape != (proto.dim,):
        raise ShapeError(f"observation shape {tuple(s.shape)} does not match prototype dim {proto.dim}")
    s = s.to(proto.values.dtype)
    if not proto.initialized:
        proto.values = s.clone()
        proto.initialized = True
    else:
        proto.values = proto.alpha * proto.values + (1.0 - proto.alpha) * s
    proto.observations += 1
    return proto


def adain_fuse(s_src: torch.Tensor, proto: StylePrototype) -> torch.Tensor:
    """Renormalise ``s_src`` so its token statistics match the prototype's."""
    if not proto.initialized:
        raise StateError("style prototype has not observed any H&E token yet")
    s_src = torch.as_tensor(s_src)
    if s_src.shape[-1] != proto.dim:
        raise ShapeError(f"token dim {s_src.shape[-1]} does not match prototype dim {proto.dim}")
    mu_s, sigma_s = token_stats(s_src)
    mu_p, sigma_p = token_stats(proto.values.to(s_src.dtype))
    return sigma_p * (s_src - mu_s[..., None]) / sigma_s[..., None] + mu_p


def apply_fusion(s_src: torch.Tensor, proto: StylePrototype, w: float) -> torch.Tensor:
    """Convex blend ``w * AdaIN(s_src, proto) + (1 - w) * s_src``."""
    if w == 0:
        return s_src
    fused = adain_fuse(s_src, proto)
    if w == 1:
        return fused
    return w * fused + (1.0 - w) * s_src


@dataclass
class FusionSchedule:
    w0: float = 1.0
    w_min: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.w_min <= self.w0 <= 1.0:
            raise ParameterError(f"need 0 <= w_min <= w0 <= 1, got w0={self.w0}, w_min={self.w_min}")
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")


def fusion_weight(t: int, sched: FusionSchedule) -> float:
    if not 0 <= t <= sched.total_steps:
        raise ParameterError(f"step {t} outside [0, {sched.total_steps}]")
    if t == 0:
        return sched.w0
    if t == sched.total_steps:
        return sched.w_min
    return sched.w_min + 0.5 * (sched.w0 - sched.w_min) * (1.0 + math.cos(math.pi * t / sched.total_steps))


def save_prototype(proto: StylePrototype, checkpoint: dict) -> dict:
    checkpoint[PROTOTYPE_KEY] = proto.state_dict()
    return checkpoint


def load_prototype(checkpoint: dict) -> StylePrototype:
    state: Optional[dict] = checkpoint.get(PROTOTYPE_KEY) if isinstance(checkpoint, dict) else None
    if state is None:
        raise MissingPrototypeError("checkpoint does not contain a style prototype")
    return StylePrototype.from_state_dict(state)
