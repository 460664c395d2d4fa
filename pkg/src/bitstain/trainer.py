"""MAE pretraining, adversarial training with all objectives, checkpointing and volume staining."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import preprocess
from .config import TrainConfig
from .errors import ConfigError, NonFiniteLossError, ShapeError, StateError
from .losses import (LossReport, adversarial_losses, build_channel_subset, check_compatible,
                     mean_l1, msc_pair, style_statistics_loss, total_generator_loss)
from .networks import Generator, PatchDiscriminator, mae_pretrain_step
from .style import (StylePrototype, apply_fusion, ema_update, fusion_weight, load_prototype,
                    save_prototype)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bitstain-checkpoint"
CHECKPOINT_VERSION = 1


def to_model_range(tiles) -> torch.Tensor:
    """uint8 (N, 3, H, W) -> float32 in [-1, 1]."""
    return torch.as_tensor(np.asarray(tiles), dtype=torch.float32) / 127.5 - 1.0


def to_uint8(images: torch.Tensor) -> np.ndarray:
    arr = ((images.detach().double() + 1.0) * 127.5).cpu().numpy()
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


@dataclass
class TrainState:
    config: TrainConfig
    g_b2h: Generator
    g_h2b: Generator
    d_he: PatchDiscriminator
    d_bit: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    prototype: StylePrototype
    total_steps: int
    step: int = 0
    epoch: int = 0

    @classmethod
    def create(cls, config: TrainConfig, total_steps: int) -> "TrainState":
        seed = config.seed
        gcfg = config.generator
        g_b2h = Generator(dataclasses.replace(gcfg, seed=seed * 4 + 0))
        g_h2b = Generator(dataclasses.replace(gcfg, seed=seed * 4 + 1))
        d_he = PatchDiscriminator(config.disc_channels, config.disc_stages, seed=seed * 4 + 2)
        d_bit = PatchDiscriminator(config.disc_channels, config.disc_stages, seed=seed * 4 + 3)
        check_compatible(g_b2h, g_h2b)
        opt_g = torch.optim.Adam(list(g_b2h.parameters()) + list(g_h2b.parameters()),
                                 lr=config.lr, betas=config.betas)
        opt_d = torch.optim.Adam(list(d_he.parameters()) + list(d_bit.parameters()),
                                 lr=config.lr, betas=config.betas)
        proto = StylePrototype(gcfg.token_dim, config.alpha)
        return cls(config, g_b2h, g_h2b, d_he, d_bit, opt_g, opt_d, proto, total_steps)

    @property
    def schedule(self):
        return self.config.schedule(self.total_steps)

    def generator_parameters(self):
        return list(self.g_b2h.parameters()) + list(self.g_h2b.parameters())

    def discriminator_parameters(self):
        return list(self.d_he.parameters()) + list(self.d_bit.parameters())


def train_step(batch_bit: torch.Tensor, batch_he: torch.Tensor, state: TrainState) -> LossReport:
    """One optimisation step in a fixed order.

    1. reverse pass on real H&E, EMA update of the prototype;
    2. fused BIT->H&E forward pass;
    3. cycle reconstructions in both directions;
    4. every loss term;
    5. generator update, then discriminator update.
    """
    cfg = state.config
    w = fusion_weight(min(state.step, state.total_steps), state.schedule)
    g_b2h, g_h2b = state.g_b2h, state.g_h2b

    rev = g_h2b(batch_he)
    s_real = rev.style.detach()
    ema_update(state.prototype, s_real.mean(dim=0))
    proto = state.prototype

    def fuse(s):
        return apply_fusion(s, proto, w)

    fwd = g_b2h(batch_bit, style_transform=fuse)
    rec_bit = g_h2b(fwd.image)
    rec_he = g_b2h(rev.image, style_transform=fuse)

    cycle_bit = mean_l1(batch_bit, rec_bit.image)
    cycle_he = mean_l1(batch_he, rec_he.image)
    identity_he = mean_l1(batch_he, g_b2h(batch_he, style_transform=fuse).image)
    identity_bit = mean_l1(batch_bit, g_h2b(batch_bit).image)
    subset = build_channel_subset(cfg.generator, cfg.channel_subset_n, cfg.channel_subset_rule, cfg.seed)
    msc_bit, msc_he = msc_pair(fwd.pyramid, rec_bit.pyramid.detach(),
                               rev.pyramid, rec_he.pyramid.detach(), subset)
    style = style_statistics_loss(rec_bit.style, s_real)
    disc_he, adv_b2h = adversarial_losses(state.d_he, batch_he, fwd.image)
    disc_bit, adv_h2b = adversarial_losses(state.d_bit, batch_bit, rev.image)

    components = {"cycle": cycle_bit + cycle_he, "identity": identity_bit + identity_he,
                  "msc_total": msc_bit + msc_he, "style": style, "adversarial": adv_b2h + adv_h2b}
    total = total_generator_loss(components, cfg.loss_weights())

    def val(t):
        return float(t.detach())

    report = LossReport(
        adversarial_b2h=val(adv_b2h), adversarial_h2b=val(adv_h2b),
        cycle_bit=val(cycle_bit), cycle_he=val(cycle_he),
        identity_bit=val(identity_bit), identity_he=val(identity_he),
        msc_bit=val(msc_bit), msc_he=val(msc_he), msc_total=val(msc_bit + msc_he),
        style=val(style), total=val(total), disc_he=val(disc_he), disc_bit=val(disc_bit),
        step=state.step, fusion_weight=float(w))
    bad = report.first_non_finite()
    if bad is not None:
        raise NonFiniteLossError(bad, getattr(report, bad), state.step)

    g_params = state.generator_parameters()
    state.opt_g.zero_grad(set_to_none=True)
    total.backward(inputs=g_params)
    state.opt_g.step()

    d_params = state.discriminator_parameters()
    state.opt_d.zero_grad(set_to_none=True)
    (disc_he + disc_bit).backward(inputs=d_params)
    state.opt_d.step()

    state.step += 1
    return report


# ---------------------------------------------------------------- checkpoints

def make_checkpoint(state: TrainState) -> dict:
    ckpt = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "total_steps": state.total_steps,
        "generators": {"b2h": _clone(state.g_b2h.state_dict()), "h2b": _clone(state.g_h2b.state_dict())},
        "discriminators": {"he": _clone(state.d_he.state_dict()), "bit": _clone(state.d_bit.state_dict())},
        "optimizers": {"g": _clone(state.opt_g.state_dict()), "d": _clone(state.opt_d.state_dict())},
    }
    return save_prototype(state.prototype, ckpt)


def _clone(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone()
    if isinstance(obj, dict):
        return {k: _clone(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone(v) for v in obj]
    return obj


def save_checkpoint(ckpt: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StateError(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:  # torch raises pickle, zip and runtime errors here
        raise StateError(f"cannot read checkpoint {path}: {err}") from None
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise StateError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise StateError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def restore_state(ckpt: dict) -> TrainState:
    config = TrainConfig.from_dict(ckpt["config"])
    state = TrainState.create(config, ckpt["total_steps"])
    state.g_b2h.load_state_dict(ckpt["generators"]["b2h"])
    state.g_h2b.load_state_dict(ckpt["generators"]["h2b"])
    state.d_he.load_state_dict(ckpt["discriminators"]["he"])
    state.d_bit.load_state_dict(ckpt["discriminators"]["bit"])
    state.opt_g.load_state_dict(ckpt["optimizers"]["g"])
    state.opt_d.load_state_dict(ckpt["optimizers"]["d"])
    state.prototype = load_prototype(ckpt)
    state.step = int(ckpt["step"])
    state.epoch = int(ckpt["epoch"])
    return state


def checkpoints_equal(a: dict, b: dict) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, torch.Tensor):
        return a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(checkpoints_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(checkpoints_equal(x, y) for x, y in zip(a, b))
    return a == b


# ---------------------------------------------------------------- training loop

def split_indices(n: int, fraction: float, seed: int, domain: int) -> np.ndarray:
    order = np.random.default_rng([seed, 7, domain]).permutation(n)
    return np.sort(order[:max(1, math.ceil(fraction * n))])


def steps_per_epoch(n_bit: int, n_he: int, batch: int) -> int:
    return min(n_bit, n_he) // batch


def training_split(config: TrainConfig, bit_tiles, he_tiles):
    """Validate uint8 tile stacks and return the seeded training subsets in model range."""
    bit = to_model_range(bit_tiles) if len(bit_tiles) else None
    he = to_model_range(he_tiles) if len(he_tiles) else None
    if bit is None or he is None:
        raise ConfigError("training needs at least one BIT tile and one H&E tile")
    n = config.generator.input_size
    for name, t in (("BIT", bit), ("H&E", he)):
        if t.dim() != 4 or tuple(t.shape[1:]) != (3, n, n):
            raise ShapeError(f"{name} tiles must be (N, 3, {n}, {n}), got {tuple(t.shape)}")
    train_bit = bit[torch.as_tensor(split_indices(len(bit), config.train_fraction, config.seed, 0))]
    train_he = he[torch.as_tensor(split_indices(len(he), config.train_fraction, config.seed, 1))]
    return train_bit, train_he


def pretrain(config: TrainConfig, tiles: torch.Tensor, log_file=None) -> Generator:
    """Joint masked-autoencoder pretraining of one backbone on pooled BIT and H&E tiles."""
    model = Generator(dataclasses.replace(config.generator, seed=config.seed * 4))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    mask_gen = torch.Generator().manual_seed(config.seed * 1000 + 17)
    n = tiles.shape[0]
    for epoch in range(config.pretrain_epochs):
        order = np.random.default_rng([config.seed, 3, epoch]).permutation(n)
        for start in range(0, n - config.pretrain_batch + 1, config.pretrain_batch):
            batch = tiles[torch.as_tensor(order[start:start + config.pretrain_batch])]
            loss = mae_pretrain_step(model, opt, batch, config.mask_ratio, mask_gen)
            if not math.isfinite(loss):
                raise NonFiniteLossError("mae", loss)
            if log_file is not None:
                log_file.write(json.dumps({"phase": "pretrain", "epoch": epoch + 1, "mae": loss}) + "\n")
    return model


def train(config: TrainConfig, bit_tiles, he_tiles, out_dir=None, resume_from: Optional[dict] = None,
          keep_in_memory: bool = True, pretrained: Optional[dict] = None) -> list:
    """Run pretraining (fresh runs only) and adversarial epochs.

    ``bit_tiles`` are preprocessed (N, 3, H, W) uint8 three-channel stacks,
    ``he_tiles`` (M, 3, H, W) uint8 RGB. One checkpoint is produced per epoch;
    with ``out_dir`` they are written as ``epoch_XXX.pt`` alongside
    ``losses.jsonl``. Returns the checkpoints (dicts, or paths when
    ``keep_in_memory`` is false). A ``pretrained`` generator state dict
    replaces the built-in pretraining phase.
    """
    train_bit, train_he = training_split(config, bit_tiles, he_tiles)
    per_epoch = steps_per_epoch(len(train_bit), len(train_he), config.batch_size)
    if per_epoch == 0:
        raise ConfigError(f"training split smaller than one batch of {config.batch_size}")
    total_steps = per_epoch * config.epochs

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "losses.jsonl" if out is not None else None

    if resume_from is not None:
        state = restore_state(resume_from)
        if state.config.to_dict() != config.to_dict():
            raise ConfigError("resume checkpoint was produced with a different configuration")
        if state.total_steps != total_steps:
            raise ConfigError("resume checkpoint does not match the dataset size")
        log_mode = "a"
    else:
        state = TrainState.create(config, total_steps)
        log_mode = "w"

    results = []
    log_file = open(log_path, log_mode, encoding="utf-8") if log_path is not None else None
    try:
        if resume_from is None and (pretrained is not None or config.pretrain_epochs > 0):
            if pretrained is None:
                pretrained = pretrain(config, torch.cat([train_bit, train_he]), log_file).state_dict()
            state.g_b2h.load_state_dict(pretrained)
            state.g_h2b.load_state_dict(pretrained)
        for epoch in range(state.epoch, config.epochs):
            rng = np.random.default_rng([config.seed, 1, epoch])
            order_bit = rng.permutation(len(train_bit))
            order_he = rng.permutation(len(train_he))
            for i in range(per_epoch):
                sl = slice(i * config.batch_size, (i + 1) * config.batch_size)
                report = train_step(train_bit[torch.as_tensor(order_bit[sl])],
                                    train_he[torch.as_tensor(order_he[sl])], state)
                if log_file is not None:
                    log_file.write(json.dumps({"epoch": epoch + 1, **report.to_dict()}) + "\n")
            state.epoch = epoch + 1
            if log_file is not None:
                log_file.flush()
            ckpt = make_checkpoint(state)
            log.info("epoch %d/%d done at step %d", state.epoch, config.epochs, state.step)
            if out is not None:
                path = save_checkpoint(ckpt, out / f"epoch_{state.epoch:03d}.pt")
                results.append(ckpt if keep_in_memory else path)
            else:
                results.append(ckpt)
    finally:
        if log_file is not None:
            log_file.close()
    return results


# ---------------------------------------------------------------- inference

def feather_weights(size: int) -> np.ndarray:
    ramp = np.minimum(np.arange(1, size + 1), np.arange(size, 0, -1)).astype(np.float64)
    return np.outer(ramp, ramp)


class Stainer:
    """BIT->H&E inference with the checkpointed generator and style prototype."""

    def __init__(self, checkpoint: dict, weight: Optional[float] = None, stride: Optional[int] = None):
        self.config = TrainConfig.from_dict(checkpoint["config"])
        self.prototype = load_prototype(checkpoint)
        if not self.prototype.initialized:
            raise StateError("checkpoint style prototype was never initialised")
        self.generator = Generator(self.config.generator)
        self.generator.load_state_dict(checkpoint["generators"]["b2h"])
        self.generator.eval()
        self.weight = self.config.w_inference if weight is None else float(weight)
        n = self.config.generator.input_size
        self.stride = stride or self.config.stain_stride or max(n // 2, 1)

    def translate_tiles(self, tiles_u8) -> np.ndarray:
        with torch.no_grad():
            x = to_model_range(tiles_u8)
            y = self.generator(x, style_transform=lambda s: apply_fusion(s, self.prototype, self.weight)).image
        return y.double().numpy()

    def stain_slice(self, raw_slice) -> np.ndarray:
        cfg = self.config
        n = cfg.generator.input_size
        stack = preprocess.preprocess_slice(raw_slice, cfg.bg_sigma_px, cfg.lo_pct, cfg.hi_pct)
        tiles = preprocess.tile_volume(stack[None], n, self.stride)
        translated = self.translate_tiles(np.stack([t for t, _ in tiles]))
        height, width = stack.shape[1:]
        acc = np.zeros((3, height, width))
        norm = np.zeros((height, width))
        weight = feather_weights(n)
        for out, (_, origin) in zip(translated, tiles):
            acc[:, origin.y:origin.y + n, origin.x:origin.x + n] += out * weight
            norm[origin.y:origin.y + n, origin.x:origin.x + n] += weight
        rgb = acc / norm
        return np.clip(np.rint((rgb + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)

    def stain_volume(self, bit_volume) -> np.ndarray:
        vol = np.asarray(bit_volume)
        if vol.ndim != 3:
            raise ShapeError(f"expected a (Z, Y, X) BIT volume, got shape {vol.shape}")
        return np.stack([self.stain_slice(s) for s in vol])


def stain_volume(checkpoint: dict, bit_volume, weight: Optional[float] = None,
                 stride: Optional[int] = None) -> np.ndarray:
    """Virtually stain a raw (Z, Y, X) BIT volume slice by slice -> (Z, Y, X, 3) uint8."""
    return Stainer(checkpoint, weight, stride).stain_volume(bit_volume)


# ---------------------------------------------------------------- toy data

def phantom_tile_sets(n_tiles: int, seed: int = 0, spec=None, bg_sigma_px: float = 30.0,
                      lo_pct: float = 1.0, hi_pct: float = 99.0):
    """Unpaired BIT and H&E tile sets cut from independent phantoms.

    BIT tiles come from phantoms seeded ``seed, seed+2, ...`` and H&E tiles from
    ``seed+1, seed+3, ...`` so the two domains never share geometry. Each
    axial slice is one tile, so the phantom lateral size is the tile size.
    """
    from .phantom import PhantomSpec, generate_phantom

    spec = spec or PhantomSpec()
    bit, he = [], []
    k = 0
    while len(bit) < n_tiles or len(he) < n_tiles:
        ph_bit = generate_phantom(dataclasses.replace(spec, seed=seed + 2 * k))
        ph_he = generate_phantom(dataclasses.replace(spec, seed=seed + 2 * k + 1))
        bit.extend(preprocess.preprocess_volume(ph_bit.bit, bg_sigma_px, lo_pct, hi_pct))
        he.extend(ph_he.he.transpose(0, 3, 1, 2))
        k += 1
    return np.stack(bit[:n_tiles]), np.stack(he[:n_tiles])
