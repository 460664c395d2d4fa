"""``bitstain`` command line: synth, preprocess, pretrain, train, stain and eval.

Every invocation writes into its own timestamped run directory (under
``--output-root``, ``$BITSTAIN_OUTPUT_ROOT`` or ``./runs``) together with a
``manifest.json`` and the fully resolved configuration.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import torch
import yaml

from . import preprocess
from .config import TrainConfig, apply_overrides, dump_config, load_config
from .errors import BitStainError, ConfigError, ParameterError
from .metrics import InstanceLabelVolume, detect_nuclei, evaluate_pair, load_features
from .phantom import PhantomSpec, generate_phantom
from .trainer import load_checkpoint, pretrain, stain_volume, train, training_split
from .volume_io import VolumeMeta, load_volume, save_volume

log = logging.getLogger("bitstain")

OUTPUT_ROOT_ENV = "BITSTAIN_OUTPUT_ROOT"
PRETRAIN_FORMAT = "bitstain-pretrain"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class InputDataError(BitStainError):
    """An input file exists but its contents are unusable."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- run directories

def output_root(arg) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def make_run_dir(args) -> Path:
    if args.out is not None:
        run = Path(args.out)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        base = output_root(args.output_root) / f"{stamp}-{args.command}"
        run, k = base, 1
        while run.exists():
            run = base.with_name(f"{base.name}-{k}")
            k += 1
    try:
        run.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"cannot create output directory {run}: {err.strerror}") from None
    return run


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(run: Path, args, resolved: dict, outputs: list) -> Path:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "version": _version(),
        "resolved_config": resolved,
        "outputs": [str(Path(o).relative_to(run)) if Path(o).is_relative_to(run) else str(o) for o in outputs],
    }
    path = run / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def log_resolved(name: str, text: str):
    log.info("resolved %s:\n%s", name, text.rstrip())


# ---------------------------------------------------------------- inputs

def require_path(path, kind="input") -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{kind} path does not exist: {p}")
    return p


def resolve_config(args) -> TrainConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def bit_tiles_from(dirs, config: TrainConfig) -> np.ndarray:
    n = config.generator.input_size
    tiles = []
    for d in dirs:
        vol, _ = load_volume(require_path(d, "BIT volume"))
        stack = preprocess.preprocess_volume(vol, config.bg_sigma_px, config.lo_pct, config.hi_pct)
        tiles.extend(t for t, _ in preprocess.tile_volume(stack, n))
    return np.stack(tiles)


def he_tiles_from(dirs, config: TrainConfig) -> np.ndarray:
    n = config.generator.input_size
    tiles = []
    for d in dirs:
        vol, meta = load_volume(require_path(d, "H&E volume"))
        if vol.ndim != 4:
            raise InputDataError(f"{d}: expected an RGB H&E volume, found modality {meta.modality}")
        tiles.extend(t for t, _ in preprocess.tile_volume(vol.transpose(0, 3, 1, 2), n))
    return np.stack(tiles)


def label_volume_from(path, threshold=None) -> InstanceLabelVolume:
    vol, meta = load_volume(require_path(path, "volume"))
    if meta.modality == "HE":
        return detect_nuclei(vol, threshold, meta.spacing_um)
    if vol.ndim != 3:
        raise InputDataError(f"{path}: cannot read instance labels from modality {meta.modality}")
    return InstanceLabelVolume(vol, meta.spacing_um)


def features_from(path):
    if path is None:
        return None
    try:
        return load_features(require_path(path, "feature file"))
    except ParameterError as err:
        raise InputDataError(str(err)) from None


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, run: Path):
    data = PhantomSpec().to_dict()
    if args.spec is not None:
        loaded = yaml.safe_load(require_path(args.spec, "spec").read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.spec}: top level must be a mapping")
        unknown = sorted(set(loaded) - set(data))
        if unknown:
            raise ConfigError(f"{args.spec}: unknown spec keys: {', '.join(unknown)}")
        data.update(loaded)
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        spec = PhantomSpec.from_dict(apply_overrides(data, overrides))
    except ParameterError as err:
        raise ConfigError(f"invalid phantom spec: {err}") from None
    text = yaml.safe_dump(spec.to_dict(), sort_keys=False)
    log_resolved("phantom spec", text)
    (run / "spec.yaml").write_text(text, encoding="utf-8")
    ph = generate_phantom(spec)
    outs = [
        save_volume(ph.bit, run / "bit", VolumeMeta.for_array(ph.bit, spec.voxel_spacing_um, "BIT")),
        save_volume(ph.he, run / "he", VolumeMeta.for_array(ph.he, spec.voxel_spacing_um, "HE")),
        save_volume(ph.labels, run / "labels", VolumeMeta.for_array(ph.labels, spec.voxel_spacing_um, "label")),
    ]
    return spec.to_dict(), outs + [run / "spec.yaml"]


def cmd_preprocess(args, run: Path):
    config = resolve_config(args)
    log_resolved("config", dump_config(config))
    vol, meta = load_volume(require_path(args.input, "BIT volume"))
    if vol.ndim != 3:
        raise InputDataError(f"{args.input}: expected a single-channel BIT volume")
    stack = preprocess.preprocess_volume(vol, config.bg_sigma_px, config.lo_pct, config.hi_pct,
                                         per_volume=args.per_volume)
    out = stack[:, 0]
    path = save_volume(out, run / "preprocessed", VolumeMeta.for_array(out, meta.spacing_um, "BIT"))
    return config.to_dict(), [path]


def _write_config(run: Path, config: TrainConfig) -> Path:
    path = run / "config.yaml"
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def cmd_pretrain(args, run: Path):
    config = resolve_config(args)
    log_resolved("config", dump_config(config))
    train_bit, train_he = training_split(config, bit_tiles_from(args.bit, config), he_tiles_from(args.he, config))
    with open(run / "losses.jsonl", "w", encoding="utf-8") as fh:
        model = pretrain(config, torch.cat([train_bit, train_he]), fh)
    path = run / "pretrain.pt"
    torch.save({"format": PRETRAIN_FORMAT, "config": config.to_dict(), "generator": model.state_dict()}, path)
    return config.to_dict(), [_write_config(run, config), path, run / "losses.jsonl"]


def cmd_train(args, run: Path):
    config = resolve_config(args)
    log_resolved("config", dump_config(config))
    pretrained = None
    if args.pretrained is not None:
        try:
            blob = torch.load(require_path(args.pretrained, "pretrained weights"), map_location="cpu",
                              weights_only=True)
        except UsageError:
            raise
        except Exception as err:
            raise InputDataError(f"cannot read {args.pretrained}: {err}") from None
        if not isinstance(blob, dict) or blob.get("format") != PRETRAIN_FORMAT:
            raise InputDataError(f"{args.pretrained} is not a {PRETRAIN_FORMAT} file")
        pretrained = blob["generator"]
    resume = load_checkpoint(require_path(args.resume, "checkpoint")) if args.resume is not None else None
    bit = bit_tiles_from(args.bit, config)
    he = he_tiles_from(args.he, config)
    log.info("training on %d BIT and %d H&E tiles", len(bit), len(he))
    paths = train(config, bit, he, out_dir=run, resume_from=resume, keep_in_memory=False,
                  pretrained=pretrained)
    return config.to_dict(), [_write_config(run, config), *paths, run / "losses.jsonl"]


def cmd_stain(args, run: Path):
    ckpt = load_checkpoint(require_path(args.checkpoint, "checkpoint"))
    config = TrainConfig.from_dict(ckpt["config"])
    resolved = config.to_dict()
    resolved["stain"] = {"weight": args.weight if args.weight is not None else config.w_inference,
                         "stride": args.stride}
    log_resolved("config", yaml.safe_dump(resolved, sort_keys=False))
    vol, meta = load_volume(require_path(args.input, "BIT volume"))
    if vol.ndim != 3:
        raise InputDataError(f"{args.input}: expected a single-channel BIT volume")
    stained = stain_volume(ckpt, vol, args.weight, args.stride)
    path = save_volume(stained, run / "stained", VolumeMeta.for_array(stained, meta.spacing_um, "HE"))
    return resolved, [path]


def cmd_eval(args, run: Path):
    resolved = {"pred": str(args.pred), "gt": str(args.gt), "pred_features": args.pred_features,
                "real_features": args.real_features, "hd95_mode": args.hd95_mode, "threshold": args.threshold}
    log_resolved("config", yaml.safe_dump(resolved, sort_keys=False))
    pred = label_volume_from(args.pred, args.threshold)
    gt = label_volume_from(args.gt, args.threshold)
    report = evaluate_pair(pred, gt, features_from(args.pred_features), features_from(args.real_features),
                           volume_ids=[Path(args.pred).name], hd95_mode=args.hd95_mode)
    print(report.table())
    path = run / "metrics.json"
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    return resolved, [path]


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "pretrain": cmd_pretrain,
            "train": cmd_train, "stain": cmd_stain, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--output-root", help=f"parent of run directories (default ${OUTPUT_ROOT_ENV} or ./runs)")
    common.add_argument("--out", help="exact run directory, bypassing the timestamped default")
    common.add_argument("-v", "--verbose", action="store_true")

    configured = _Parser(add_help=False)
    configured.add_argument("--config", help="YAML training configuration")
    configured.add_argument("--override", action="append", metavar="KEY=VALUE",
                            help="dotted-key override, repeatable")
    configured.add_argument("--seed", type=int)

    data = _Parser(add_help=False)
    data.add_argument("--bit", action="append", required=True, metavar="DIR", help="BIT volume directory")
    data.add_argument("--he", action="append", required=True, metavar="DIR", help="H&E volume directory")

    parser = _Parser(prog="bitstain", description="Virtual H&E staining of BIT volumes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a phantom BIT/H&E/label triplet")
    p.add_argument("--spec", help="YAML phantom spec")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("preprocess", parents=[common, configured], help="background-subtract and window a BIT volume")
    p.add_argument("--input", required=True)
    p.add_argument("--per-volume", action="store_true", help="one intensity window for the whole volume")

    sub.add_parser("pretrain", parents=[common, configured, data], help="masked-autoencoder pretraining")

    p = sub.add_parser("train", parents=[common, configured, data], help="adversarial training")
    p.add_argument("--pretrained", help="weights written by 'bitstain pretrain'")
    p.add_argument("--resume", help="epoch checkpoint to continue from")

    p = sub.add_parser("stain", parents=[common], help="stain a BIT volume with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--weight", type=float, help="fusion weight at inference")
    p.add_argument("--stride", type=int)

    p = sub.add_parser("eval", parents=[common], help="compare a prediction with ground truth")
    p.add_argument("--pred", required=True, help="label or stained H&E volume")
    p.add_argument("--gt", required=True, help="label or H&E volume")
    p.add_argument("--pred-features")
    p.add_argument("--real-features")
    p.add_argument("--hd95-mode", choices=("pooled", "directed_max"), default="pooled")
    p.add_argument("--threshold", type=float, help="hematoxylin threshold for H&E inputs")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    args.argv = None if argv is None else list(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        run = make_run_dir(args)
        resolved, outputs = COMMANDS[args.command](args, run)
        write_manifest(run, args, resolved, outputs)
    except (UsageError, ConfigError, ParameterError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (BitStainError, OSError, RuntimeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(run)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
