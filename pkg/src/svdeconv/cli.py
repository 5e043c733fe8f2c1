"""Command-line entry point: simulate, train, infer, eval, ablate.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, format_defaults, load_config
from .container import ContainerError, decode_meta, encode_meta, read_container, write_container

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DATASET_META = "dataset.svc"

log = logging.getLogger("svdeconv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the seeds of this command")
    p.add_argument("--precision", choices=("double", "single"), default=None)
    p.add_argument("--threads", type=int, default=1, help="bound on internal parallelism")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svdeconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="synthesise a patch dataset")
    p.add_argument("config")
    p.add_argument("--out", help="dataset directory (overrides paths.dataset)")
    _common(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("config")
    p.add_argument("--dataset", help="overrides paths.dataset")
    p.add_argument("--out", help="run directory (overrides paths.run)")
    p.add_argument("--resume", help="checkpoint to resume from")
    _common(p)

    p = sub.add_parser("infer", help="reconstruct a full measurement")
    p.add_argument("checkpoint")
    p.add_argument("measurement", help="container with a 'measurement' record")
    p.add_argument("--out", required=True, help="output container")
    p.add_argument("--config", help="config defining the active geometry (default: the checkpoint's)")
    p.add_argument("--cache", help="mask cache file (created if missing)")
    p.add_argument("--preview", help="optional 8-bit PNG preview")
    p.add_argument("--batch", type=int, default=None)
    _common(p)

    p = sub.add_parser("eval", help="PSNR / SSIM of a reconstruction against ground truth")
    p.add_argument("recon")
    p.add_argument("gt")
    _common(p)

    p = sub.add_parser("ablate", help="train full / w/o CG / w/o PE and report held-out metrics")
    p.add_argument("config")
    p.add_argument("--dataset", help="overrides paths.dataset")
    p.add_argument("--out", help="run directory (overrides paths.run)")
    p.add_argument("--variants", default="full,wo_cg,wo_pe")
    _common(p)

    p = sub.add_parser("defaults", help="print the documented default config")
    _common(p)
    return parser


def _path_arg(cfg: RunConfig, override: Optional[str], key: str) -> Path:
    if override:
        return Path(override)
    return Path(cfg.require(key))


def _read_image(path, names=("recon", "object", "measurement")) -> np.ndarray:
    rec = read_container(path)
    for n in names:
        if n in rec:
            return rec[n]
    arrays = [v for k, v in rec.items() if k != "meta" and v.ndim == 2]
    if len(arrays) != 1:
        raise ContainerError(f"{path}: no unambiguous 2-D image record")
    return arrays[0]


def _dataset_geometry(root: Path):
    from .svforward import Geometry
    meta_path = root / DATASET_META
    if not meta_path.exists():
        return None
    return Geometry.from_dict(decode_meta(read_container(meta_path)["meta"])["geometry"])


def _check_geometry(expected_fp: str, expected_what: str, geometry, active_what: str) -> None:
    if expected_fp != geometry.fingerprint():
        raise RuntimeError(f"geometry fingerprint mismatch: {expected_what} {expected_fp} "
                           f"!= {active_what} {geometry.fingerprint()}")


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    from .datasynth import build_dataset, make_sources, tiling_count
    from .svforward import save_bases, synth_basis
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["data.seed"] = cfg.values["noise.seed"] = cfg.values["basis.seed"] = args.seed
    if args.precision:
        cfg.values["data.precision"] = args.precision
    out = _path_arg(cfg, args.out, "paths.dataset")
    geometry, noise = cfg.geometry(), cfg.noise()
    n = cfg["data.num_images"]
    if n < 0 or cfg["data.phantoms"] < 0:
        raise ConfigError(f"{cfg.source}: image counts must be nonnegative")
    bases = synth_basis(geometry, cfg["basis.rank"], seed=cfg["basis.seed"],
                        kernel_size=cfg["basis.kernel_size"], vignetting=cfg["basis.vignetting"])
    sources = make_sources(n, geometry.subview_size, seed=cfg["data.seed"])
    dtype = np.float32 if cfg["data.precision"] == "single" else np.float64
    ds = build_dataset(sources, geometry, bases, noise, out, phantoms=cfg["data.phantoms"],
                       phantom_density=cfg["data.phantom_density"], dtype=dtype, keep_measurements=True)
    save_bases(out / "bases.svc", bases)
    write_container(out / DATASET_META, {"meta": encode_meta({
        "geometry": geometry.to_dict(), "geometry_fp": geometry.fingerprint(),
        "noise": {"gain": noise.gain, "read_sigma": noise.read_sigma, "seed": noise.seed},
        "basis": {k[6:]: cfg[k] for k in cfg.values if k.startswith("basis.")},
        "sources": n + cfg["data.phantoms"], "patches": len(ds)})})
    per = tiling_count(geometry)
    print(f"geometry: sensor {geometry.sensor_size} pad {geometry.pad_size} sub-view {geometry.subview_size} "
          f"P={geometry.patch_size} S={geometry.stride} fingerprint {geometry.fingerprint()}")
    print(f"patches: {len(ds)} ({per} per source image x {n + cfg['data.phantoms']} source images) -> {out}")
    return EXIT_OK


def _train_setup(args):
    from .datasynth import PatchDataset
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["train.seed"] = cfg.values["model.seed"] = args.seed
    if args.precision:
        cfg.values["model.precision"] = args.precision
    root = _path_arg(cfg, args.dataset, "paths.dataset")
    out = _path_arg(cfg, args.out, "paths.run")
    model_cfg, train_cfg = cfg.model(), cfg.train()
    geometry = cfg.geometry()
    ds_geometry = _dataset_geometry(root)
    if ds_geometry is not None:
        _check_geometry(ds_geometry.fingerprint(), "dataset", geometry, "config")
    ds = PatchDataset(root)
    return cfg, ds, model_cfg, train_cfg, geometry, out


def cmd_train(args) -> int:
    from .trainer import train
    cfg, ds, model_cfg, train_cfg, geometry, out = _train_setup(args)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    if args.resume is None and log_path.exists():
        log_path.unlink()
    res = train(ds, model_cfg, train_cfg, out_dir=out, resume=args.resume, log_path=log_path,
                extra_meta={"geometry": geometry.to_dict(), "geometry_fp": geometry.fingerprint()},
                on_epoch=lambda r: print(json.dumps(r), flush=True))
    print(f"checkpoint: {res.checkpoints[-1]} fingerprint {res.model.fingerprint()}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inferpipe import MaskCache, precompute_masks, reconstruct_full, save_preview
    from .svforward import Geometry
    from .trainer import load_checkpoint
    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    if args.precision:
        model.set_precision(args.precision)
    batch = args.batch
    if args.config:
        cfg = load_config(args.config)
        geometry = cfg.geometry()
        batch = batch or cfg["infer.batch"]
    elif "geometry" in ck.meta:
        geometry = Geometry.from_dict(ck.meta["geometry"])
    else:
        raise ConfigError(f"{args.checkpoint}: checkpoint has no geometry; pass --config")
    if "geometry_fp" in ck.meta:
        _check_geometry(ck.meta["geometry_fp"], "checkpoint", geometry, "active")
    rec = read_container(args.measurement)
    if "measurement" not in rec:
        raise ContainerError(f"{args.measurement}: no 'measurement' record")
    if "meta" in rec:
        mfp = decode_meta(rec["meta"]).get("geometry_fp")
        if mfp is not None:
            _check_geometry(mfp, "measurement", geometry, "active")
    cache = None
    if args.cache:
        cpath = Path(args.cache)
        if cpath.exists():
            cache = MaskCache.load(cpath)
            cache.check(model, geometry)
        elif model.cfg.use_cg:
            cache = precompute_masks(model, geometry, cpath)
    recon = reconstruct_full(rec["measurement"], model, geometry, cache=cache, batch=batch or 9,
                             threads=args.threads)
    write_container(args.out, {"recon": recon, "meta": encode_meta({
        "geometry_fp": geometry.fingerprint(), "model_fp": model.fingerprint()})})
    if args.preview:
        save_preview(args.preview, recon)
    print(f"reconstruction {recon.shape[0]}x{recon.shape[1]} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import psnr, ssim
    a = _read_image(args.recon)
    b = _read_image(args.gt, names=("object", "recon", "measurement"))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    p = psnr(a, b)
    print(f"psnr\t{'inf' if np.isinf(p) else f'{p:.6f}'}")
    print(f"ssim\t{ssim(a, b):.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import format_report, run_ablation
    cfg, ds, model_cfg, train_cfg, geometry, out = _train_setup(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = run_ablation(ds, model_cfg, train_cfg, variants, out_dir=out,
                        extra_meta={"geometry": geometry.to_dict(), "geometry_fp": geometry.fingerprint()})
    report = format_report(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(report)
    print(report, end="")
    return EXIT_OK


def cmd_defaults(args) -> int:
    print(format_defaults(), end="")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "ablate": cmd_ablate, "defaults": cmd_defaults}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures become exit code 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
