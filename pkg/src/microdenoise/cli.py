"""Command-line entry point tying the toolkit together.

Verbs: train, denoise, benchmark, synth, gradcheck, errormap. Every verb
takes --seed, --threads (default from MICRODENOISE_THREADS), and --out-dir,
logs its resolved settings as ``config key=value`` lines, and derives all
randomness from the seed through counter-based generators, so reruns yield
byte-identical artifacts at any thread count.

Exit codes: 0 all outputs written; 1 a requested check failed; 2 usage or
configuration problem; 3 unreadable or malformed input data; 4 numeric
failure; 5 internal error; 6 checkpoint problem.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import classical, formats, metrics, tiling
from . import data as data_mod
from . import gradcheck as gradcheck_mod
from .errors import (CheckpointError, ConfigError, DegenerateInputError,
                     FormatError, InternalError, MicrodenoiseError,
                     NumericError, ShapeMismatchError)
from .network import NetworkConfig, build_network
from .train import (LossConfig, OptimizerConfig, load_checkpoint,
                    load_operator, parse_schedule, train)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_INTERNAL = 5
EXIT_CHECKPOINT = 6

THREADS_ENV = "MICRODENOISE_THREADS"


def parse_dose(spec: str):
    """Dose model from its CLI spelling: low, ordinary, fixed:<counts>, none."""
    if spec == "low":
        return data_mod.LowDoseExponential()
    if spec == "ordinary":
        return data_mod.OrdinaryUniform()
    if spec == "none":
        return None
    if spec.startswith("fixed:"):
        try:
            return data_mod.Fixed(float(spec[len("fixed:"):]))
        except ValueError:
            raise ConfigError(f"bad fixed dose {spec!r}") from None
    raise ConfigError(
        f"dose must be low, ordinary, none, or fixed:<counts>, got {spec!r}")


def _log_config(items) -> None:
    for key, value in items:
        print(f"config {key}={value}")


def _resolve_threads(value) -> int:
    if value is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if value < 1:
        raise ConfigError(f"threads must be >= 1, got {value}")
    return value


def load_corpus(manifest_path):
    """Micrographs from a corpus manifest; unreadable entries are skipped
    with a warning on stderr, and an empty result is an error."""
    paths = formats.read_corpus_manifest(manifest_path)
    images = []
    skipped = 0
    for p in paths:
        try:
            images.append(data_mod.ingest_micrograph(p))
        except (FormatError, ShapeMismatchError, DegenerateInputError, OSError) as e:
            skipped += 1
            print(f"warning: skipping {p}: {e}", file=sys.stderr)
    if not images:
        raise FormatError(f"{manifest_path}: no usable corpus entries "
                          f"({skipped} skipped)")
    return images, skipped


def _synthesizer(args, model, crop_size):
    images, skipped = load_corpus(args.corpus)
    synth = data_mod.PairSynthesizer(images, model, seed=args.seed,
                                     crop_size=crop_size,
                                     downsample=not args.no_downsample)
    return synth, skipped


# ---------------------------------------------------------------- denoise

def cmd_denoise(args) -> int:
    started = time.perf_counter()
    samples, meta = formats.load_image(args.input)
    if meta.maxval <= 0:
        raise FormatError(f"{args.input}: non-positive full-scale value")
    img01 = np.asarray(samples, dtype=np.float64) / meta.maxval
    clip = bool(args.clip)
    if args.model is not None:
        operator, size = load_operator(args.model, clip=False)
        cfg = tiling.TileConfig(tile=size if size is not None else args.tile,
                                overlap=args.overlap, pad=args.pad,
                                clip_output=clip)
        source = args.model
        result = tiling.denoise_image(operator, img01, cfg)
    else:
        source = args.method
        result = classical.denoise(img01, args.method)
        if clip:
            result = np.clip(result, 0.0, 1.0)
    _log_config([("input", args.input), ("source", source), ("clip", int(clip)),
                 ("overlap", args.overlap), ("pad", args.pad), ("seed", args.seed)])
    os.makedirs(args.out_dir, exist_ok=True)
    if args.out is not None:
        out_path = args.out
    else:
        stem, ext = os.path.splitext(os.path.basename(args.input))
        out_path = os.path.join(args.out_dir, f"{stem}_denoised{ext or '.pgm'}")
    formats.save_image(out_path, np.clip(result, 0.0, 1.0), meta)
    if args.mdtn:
        formats.save_tensor(out_path + ".mdtn", np.asarray(result, dtype=np.float32))
    elapsed = time.perf_counter() - started
    print(f"wrote {out_path} in {elapsed:.3f}s")
    return EXIT_OK


# -------------------------------------------------------------- benchmark

def cmd_benchmark(args) -> int:
    model = parse_dose(args.dose)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    synth, skipped = _synthesizer(args, model, args.crop)
    _log_config([("corpus", args.corpus), ("dose", args.dose),
                 ("methods", ",".join(methods)), ("trials", args.trials),
                 ("crop", args.crop), ("seed", args.seed),
                 ("threads", args.threads)])
    records, summary = metrics.run_benchmark(synth, methods, args.trials,
                                             threads=args.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    metrics.write_records_csv(os.path.join(args.out_dir, "records.csv"), records)
    metrics.write_summary_csv(os.path.join(args.out_dir, "summary.csv"), summary)
    for metric in [m.strip() for m in args.kde_metrics.split(",") if m.strip()]:
        if metric not in ("mse", "ssim"):
            raise ConfigError(f"kde metric must be mse or ssim, got {metric!r}")
        for method in methods:
            values = [getattr(r, metric) for r in records if r.method == method]
            grid, density, normalized = metrics.kde_pdf(values, metric=metric)
            metrics.write_kde_csv(
                os.path.join(args.out_dir, f"kde_{metric}_{method}.csv"),
                grid, density, normalized)
    print(f"wrote {len(records)} records for {len(methods)} methods to "
          f"{args.out_dir} ({skipped} corpus entries skipped)")
    return EXIT_OK


# ------------------------------------------------------------------ train

_TRAIN_DEFAULTS = {
    "dose": "low",
    "downsample": "1",
    "input_size": "512",
    "width_multiplier": "1.0",
    "middle_repeats": "12",
    "batch_size": "2",
    "replicas": "1",
    "seed": "0",
    "fixed_pairs": "0",
    "optimizer": "adam",
    "beta1": "0.5",
    "beta2": "0.999",
    "eps": "1e-8",
    "rho": "0.9",
    "schedule": ":0.001",
    "bn_freeze_batch": "",
    "mse_scale": "1000",
    "huber_threshold": "1.0",
    "ssim_weight": "0",
    "clip_in_loss": "0",
    "l2_rate": "5e-5",
    "l2_scope": "all",
    "checkpoint_interval": "500",
}
_TRAIN_REQUIRED = ("corpus", "batches")


def _read_train_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        given = formats.parse_manifest(text, source=str(path))
    except FormatError as e:
        raise ConfigError(str(e)) from None
    known = set(_TRAIN_DEFAULTS) | set(_TRAIN_REQUIRED)
    for key in given:
        if key not in known:
            raise ConfigError(f"{path}: unknown config key {key!r}")
    for key in _TRAIN_REQUIRED:
        if key not in given:
            raise ConfigError(f"{path}: missing required key {key!r}")
    merged = dict(_TRAIN_DEFAULTS)
    merged.update(given)
    return merged


def cmd_train(args) -> int:
    cfg = _read_train_config(args.config)
    try:
        seed = int(cfg["seed"])
        batches = int(cfg["batches"])
        batch_size = int(cfg["batch_size"])
        replicas = int(cfg["replicas"])
        fixed_pairs = int(cfg["fixed_pairs"])
        input_size = int(cfg["input_size"])
        interval = int(cfg["checkpoint_interval"])
        net_cfg = NetworkConfig(input_size=input_size,
                                width_multiplier=float(cfg["width_multiplier"]),
                                middle_repeats=int(cfg["middle_repeats"]))
        loss_cfg = LossConfig(
            mse_scale=float(cfg["mse_scale"]),
            huber_threshold=float(cfg["huber_threshold"]),
            ssim_weight=float(cfg["ssim_weight"]),
            clip_in_loss=bool(int(cfg["clip_in_loss"])),
            l2_rate=float(cfg["l2_rate"]),
            l2_scope=cfg["l2_scope"])
        opt_cfg = OptimizerConfig(
            kind=cfg["optimizer"],
            beta1=float(cfg["beta1"]),
            beta2=float(cfg["beta2"]),
            eps=float(cfg["eps"]),
            rho=float(cfg["rho"]),
            schedule=parse_schedule(cfg["schedule"]),
            bn_freeze_batch=(None if cfg["bn_freeze_batch"] == ""
                             else int(cfg["bn_freeze_batch"])))
        downsample = bool(int(cfg["downsample"]))
        model = parse_dose(cfg["dose"])
    except ValueError as e:
        raise ConfigError(f"{args.config}: {e}") from None
    _log_config(sorted(cfg.items()))

    paths = formats.read_corpus_manifest(cfg["corpus"])
    train_paths, val_paths, _ = data_mod.split_dataset(paths, seed=seed)
    if not train_paths or not val_paths:
        raise ConfigError(f"corpus of {len(paths)} images is too small to split")

    def build_source(split_paths, split_seed):
        images = []
        for p in split_paths:
            try:
                images.append(data_mod.ingest_micrograph(p))
            except (FormatError, ShapeMismatchError, DegenerateInputError, OSError) as e:
                print(f"warning: skipping {p}: {e}", file=sys.stderr)
        if not images:
            raise FormatError("no usable images in a split")
        return data_mod.PairSynthesizer(images, model, seed=split_seed,
                                        crop_size=input_size,
                                        downsample=downsample)

    train_src = build_source(train_paths, seed)
    val_src = build_source(val_paths, seed + 1)
    if fixed_pairs > 0:
        train_src = [train_src.pair(i) for i in range(fixed_pairs)]
        val_src = [val_src.pair(i) for i in range(min(fixed_pairs, 4))]

    net = build_network(net_cfg, seed=seed)
    if args.resume is not None:
        load_checkpoint(args.resume, net)
    os.makedirs(args.out_dir, exist_ok=True)
    rows, best_val = train(
        net, train_src, val_src, loss_cfg, opt_cfg,
        batches=batches, batch_size=batch_size,
        checkpoint_dir=os.path.join(args.out_dir, "checkpoints"),
        checkpoint_interval=interval, replicas=replicas,
        log_path=os.path.join(args.out_dir, "curve.csv"))
    last = rows[-1]
    print(f"finished step {last[0]} with train loss {last[1]!r}")
    print(f"best validation loss: {best_val!r}")
    return EXIT_OK


# ------------------------------------------------------------------ synth

def cmd_synth(args) -> int:
    model = parse_dose(args.dose)
    synth, skipped = _synthesizer(args, model, args.crop)
    _log_config([("corpus", args.corpus), ("dose", args.dose),
                 ("count", args.count), ("crop", args.crop),
                 ("seed", args.seed)])
    os.makedirs(args.out_dir, exist_ok=True)
    for i in range(args.count):
        pair = synth.pair(i)
        formats.save_container(
            os.path.join(args.out_dir, f"pair_{i:05d}.mdtc"),
            {"noisy": pair.noisy, "clean": pair.ground_truth},
            {"model": "pair", "index": i, "dose": repr(pair.dose),
             "origin": f"{pair.origin[0]},{pair.origin[1]}",
             "augment": pair.augment_k, "seed": args.seed})
    print(f"wrote {args.count} pairs to {args.out_dir} "
          f"({skipped} corpus entries skipped)")
    return EXIT_OK


# -------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    _log_config([("scale", args.scale), ("size", args.size),
                 ("seed", args.seed), ("network", int(not args.skip_network))])
    reports = gradcheck_mod.run_all(seed=args.seed)
    if not args.skip_network:
        reports.append(gradcheck_mod.check_network(
            width=args.scale, input_size=args.size, seed=args.seed))
    failures = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        failures += 0 if r.passed else 1
        print(f"{r.name}: rel_err={r.max_rel_err:.3e} tol={r.tol:g} {status}")
    print(f"{len(reports) - failures}/{len(reports)} gradient checks passed")
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


# --------------------------------------------------------------- errormap

def cmd_errormap(args) -> int:
    operator, size = load_operator(args.model)
    crop = args.crop if args.crop is not None else (size or 512)
    if size is not None and size != crop:
        raise ConfigError(f"model takes {size}x{size} tiles; --crop {crop} "
                          f"does not match")
    model = parse_dose(args.dose)
    synth, skipped = _synthesizer(args, model, crop)
    _log_config([("model", args.model), ("corpus", args.corpus),
                 ("dose", args.dose), ("trials", args.trials),
                 ("crop", crop), ("seed", args.seed)])
    error_images = []
    for i in range(args.trials):
        pair = synth.pair(i)
        out = np.asarray(operator(pair.noisy[None, None]),
                         dtype=np.float64)[0, 0]
        error_images.append(np.abs(out - np.asarray(pair.ground_truth,
                                                    dtype=np.float64)))
    mean_map, _ = metrics.mae_map(error_images)
    map32 = np.asarray(mean_map, dtype=np.float32)
    scalar = float(map32.astype(np.float64).mean())
    os.makedirs(args.out_dir, exist_ok=True)
    formats.save_tensor(os.path.join(args.out_dir, "errormap.mdtn"), map32)
    peak = float(mean_map.max())
    vis = mean_map / peak if peak > 0 else np.zeros_like(mean_map)
    formats.write_pgm(os.path.join(args.out_dir, "errormap.pgm"), vis)
    formats.write_pgm(os.path.join(args.out_dir, "errormap_clahe.pgm"),
                      metrics.clahe(vis))
    print(f"mean absolute error {scalar!r} over {args.trials} trials "
          f"(map peak {peak!r}); wrote 3 files to {args.out_dir} "
          f"({skipped} corpus entries skipped)")
    return EXIT_OK


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microdenoise",
        description="Electron-micrograph denoising toolkit: train and apply "
                    "the convolutional denoiser, run classical baselines, "
                    "and benchmark everything on Poisson-corrupted data.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0,
                        help="root seed for all randomness (default 0)")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--out-dir", default=".",
                        help="directory for output files (default .)")

    sp = sub.add_parser("denoise", help="denoise one image")
    common(sp)
    sp.add_argument("--input", required=True, help="image to denoise")
    which = sp.add_mutually_exclusive_group(required=True)
    which.add_argument("--model", help="checkpoint for tiled network inference")
    which.add_argument("--method", help="classical method name")
    sp.add_argument("--clip", type=int, choices=(0, 1), default=1,
                    help="clip output to [0,1] (default 1)")
    sp.add_argument("--overlap", type=int, default=32)
    sp.add_argument("--pad", type=int, default=16)
    sp.add_argument("--tile", type=int, default=512,
                    help="tile size when the model does not pin one")
    sp.add_argument("--out", default=None, help="output path")
    sp.add_argument("--mdtn", action="store_true",
                    help="also write the raw float result")
    sp.set_defaults(handler=cmd_denoise)

    sp = sub.add_parser("benchmark", help="score methods on synthesized pairs")
    common(sp)
    sp.add_argument("--corpus", required=True, help="corpus manifest file")
    sp.add_argument("--dose", default="low")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--methods", default=",".join(classical.METHODS))
    sp.add_argument("--crop", type=int, default=512)
    sp.add_argument("--no-downsample", action="store_true")
    sp.add_argument("--kde-metrics", default="mse")
    sp.set_defaults(handler=cmd_benchmark)

    sp = sub.add_parser("train", help="train the network from a config file")
    common(sp)
    sp.add_argument("--config", required=True, help="key=value config file")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.set_defaults(handler=cmd_train)

    sp = sub.add_parser("synth", help="write synthesized noisy/clean pairs")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--dose", default="low")
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--crop", type=int, default=512)
    sp.add_argument("--no-downsample", action="store_true")
    sp.set_defaults(handler=cmd_synth)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(sp)
    sp.add_argument("--scale", type=float, default=0.125,
                    help="network width multiplier (default 1/8)")
    sp.add_argument("--size", type=int, default=64,
                    help="network input size (default 64)")
    sp.add_argument("--skip-network", action="store_true",
                    help="only check individual ops")
    sp.set_defaults(handler=cmd_gradcheck)

    sp = sub.add_parser("errormap", help="mean absolute error map of a model")
    common(sp)
    sp.add_argument("--model", required=True, help="checkpoint to evaluate")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--dose", default="low")
    sp.add_argument("--trials", type=int, default=8)
    sp.add_argument("--crop", type=int, default=None)
    sp.add_argument("--no-downsample", action="store_true")
    sp.set_defaults(handler=cmd_errormap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.threads = _resolve_threads(args.threads)
        return args.handler(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (FormatError, ShapeMismatchError, DegenerateInputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InternalError, MicrodenoiseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
