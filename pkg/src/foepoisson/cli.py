"""Command-line entry points: noise synthesis, denoising, training, evaluation.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or malformed
files), 3 numerical failure.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .benchmark import (DEFAULT_PEAKS, BenchmarkSpec, format_csv_report,
                        format_markdown_report, run_benchmark, worker_count)
from .data import extract_patches
from .fileio import (FileFormatError, load_model, load_packaged_model,
                     read_image, read_key_value,
                     save_model, train_config_from_dict, write_image,
                     write_key_value)
from .image import basis_by_name
from .noise import bin3, sample_poisson, scale_to_peak
from .pipeline import (VARIANTS, DenoiseRequest, denoise, estimate_peak)
from .solver import NumericalFailure
from .training import (LowerSolveFailure, TrainingFailure, TrainingSample,
                       initial_model, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_IMAGE_EXTS = (".pgm", ".png", ".f32")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_bits(img) -> int:
    return 16 if img.max() > 255 else 8


def cmd_noise(args) -> int:
    clean = read_image(args.input)
    scaled = scale_to_peak(clean, args.peak)
    noisy = sample_poisson(scaled, seed=args.seed)
    meta = {"peak": f"{args.peak:.17g}", "seed": args.seed, "bin_factor": 1}
    if args.bin:
        noisy = bin3(noisy)
        meta["bin_factor"] = 3
        meta["peak_binned"] = f"{9.0 * args.peak:.17g}"
    write_image(args.output, noisy, bits=_output_bits(noisy))
    write_key_value(args.output + ".meta", meta)
    print(f"wrote {args.output} (peak {args.peak:g}, seed {args.seed})")
    return EXIT_OK


def cmd_denoise(args) -> int:
    if args.model:
        model = load_model(args.model)
    else:
        model = load_packaged_model("foe_s" if args.variant == "direct" else "foe_a")
    noisy = read_image(args.input)
    if args.peak is not None:
        peak = args.peak
    else:
        peak = estimate_peak(noisy)
        print(f"peak estimated from input: {peak:g}")
    req = DenoiseRequest(noisy=noisy, peak=peak, model=model, variant=args.variant,
                         lam=args.lam if args.lam is not None else "auto",
                         zero_offset_c=args.c)
    out = denoise(req)
    write_image(args.output, out.image, bits=_output_bits(out.image))
    print(f"branch: {out.branch}")
    print(f"lambda: {out.lam:.17g}")
    if args.trace:
        out.trace.save_csv(args.trace)
        print(f"trace: {args.trace}")
    print(f"wrote {args.output}")
    return EXIT_OK


# harness keys a training config may set besides TrainConfig fields
_TRAIN_DATA_DEFAULTS = {
    "peak": 40.0, "patch_size": 64, "n_patches": 20, "seed": 0,
    "n_filters": 24, "basis": "dct5", "filter_norm_init": 0.1,
    "weight_init": 1.0,
}


def _split_train_config(path):
    entries = read_key_value(path) if path else {}
    harness = dict(_TRAIN_DATA_DEFAULTS)
    for key in list(entries):
        if key in harness:
            harness[key] = type(harness[key])(entries.pop(key))
    return harness, train_config_from_dict(entries)


def _load_corpus(corpus_dir):
    try:
        names = sorted(os.listdir(corpus_dir))
    except OSError as err:
        raise FileFormatError(f"cannot list corpus directory: {err}") from err
    images = []
    for name in names:
        if os.path.splitext(name)[1].lower() in _IMAGE_EXTS:
            images.append((name, read_image(os.path.join(corpus_dir, name))))
    if not images:
        raise FileFormatError(f"no readable images in {corpus_dir}")
    return images


def cmd_train(args) -> int:
    harness, cfg = _split_train_config(args.config)
    images = _load_corpus(args.corpus_dir)
    patches = extract_patches(images, int(harness["n_patches"]),
                              int(harness["patch_size"]), seed=int(harness["seed"]))
    peak = float(harness["peak"])
    samples = []
    for i, patch in enumerate(patches):
        scaled = scale_to_peak(patch, peak)
        noisy = sample_poisson(scaled, seed=int(harness["seed"]) * 100003 + i)
        samples.append(TrainingSample.create(scaled, noisy))

    basis = basis_by_name(str(harness["basis"]))
    domain = "anscombe" if cfg.objective == "anscombe_domain" else "original"
    init = initial_model(basis, int(harness["n_filters"]), domain,
                         filter_norm=float(harness["filter_norm_init"]),
                         weight=float(harness["weight_init"]))

    ckpt_dir = args.checkpoint_dir or args.out_model + ".checkpoints"
    os.makedirs(ckpt_dir, exist_ok=True)

    def progress(iteration, loss, _model):
        print(f"iter {iteration:4d}  loss {loss:.8e}", flush=True)

    result = train(samples, init, cfg, checkpoint_dir=ckpt_dir,
                   callback=progress, resume_from=args.resume)
    save_model(args.out_model, result.model)
    loss_csv = args.out_model + ".loss.csv"
    with open(loss_csv, "w") as fh:
        fh.write("iteration,loss\n")
        for i, val in enumerate(result.loss_history):
            fh.write(f"{i},{val:.17g}\n")
    print(f"stop reason: {result.stop_reason}")
    print(f"wrote {args.out_model} and {loss_csv}")
    return EXIT_OK


def cmd_eval(args) -> int:
    variants = tuple(args.variants.split(","))
    transform_model = load_model(args.model) if args.model else None
    if transform_model is None and set(variants) - {"direct"}:
        transform_model = load_packaged_model("foe_a")
    direct_model = load_model(args.direct_model) if args.direct_model else None
    if direct_model is None and "direct" in variants:
        direct_model = load_packaged_model("foe_s")
    spec = BenchmarkSpec(
        images=tuple(args.images.split(",")),
        peaks=tuple(float(p) for p in args.peaks.split(",")),
        variants=variants,
        transform_model=transform_model,
        direct_model=direct_model,
        base_seed=args.base_seed,
        lam=args.lam if args.lam is not None else "auto",
    )
    os.makedirs(args.out_dir, exist_ok=True)

    def progress(row):
        print(f"{row.image:12s} peak {row.peak:6g} {row.variant:18s} "
              f"{row.psnr_db:6.2f} dB / {row.mssim:.3f}", flush=True)

    rows = run_benchmark(spec, workers=args.workers, progress=progress)
    csv_path = os.path.join(args.out_dir, "results.csv")
    md_path = os.path.join(args.out_dir, "report.md")
    with open(csv_path, "w") as fh:
        fh.write(format_csv_report(rows))
    with open(md_path, "w") as fh:
        fh.write(format_markdown_report(rows))
    print(f"wrote {csv_path} and {md_path}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="foepoisson",
                     description="Poisson denoising with trained filter priors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("noise", help="synthesize a Poisson-noisy image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--peak", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bin", action="store_true", help="also 3x3-bin the counts")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("denoise", help="denoise a noisy image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--model", default=None,
                   help="model file; defaults to the packaged prior for the variant")
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--peak", type=float, default=None,
                   help="true peak; estimated from the input when omitted")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="data-term weight; overrides the calibration table")
    p.add_argument("--c", type=float, default=0.1,
                   help="replacement for zero counts (direct variant)")
    p.add_argument("--trace", default=None, help="write solver trace CSV here")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("train", help="train a filter prior on a corpus")
    p.add_argument("corpus_dir")
    p.add_argument("out_model")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the benchmark grid and write reports")
    p.add_argument("--model", default=None,
                   help="transform-domain model file; defaults to the packaged one")
    p.add_argument("--direct-model", default=None,
                   help="original-domain model file; defaults to the packaged one")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--images", default="boat,cameraman,fluocells,house,lena,bridge,pepper,man")
    p.add_argument("--peaks", default=",".join(f"{p:g}" for p in DEFAULT_PEAKS))
    p.add_argument("--variants", default="transform,transform_binned")
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--workers", type=int, default=None,
                   help=f"job fan-out; defaults to $FOEPOISSON_WORKERS or 1 "
                        f"(currently {worker_count()})")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileFormatError, FileNotFoundError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, LowerSolveFailure, TrainingFailure) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
