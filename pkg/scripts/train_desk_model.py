"""Train the shipped transform-domain filter bank on the desk-scale corpus.

Reproduces the default recipe of ``foepoisson train``: 20 patches of 64x64
drawn from the bundled training images, scaled to peak 40, one Poisson draw
per patch.  The result is written as package data so the evaluation pipeline
and the acceptance suite can load it without retraining.

Run from the repository root:

    python3 scripts/train_desk_model.py --minutes 90

Checkpoints land in train_runs/foe_a/ and a run can be resumed bit-exactly
with --resume train_runs/foe_a/checkpoint_NNNN.npz (the newest file).
"""

import argparse
import csv
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from foepoisson.data import extract_patches, load_training_images
from foepoisson.fileio import save_model
from foepoisson.image import dct_basis
from foepoisson.noise import sample_poisson, scale_to_peak
from foepoisson.training import TrainConfig, TrainingSample, initial_model, train


def build_samples(n_patches, patch_size, peak, seed):
    patches = extract_patches(load_training_images(), n_patches, patch_size, seed)
    samples = []
    for i, patch in enumerate(patches):
        clean = scale_to_peak(patch, peak)
        noisy = sample_poisson(clean, seed=seed * 100003 + i)
        samples.append(TrainingSample.create(clean, noisy))
    return samples


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="src/foepoisson/assets/foe_a.foe")
    ap.add_argument("--run-dir", default="train_runs/foe_a")
    ap.add_argument("--minutes", type=float, default=90.0,
                    help="wall clock budget; training stops cooperatively at the deadline")
    ap.add_argument("--max-iters", type=int, default=400)
    ap.add_argument("--n-filters", type=int, default=24)
    ap.add_argument("--filter-size", type=int, default=5)
    ap.add_argument("--n-patches", type=int, default=20)
    ap.add_argument("--patch-size", type=int, default=64)
    ap.add_argument("--peak", type=float, default=40.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--objective", choices=("anscombe_domain", "original_domain"),
                    default="anscombe_domain",
                    help="lower-level objective; decides the model's domain")
    ap.add_argument("--resume", default=None,
                    help="checkpoint file to continue from")
    args = ap.parse_args(argv)

    run_dir = pathlib.Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.monotonic()
    samples = build_samples(args.n_patches, args.patch_size, args.peak, args.seed)
    print(f"built {len(samples)} samples in {time.monotonic() - t0:.1f}s", flush=True)

    domain = "anscombe" if args.objective == "anscombe_domain" else "original"
    model0 = initial_model(dct_basis(args.filter_size), args.n_filters, domain)
    cfg = TrainConfig(objective=args.objective,
                      max_outer_iters=args.max_iters,
                      checkpoint_every=10)

    deadline = time.monotonic() + args.minutes * 60.0

    def progress(iteration, loss, model):
        print(f"iter {iteration:4d}  loss {loss:.6e}  "
              f"elapsed {time.monotonic() - t0:.1f}s", flush=True)
        return time.monotonic() > deadline

    result = train(samples, model0, cfg, checkpoint_dir=str(run_dir),
                   callback=progress, resume_from=args.resume)

    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, result.model)

    with open(run_dir / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for i, loss in enumerate(result.loss_history):
            writer.writerow([i, f"{loss:.17g}"])

    print(f"stop: {result.stop_reason}", flush=True)
    print(f"final loss {result.loss_history[-1]:.6e} after "
          f"{len(result.loss_history) - 1} iterations", flush=True)
    print(f"model written to {out}", flush=True)


if __name__ == "__main__":
    main()
