"""Calibrate the data-weight table on the validation images.

For every (table, peak) bucket the script grid-searches the data weight that
maximizes mean PSNR over the validation set, using the trained model that
ships with the package, then rewrites the packaged table JSON in place.  The
quadratic table carries buckets below the branch threshold (and the
I-divergence table one above it) so forced-branch comparisons resolve a
calibrated weight instead of a clamped one; the 9 and 18 buckets serve the
binned pipeline, which looks up weights at nine times the nominal peak.

    python3 scripts/calibrate_lambda.py \
        --transform-model src/foepoisson/assets/foe_a.foe

Pass --direct-model to calibrate the original-domain table as well;
otherwise its entries are carried over unchanged.
"""

import argparse
import json
import pathlib
import sys
import time

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from foepoisson.benchmark import job_seed
from foepoisson.data import load_validation_images
from foepoisson.fileio import load_model
from foepoisson.metrics import psnr
from foepoisson.noise import sample_poisson, scale_to_peak
from foepoisson.pipeline import DenoiseRequest, denoise

BUCKETS = {
    "transform_quadratic": (2.0, 5.0, 7.0, 9.0, 18.0, 40.0),
    "transform_idiv": (0.1, 0.2, 0.5, 1.0, 2.0, 4.5, 7.0),
    "direct": (0.5, 1.0, 2.0, 4.0),
}
COARSE_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)
REFINE_FACTORS = (0.6, 0.75, 0.9, 1.15, 1.35)


def interp_guess(table, peak):
    """Log-log interpolation with clamping, matching the pipeline lookup."""
    pts = sorted(table)
    peaks = np.array([p for p, _ in pts])
    lams = np.array([l for _, l in pts])
    return float(np.exp(np.interp(np.log(peak), np.log(peaks), np.log(lams))))


def job_kwargs(key, peak):
    if key == "direct":
        return {"variant": "direct"}
    return {"variant": "transform", "force_branch": key.split("_", 1)[1]}


def mean_psnr(images, key, peak, lam, model):
    total = 0.0
    for name, img in images:
        clean = scale_to_peak(img, peak)
        noisy = sample_poisson(clean, seed=job_seed(name, peak, "calibration", 0))
        req = DenoiseRequest(noisy=noisy, peak=peak, model=model, lam=lam,
                             **job_kwargs(key, peak))
        out = denoise(req)
        total += psnr(out.image, clean, data_range=peak)
    return total / len(images)


def calibrate_bucket(images, key, peak, guess, model):
    scored = {}

    def score(lam):
        lam = float(f"{lam:.4g}")
        if lam not in scored:
            scored[lam] = mean_psnr(images, key, peak, lam, model)
            print(f"  {key} peak {peak}: lam {lam:<10g} -> {scored[lam]:.3f} dB",
                  flush=True)
        return scored[lam]

    for f in COARSE_FACTORS:
        score(guess * f)
    best = max(scored, key=scored.get)
    for f in REFINE_FACTORS:
        score(best * f)
    best = max(scored, key=scored.get)
    print(f"  {key} peak {peak}: chose lam {best} ({scored[best]:.3f} dB)", flush=True)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--transform-model", default="src/foepoisson/assets/foe_a.foe")
    ap.add_argument("--direct-model", default=None)
    ap.add_argument("--table", default="src/foepoisson/assets/lambda_table.json")
    args = ap.parse_args(argv)

    t0 = time.monotonic()
    path = pathlib.Path(args.table)
    data = json.loads(path.read_text())
    images = load_validation_images()
    models = {"transform_quadratic": load_model(args.transform_model),
              "transform_idiv": load_model(args.transform_model)}
    if args.direct_model:
        models["direct"] = load_model(args.direct_model)

    for key, model in models.items():
        old = data["tables"][key]
        new = []
        for peak in BUCKETS[key]:
            guess = interp_guess(old, peak)
            new.append([peak, calibrate_bucket(images, key, peak, guess, model)])
        data["tables"][key] = new

    data["note"] = ("data weights maximizing mean validation PSNR per "
                    "(branch, peak) bucket; see scripts/calibrate_lambda.py")
    data["calibration"] = {
        "images": [name for name, _ in images],
        "base_seed": 0,
        "transform_model": pathlib.Path(args.transform_model).name,
        "direct_model": (pathlib.Path(args.direct_model).name
                         if args.direct_model else None),
        "search": "two-stage multiplicative grid, mean PSNR objective",
    }
    path.write_text(json.dumps(data, indent=2) + "\n")
    print(f"wrote {path} in {time.monotonic() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
