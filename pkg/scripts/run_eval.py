"""Run the full evaluation grid and write CSV + markdown reports.

Defaults to the packaged trained model, the 8 evaluation images, the
standard peak ladder, and both transform variants; the markdown report
includes per-peak deltas against the published reference table.

    python3 scripts/run_eval.py --out-dir results
"""

import argparse
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from foepoisson.benchmark import (
    DEFAULT_PEAKS,
    BenchmarkSpec,
    format_csv_report,
    format_markdown_report,
    load_published,
    run_benchmark,
)
from foepoisson.data import EVAL_IMAGE_NAMES
from foepoisson.fileio import load_model, load_packaged_model


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default=None,
                    help="model file; defaults to the packaged foe_a")
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--images", default=",".join(EVAL_IMAGE_NAMES))
    ap.add_argument("--peaks", default=",".join(str(p) for p in DEFAULT_PEAKS))
    ap.add_argument("--variants", default="transform,transform_binned")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args(argv)

    model = load_model(args.model) if args.model else load_packaged_model("foe_a")
    spec = BenchmarkSpec(images=tuple(args.images.split(",")),
                         peaks=tuple(float(p) for p in args.peaks.split(",")),
                         variants=tuple(args.variants.split(",")),
                         transform_model=model, base_seed=args.seed)

    t0 = time.monotonic()
    done = [0]

    def progress(row):
        done[0] += 1
        print(f"[{done[0]:3d}] {row.image:10s} peak {row.peak:<5g} {row.variant:17s} "
              f"{row.psnr_db:6.2f} dB / {row.mssim:.3f}", flush=True)

    rows = run_benchmark(spec, workers=args.workers, progress=progress)

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(format_csv_report(rows))
    (out / "report.md").write_text(format_markdown_report(rows, load_published()))
    print(f"{len(rows)} jobs in {time.monotonic() - t0:.0f}s; reports in {out}/",
          flush=True)


if __name__ == "__main__":
    main()
