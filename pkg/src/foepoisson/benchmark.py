"""Benchmark runner: noise, denoise, and score a grid of jobs.

Each (image, peak, variant) job gets its own seed derived by hashing the job
key, so results are independent of execution order and worker count.  Reports
land as CSV (full precision) and Markdown (side by side with the published
reference values, including deltas for the rows this package regenerates).
"""

import csv
import hashlib
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .data import load_eval_image
from .metrics import score_denoised
from .noise import sample_poisson, scale_to_peak
from .pipeline import VARIANTS, DenoiseRequest, denoise
from .prior import FoEModel

DEFAULT_PEAKS = (0.1, 0.2, 0.5, 1.0, 2.0, 4.0, 40.0)
_RESULTS_RESOURCE = "published_results.csv"
# variants whose published counterparts this package regenerates
VARIANT_TO_PUBLISHED = {"transform": "foe", "transform_binned": "foe_bin"}
WORKERS_ENV = "FOEPOISSON_WORKERS"


@dataclass(frozen=True)
class BenchmarkSpec:
    """A grid of evaluation jobs plus the models that serve them."""

    images: tuple
    peaks: tuple
    variants: tuple
    transform_model: FoEModel | None = None
    direct_model: FoEModel | None = None
    base_seed: int = 0
    lam: object = "auto"

    def __post_init__(self):
        if not self.images or not self.peaks or not self.variants:
            raise ValueError("images, peaks, and variants must be non-empty")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        if any(p <= 0 for p in self.peaks):
            raise ValueError("peaks must be positive")
        if self.direct_model is None and "direct" in self.variants:
            raise ValueError("direct variant listed but no direct_model given")
        if self.transform_model is None and set(self.variants) - {"direct"}:
            raise ValueError("transform variants listed but no transform_model given")


@dataclass(frozen=True)
class BenchmarkRow:
    image: str
    peak: float
    variant: str
    psnr_db: float
    mssim: float
    branch: str
    lam: float
    seed: int


def job_seed(image: str, peak: float, variant: str, base_seed: int) -> int:
    """Deterministic per-job seed from the job key; order-independent."""
    key = f"{image}|{peak!r}|{variant}|{base_seed}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def _model_for(spec: BenchmarkSpec, variant: str) -> FoEModel:
    return spec.direct_model if variant == "direct" else spec.transform_model


def run_job(spec: BenchmarkSpec, name: str, clean: np.ndarray, peak: float,
            variant: str) -> BenchmarkRow:
    seed = job_seed(name, peak, variant, spec.base_seed)
    scaled = scale_to_peak(clean, peak)
    noisy = sample_poisson(scaled, seed=seed)
    req = DenoiseRequest(noisy=noisy, peak=peak, model=_model_for(spec, variant),
                         variant=variant, lam=spec.lam)
    out = denoise(req)
    score = score_denoised(out.image, scaled, peak, image_id=name, method_id=variant)
    return BenchmarkRow(image=name, peak=peak, variant=variant,
                        psnr_db=score.psnr_db, mssim=score.mssim,
                        branch=out.branch, lam=out.lam, seed=seed)


def worker_count() -> int:
    """Worker fan-out from the environment; defaults to sequential."""
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_benchmark(spec: BenchmarkSpec, image_loader=load_eval_image,
                  workers: int | None = None, progress=None) -> list[BenchmarkRow]:
    """All jobs in the grid; the row order is fixed by sorting on the job key."""
    clean = {name: image_loader(name) for name in spec.images}
    jobs = [(name, peak, variant) for name in spec.images
            for peak in spec.peaks for variant in spec.variants]
    n = workers if workers is not None else worker_count()

    def one(job):
        name, peak, variant = job
        row = run_job(spec, name, clean[name], peak, variant)
        if progress is not None:
            progress(row)
        return row

    if n == 1:
        rows = [one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(one, jobs))
    return sorted(rows, key=lambda r: (r.peak, r.image, r.variant))


def average_rows(rows: list[BenchmarkRow]) -> list[BenchmarkRow]:
    """Per (peak, variant) averages, reported under the image name 'average'."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.peak, r.variant), []).append(r)
    out = []
    for (peak, variant), rs in sorted(groups.items()):
        out.append(BenchmarkRow(
            image="average", peak=peak, variant=variant,
            psnr_db=float(np.mean([r.psnr_db for r in rs])),
            mssim=float(np.mean([r.mssim for r in rs])),
            branch=rs[0].branch, lam=rs[0].lam, seed=0))
    return out


def load_published() -> dict:
    """Published reference values: (method, peak, image) -> (psnr, mssim)."""
    text = resources.files("foepoisson.assets").joinpath(_RESULTS_RESOURCE).read_text()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    table = {}
    for rec in csv.DictReader(io.StringIO("\n".join(lines))):
        key = (rec["method"], float(rec["peak"]), rec["image"])
        table[key] = (float(rec["psnr"]), float(rec["mssim"]))
    return table


def format_csv_report(rows: list[BenchmarkRow]) -> str:
    """Full-precision CSV; byte-stable for identical inputs."""
    out = ["image,peak,variant,psnr_db,mssim,branch,lambda,seed"]
    for r in rows:
        out.append(f"{r.image},{r.peak:.17g},{r.variant},{r.psnr_db:.17g},"
                   f"{r.mssim:.17g},{r.branch},{r.lam:.17g},{r.seed}")
    return "\n".join(out) + "\n"


def format_markdown_report(rows: list[BenchmarkRow], published: dict | None = None) -> str:
    """Per-peak tables with published rows and deltas for regenerated methods."""
    if published is None:
        published = load_published()
    rows = rows + average_rows(rows)
    images = sorted({r.image for r in rows if r.image != "average"}) + ["average"]
    peaks = sorted({r.peak for r in rows})
    variants = sorted({r.variant for r in rows})
    by_key = {(r.peak, r.variant, r.image): r for r in rows}
    pub_methods = sorted({m for (m, _, _) in published})

    lines = ["# Benchmark report", "",
             "Values are PSNR dB / MSSIM; `delta` rows subtract the published",
             "reference from this run for the regenerated method.", ""]
    for peak in peaks:
        lines.append(f"## peak = {peak:g}")
        lines.append("")
        lines.append("| method | " + " | ".join(images) + " |")
        lines.append("|---" * (len(images) + 1) + "|")
        for method in pub_methods:
            cells = []
            for img in images:
                val = published.get((method, peak, img))
                cells.append(f"{val[0]:.2f}/{val[1]:.2f}" if val else "-")
            lines.append(f"| {method} (published) | " + " | ".join(cells) + " |")
        for variant in variants:
            cells = []
            for img in images:
                r = by_key.get((peak, variant, img))
                cells.append(f"{r.psnr_db:.2f}/{r.mssim:.2f}" if r else "-")
            lines.append(f"| {variant} (this run) | " + " | ".join(cells) + " |")
            counterpart = VARIANT_TO_PUBLISHED.get(variant)
            if counterpart is None:
                continue
            cells = []
            for img in images:
                r = by_key.get((peak, variant, img))
                val = published.get((counterpart, peak, img))
                if r is None or val is None:
                    cells.append("-")
                else:
                    cells.append(f"{r.psnr_db - val[0]:+.2f}/{r.mssim - val[1]:+.2f}")
            lines.append(f"| delta vs {counterpart} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)
