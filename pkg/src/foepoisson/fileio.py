"""File formats: model text files, raster images, flat key=value configs.

Model files are line-oriented text.  Images move through 8/16-bit PGM or
grayscale PNG for interoperability, or through a raw float32 format (one-line
text header, then row-major little-endian data) when quantization must be
avoided.  Configs and sidecar metadata share one key=value text format.
"""

import dataclasses
import os
from importlib import resources

import numpy as np
from PIL import Image

from .image import basis_by_name
from .prior import DOMAIN_TAGS, FoEModel
from .solver import SolverConfig
from .training import OBJECTIVES, TrainConfig

MODEL_MAGIC = "FOE 1"
FLOAT_MAGIC = "F32"


class FileFormatError(ValueError):
    """Raised when a file does not match its declared format."""


# ----------------------------------------------------------------------------
# model files


def save_model(path, model: FoEModel) -> None:
    """Write a model as text: magic, header, then one line per filter.

    Header line: domain_tag, filter count, filter size, basis id, boundary.
    Each filter line holds the positive weight followed by the basis
    coefficients, printed with 17 significant digits so the round trip is
    bit-exact.
    """
    nf, nb = model.betas.shape
    lines = [MODEL_MAGIC,
             f"{model.domain_tag} {nf} {model.basis.size} {model.basis.name} {model.boundary}"]
    for i in range(nf):
        row = [model.weights[i]] + list(model.betas[i])
        lines.append(" ".join(f"{float(v):.17g}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> FoEModel:
    """Read a model written by save_model."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MODEL_MAGIC:
        raise FileFormatError(f"{path}: missing '{MODEL_MAGIC}' header")
    header = lines[1].split()
    if len(header) != 5:
        raise FileFormatError(f"{path}: header needs 5 fields, got {len(header)}")
    domain_tag, nf_s, m_s, basis_id, boundary = header
    if domain_tag not in DOMAIN_TAGS:
        raise FileFormatError(f"{path}: unknown domain tag {domain_tag!r}")
    nf, m = int(nf_s), int(m_s)
    basis = basis_by_name(basis_id)
    if basis.size != m:
        raise FileFormatError(f"{path}: basis {basis_id} has size {basis.size}, header says {m}")
    if len(lines) != 2 + nf:
        raise FileFormatError(f"{path}: expected {nf} filter lines, got {len(lines) - 2}")
    weights = np.empty(nf)
    betas = np.empty((nf, basis.n_atoms))
    for i, line in enumerate(lines[2:]):
        vals = [float(tok) for tok in line.split()]
        if len(vals) != 1 + basis.n_atoms:
            raise FileFormatError(
                f"{path}: filter {i} has {len(vals) - 1} coefficients, need {basis.n_atoms}")
        weights[i] = vals[0]
        betas[i] = vals[1:]
    return FoEModel(basis=basis, betas=betas, weights=weights,
                    domain_tag=domain_tag, boundary=boundary)


def load_packaged_model(name: str = "foe_a") -> FoEModel:
    """Load a model shipped as package data, by bare name (e.g. "foe_a")."""
    ref = resources.files("foepoisson.assets") / f"{name}.foe"
    if not ref.is_file():
        raise FileFormatError(f"no packaged model named {name!r}")
    with resources.as_file(ref) as path:
        return load_model(path)


# ----------------------------------------------------------------------------
# raster images


def write_float_raster(path, img) -> None:
    """Raw float32 raster: text header "F32 h w\\n", then '<f4' row-major data."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2d array")
    with open(path, "wb") as fh:
        fh.write(f"{FLOAT_MAGIC} {img.shape[0]} {img.shape[1]}\n".encode())
        fh.write(img.astype("<f4").tobytes())


def read_float_raster(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode(errors="replace").split()
        if len(header) != 3 or header[0] != FLOAT_MAGIC:
            raise FileFormatError(f"{path}: not a {FLOAT_MAGIC} raster")
        h, w = int(header[1]), int(header[2])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w:
        raise FileFormatError(f"{path}: expected {h * w} samples, got {data.size}")
    return data.reshape(h, w).astype(np.float64)


def write_pgm(path, img, bits=8) -> None:
    """Binary PGM (P5).  Values are clipped and rounded to the integer range."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = np.asarray(img, dtype=np.float64)
    maxval = 2**bits - 1
    quant = np.clip(np.rint(img), 0, maxval)
    # 16-bit PGM samples are big-endian
    raw = quant.astype(">u2" if bits == 16 else np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
        fh.write(raw.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise FileFormatError(f"{path}: not a binary PGM")
    # header tokens may be split across lines and interleaved with # comments
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1
    w, h, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 65535:
        raise FileFormatError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else np.uint8
    data = np.frombuffer(blob, dtype=dtype, count=h * w, offset=pos)
    return data.reshape(h, w).astype(np.float64)


def write_png(path, img, bits=8) -> None:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = np.asarray(img, dtype=np.float64)
    maxval = 2**bits - 1
    quant = np.clip(np.rint(img), 0, maxval)
    if bits == 8:
        Image.fromarray(quant.astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(quant.astype(np.uint16)).save(path)


def read_png(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "I;16B"):
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float64)
    if arr.ndim != 2:
        raise FileFormatError(f"{path}: expected a grayscale image")
    return arr


_READERS = {".pgm": read_pgm, ".png": read_png, ".f32": read_float_raster}


def read_image(path):
    """Dispatch on extension: .pgm, .png, or .f32."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _READERS:
        raise FileFormatError(f"{path}: unsupported image extension {ext!r}")
    return _READERS[ext](path)


def write_image(path, img, bits=8) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        write_pgm(path, img, bits)
    elif ext == ".png":
        write_png(path, img, bits)
    elif ext == ".f32":
        write_float_raster(path, img)
    else:
        raise FileFormatError(f"{path}: unsupported image extension {ext!r}")


# ----------------------------------------------------------------------------
# key=value text (configs and sidecar metadata)


def write_key_value(path, mapping) -> None:
    with open(path, "w") as fh:
        for key, val in mapping.items():
            fh.write(f"{key}={val}\n")


def read_key_value(path) -> dict:
    """Flat key=value lines; '#' starts a comment, blank lines are skipped."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FileFormatError(f"{path}:{ln}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _coerce(text, target_type):
    if target_type is bool:
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return target_type(text)


def _apply_fields(cls, defaults, entries, path_prefix=""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in entries.items():
        if key not in fields:
            raise FileFormatError(f"unknown config key {path_prefix + key!r}")
        current = getattr(defaults, key)
        kwargs[key] = _coerce(text, type(current))
    return dataclasses.replace(defaults, **kwargs)


def solver_config_from_dict(entries, defaults=None) -> SolverConfig:
    """Override SolverConfig fields from string values; every field is addressable."""
    return _apply_fields(SolverConfig, defaults or SolverConfig(), dict(entries))


def train_config_from_dict(entries, defaults=None) -> TrainConfig:
    """Override TrainConfig fields; nested solver keys use a lower_solver. prefix."""
    defaults = defaults or TrainConfig()
    entries = dict(entries)
    if "lower_solver" in entries:
        raise FileFormatError("set solver fields via lower_solver.<field>")
    nested = {k[len("lower_solver."):]: entries.pop(k)
              for k in list(entries) if k.startswith("lower_solver.")}
    if "objective" in entries and entries["objective"] not in OBJECTIVES:
        raise FileFormatError(f"unknown objective {entries['objective']!r}")
    cfg = _apply_fields(TrainConfig, defaults, entries)
    if nested:
        solver = _apply_fields(SolverConfig, cfg.lower_solver, nested, "lower_solver.")
        cfg = dataclasses.replace(cfg, lower_solver=solver)
    return cfg
