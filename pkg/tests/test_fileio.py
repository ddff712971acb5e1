"""Round-trip and validation tests for the file format helpers."""

import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foepoisson.fileio import (FileFormatError, load_model, read_image,
                               read_key_value, read_pgm, read_png,
                               read_float_raster, save_model,
                               solver_config_from_dict,
                               train_config_from_dict, write_image,
                               write_key_value, write_pgm, write_png,
                               write_float_raster)
from foepoisson.image import dct_basis
from foepoisson.prior import FoEModel


def random_model(rng, n_filters=4, m=3, domain_tag="anscombe"):
    basis = dct_basis(m)
    betas = rng.standard_normal((n_filters, basis.n_atoms))
    weights = np.exp(rng.standard_normal(n_filters))
    return FoEModel(basis=basis, betas=betas, weights=weights, domain_tag=domain_tag)


class TestModelFile:
    """Text model files must round trip bit-exactly."""

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        model = random_model(rng)
        path = tmp_path / "model.foe"
        save_model(path, model)
        back = load_model(path)
        assert back.domain_tag == model.domain_tag
        assert back.boundary == model.boundary
        assert back.basis.name == model.basis.name
        assert np.array_equal(back.betas, model.betas)
        assert np.array_equal(back.weights, model.weights)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1),
           nf=st.integers(1, 6),
           m=st.sampled_from([3, 5]),
           tag=st.sampled_from(["original", "anscombe"]))
    def test_round_trip_property(self, seed, nf, m, tag):
        rng = np.random.default_rng(seed)
        model = random_model(rng, n_filters=nf, m=m, domain_tag=tag)
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/m.foe"
            save_model(path, model)
            back = load_model(path)
        assert np.array_equal(back.betas, model.betas)
        assert np.array_equal(back.weights, model.weights)

    def test_header_layout(self, tmp_path):
        rng = np.random.default_rng(0)
        model = random_model(rng, n_filters=2, m=3)
        path = tmp_path / "model.foe"
        save_model(path, model)
        lines = path.read_text().splitlines()
        assert lines[0] == "FOE 1"
        assert lines[1].split() == ["anscombe", "2", "3", "dct3", "symmetric"]
        assert len(lines) == 4
        # weight followed by one coefficient per basis atom
        assert len(lines[2].split()) == 1 + 8

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.foe"
        path.write_text("FOE 2\nanscombe 1 3 dct3 symmetric\n")
        with pytest.raises(FileFormatError):
            load_model(path)

    def test_rejects_coefficient_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.foe"
        path.write_text("FOE 1\nanscombe 1 3 dct3 symmetric\n1.0 0.5 0.5\n")
        with pytest.raises(FileFormatError):
            load_model(path)

    def test_rejects_missing_filter_lines(self, tmp_path):
        path = tmp_path / "bad.foe"
        path.write_text("FOE 1\nanscombe 2 3 dct3 symmetric\n"
                        + " ".join(["1.0"] * 9) + "\n")
        with pytest.raises(FileFormatError):
            load_model(path)

    def test_rejects_unknown_domain(self, tmp_path):
        path = tmp_path / "bad.foe"
        path.write_text("FOE 1\nfourier 1 3 dct3 symmetric\n" + " ".join(["1.0"] * 9) + "\n")
        with pytest.raises(FileFormatError):
            load_model(path)


class TestFloatRaster:
    def test_round_trip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.standard_normal((13, 9)).astype(np.float32).astype(np.float64)
        path = tmp_path / "img.f32"
        write_float_raster(path, img)
        assert np.array_equal(read_float_raster(path), img)

    def test_rejects_truncated_file(self, tmp_path):
        path = tmp_path / "img.f32"
        write_float_raster(path, np.zeros((4, 4)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FileFormatError):
            read_float_raster(path)

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "img.f32"
        path.write_bytes(b"RAW 2 2\n" + b"\x00" * 16)
        with pytest.raises(FileFormatError):
            read_float_raster(path)


class TestPgm:
    def test_round_trip_8bit(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(11, 7)).astype(np.float64)
        path = tmp_path / "img.pgm"
        write_pgm(path, img, bits=8)
        assert np.array_equal(read_pgm(path), img)

    def test_round_trip_16bit(self, tmp_path):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 65536, size=(5, 6)).astype(np.float64)
        path = tmp_path / "img.pgm"
        write_pgm(path, img, bits=16)
        assert np.array_equal(read_pgm(path), img)

    def test_write_clips_and_rounds(self, tmp_path):
        path = tmp_path / "img.pgm"
        write_pgm(path, np.array([[-3.0, 12.6, 300.0]]), bits=8)
        assert np.array_equal(read_pgm(path), [[0.0, 13.0, 255.0]])

    def test_reads_comment_headers(self, tmp_path):
        path = tmp_path / "img.pgm"
        body = bytes([0, 128, 255, 7])
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + body)
        assert np.array_equal(read_pgm(path), [[0.0, 128.0], [255.0, 7.0]])

    def test_rejects_ascii_pgm(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
        with pytest.raises(FileFormatError):
            read_pgm(path)


class TestPng:
    def test_round_trip_8bit(self, tmp_path):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, size=(9, 14)).astype(np.float64)
        path = tmp_path / "img.png"
        write_png(path, img, bits=8)
        assert np.array_equal(read_png(path), img)

    def test_round_trip_16bit(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 65536, size=(8, 8)).astype(np.float64)
        path = tmp_path / "img.png"
        write_png(path, img, bits=16)
        assert np.array_equal(read_png(path), img)


class TestDispatch:
    def test_extension_dispatch(self, tmp_path):
        img = np.arange(12.0).reshape(3, 4)
        for name in ("a.pgm", "a.png", "a.f32"):
            path = tmp_path / name
            write_image(path, img)
            assert np.array_equal(read_image(path), img)

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(FileFormatError):
            write_image(tmp_path / "a.tiff", np.zeros((2, 2)))
        with pytest.raises(FileFormatError):
            read_image(tmp_path / "a.tiff")


class TestKeyValue:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "meta.txt"
        write_key_value(path, {"peak": 40.0, "seed": 17, "variant": "transform"})
        back = read_key_value(path)
        assert back == {"peak": "40.0", "seed": "17", "variant": "transform"}

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("# heading\n\ngamma = 0.5\n")
        assert read_key_value(path) == {"gamma": "0.5"}

    def test_rejects_bare_token(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("gamma\n")
        with pytest.raises(FileFormatError):
            read_key_value(path)


class TestConfigParsing:
    def test_solver_fields(self):
        cfg = solver_config_from_dict({"gamma": "0.5", "max_iters": "60"})
        assert cfg.gamma == 0.5
        assert cfg.max_iters == 60
        assert cfg.rel_tol == 1e-6

    def test_unknown_key_rejected(self):
        with pytest.raises(FileFormatError):
            solver_config_from_dict({"momentum": "0.9"})

    def test_train_fields_and_nested_solver(self):
        cfg = train_config_from_dict({
            "objective": "original_domain",
            "max_outer_iters": "40",
            "lower_solver.rel_tol": "1e-9",
            "lower_solver.max_iters": "250",
        })
        assert cfg.objective == "original_domain"
        assert cfg.max_outer_iters == 40
        assert cfg.lower_solver.rel_tol == 1e-9
        assert cfg.lower_solver.max_iters == 250
        # untouched fields keep their defaults
        assert cfg.lbfgs_memory == 10

    def test_unknown_objective_rejected(self):
        with pytest.raises(FileFormatError):
            train_config_from_dict({"objective": "huber"})

    def test_bare_lower_solver_key_rejected(self):
        with pytest.raises(FileFormatError):
            train_config_from_dict({"lower_solver": "default"})
