import json
import struct
import zlib

import numpy as np
import pytest

from geodist import checkpoint
from geodist.baseline_vf import VFConfig, VectorFieldModel
from geodist.config import ConfigError, RunConfig, config_hash, load_config
from geodist.denoiser import DenoiserConfig, DenoiserModel
from geodist.pointio import read_ply, read_points, read_xyz, write_ply, write_points, write_xyz

# ---------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = DenoiserModel(DenoiserConfig(16, 2, fourier_bands=3), seed=5)
    m.params += np.float32(0.125)  # arbitrary non-init values
    meta = {"normalization": {"shift": 0.5, "scale": 2.0}}
    checkpoint.save(tmp_path / "a.ckpt", m, meta)
    back, doc = checkpoint.load(tmp_path / "a.ckpt")
    assert back.params.tobytes() == m.params.tobytes()
    assert back.config == m.config
    assert doc["normalization"] == meta["normalization"]
    checkpoint.save(tmp_path / "b.ckpt", back, meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_vector_field(tmp_path):
    m = VectorFieldModel(VFConfig(12, 3, fourier_bands=2), seed=1)
    checkpoint.save(tmp_path / "v.ckpt", m)
    back, doc = checkpoint.load(tmp_path / "v.ckpt")
    assert doc["kind"] == "vector_field"
    assert back.config == m.config
    np.testing.assert_array_equal(back.params, m.params)


def test_checkpoint_layout_bytes():
    m = DenoiserModel(DenoiserConfig(8, 1, fourier_bands=1))
    data = checkpoint.encode(m)
    assert data[:8] == b"GEODIST1"
    assert struct.unpack_from("<I", data, 8)[0] == checkpoint.VERSION
    n = struct.unpack_from("<I", data, 12)[0]
    doc = json.loads(data[16:16 + n])
    assert doc["kind"] == "denoiser" and doc["model"]["channels"] == 8
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    blob = data[-4 - 4 * m.n_params:-4]
    np.testing.assert_array_equal(np.frombuffer(blob, "<f4"), m.params)
    doc2, table, params = checkpoint.decode(data)
    assert list(table) == list(m.layout)
    assert sum(length for _, length in table.values()) == m.n_params


def test_checkpoint_detects_corruption():
    data = bytearray(checkpoint.encode(DenoiserModel(DenoiserConfig(8, 1))))
    data[-20] ^= 0xFF
    with pytest.raises(checkpoint.CheckpointError, match="CRC"):
        checkpoint.decode(bytes(data))
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.decode(b"NOTACKPT" + bytes(40))


def test_checkpoint_rejects_bad_segment_table():
    m = DenoiserModel(DenoiserConfig(8, 1))
    good = checkpoint.encode(m)
    # drop the last float from the blob and re-seal with a valid CRC
    body = good[:-8]
    bad = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(bad)


# ---------------------------------------------------------------- config


def test_default_config_roundtrip():
    cfg = RunConfig()
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()


def test_config_partial_sections(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"denoiser": {"channels": 32}, "training": {"lr": 0.002}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.denoiser.channels == 32 and cfg.denoiser.n_blocks == 4
    assert cfg.training.lr == 0.002


@pytest.mark.parametrize("doc, match", [
    ({"nope": {}}, "unknown section"),
    ({"training": {"epoch": 3}}, "unknown key"),
    ({"training": {"epochs": -1}}, "nonnegative"),
    ({"training": {"epochs": 1.5}}, "expected int"),
    ({"training": {"epochs": True}}, "expected int"),
    ({"denoiser": {"channels": "64"}}, "expected int"),
    ({"sampler": {"solver": "rk4"}}, "solver"),
    ({"sampler": {"steps": 8, "record": [9]}}, "record"),
    ({"mesh": {"n_norm_samples": 10}}, "n_norm_samples"),
    ({"training": []}, "JSON object"),
])
def test_config_rejects(doc, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(doc)


def test_config_bad_json_and_missing(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_overrides_revalidate():
    cfg = RunConfig().with_overrides({"training.epochs": 5, "mesh.path": "x.obj"})
    assert cfg.training.epochs == 5 and cfg.mesh.path == "x.obj"
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"training.epochs": -2})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"epochs": 2})


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_int_accepted_for_float_field():
    cfg = RunConfig.from_dict({"training": {"lr": 1}})
    assert cfg.training.lr == 1.0 and isinstance(cfg.training.lr, float)


# ---------------------------------------------------------------- point files


def test_ply_roundtrip_float32(tmp_path):
    pts = np.random.default_rng(0).standard_normal((100, 3))
    write_ply(tmp_path / "p.ply", pts, ["hello"])
    back = read_ply(tmp_path / "p.ply")
    np.testing.assert_array_equal(back, pts.astype(np.float32).astype(np.float64))
    assert b"comment hello" in (tmp_path / "p.ply").read_bytes()


def test_ply_colors_and_extra(tmp_path):
    pts = np.random.default_rng(0).random((10, 6))
    write_ply(tmp_path / "c.ply", pts, extra={"error": np.arange(10.0)})
    back, extra = read_ply(tmp_path / "c.ply", with_extra=True)
    assert back.shape == (10, 6)
    np.testing.assert_array_equal(extra["error"], np.arange(10.0))


def test_ply_empty(tmp_path):
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)))
    text = (tmp_path / "e.ply").read_bytes()
    assert text.endswith(b"end_header\n")
    assert b"element vertex 0" in text
    assert read_ply(tmp_path / "e.ply").shape == (0, 3)


def test_ply_ascii_read(tmp_path):
    (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                                    "property float y\nproperty float z\nend_header\n1 2 3\n4 5 6\n")
    np.testing.assert_array_equal(read_ply(tmp_path / "a.ply"), [[1, 2, 3], [4, 5, 6]])


def test_ply_rejects_garbage(tmp_path):
    (tmp_path / "g.ply").write_bytes(b"hello")
    with pytest.raises(ValueError):
        read_ply(tmp_path / "g.ply")


def test_xyz_roundtrip(tmp_path):
    pts = np.random.default_rng(1).standard_normal((20, 3))
    write_xyz(tmp_path / "p.xyz", pts, ["prov line"])
    assert (tmp_path / "p.xyz").read_text().startswith("# prov line\n")
    np.testing.assert_allclose(read_xyz(tmp_path / "p.xyz"), pts, rtol=1e-8)


def test_dispatch_by_suffix(tmp_path):
    pts = np.ones((3, 3))
    for name in ("a.ply", "a.xyz", "a.txt"):
        write_points(tmp_path / name, pts)
        np.testing.assert_array_equal(read_points(tmp_path / name), pts)
