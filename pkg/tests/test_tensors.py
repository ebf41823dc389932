import json
import struct

import numpy as np
import pytest
from safetensors.numpy import load_file, save_file

from modelcollab.errors import FormatError, ShapeError
from modelcollab.tensors import TensorMap, bf16_to_f64, f64_to_bf16, tensor_load, tensor_save


def sample_map():
    rng = np.random.default_rng(0)
    return TensorMap({"w": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5)},
                     metadata={"labels": "A,B"})


def test_round_trip_is_bit_exact(tmp_path):
    m = sample_map()
    tensor_save(m, tmp_path / "m.safetensors")
    back = tensor_load(tmp_path / "m.safetensors")
    assert back.bitwise_equal(m) and back.metadata == {"labels": "A,B"}


def test_arithmetic_keeps_dtype_tags(tmp_path):
    m = sample_map()
    doubled = m * 2.0
    assert doubled.dtypes == m.dtypes
    tensor_save(doubled, tmp_path / "d.safetensors")
    assert tensor_load(tmp_path / "d.safetensors").tensors["w"].dtype == np.float32


def test_library_interop(tmp_path):
    arrays = {"x": np.arange(6, dtype=np.float32).reshape(2, 3), "y": np.ones(4, dtype=np.float64),
              "z": np.array([1, 2], dtype=np.int64)}
    save_file(arrays, str(tmp_path / "lib.safetensors"))
    ours = tensor_load(tmp_path / "lib.safetensors")
    for k, v in arrays.items():
        assert np.array_equal(ours.tensors[k], v) and ours.tensors[k].dtype == v.dtype
    tensor_save(ours, tmp_path / "ours.safetensors")
    theirs = load_file(str(tmp_path / "ours.safetensors"))
    assert all(np.array_equal(theirs[k], v) for k, v in arrays.items())


def test_truncated_file(tmp_path):
    p = tmp_path / "m.safetensors"
    tensor_save(sample_map(), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        tensor_load(p)
    p.write_bytes(b"\x01\x02")
    with pytest.raises(FormatError):
        tensor_load(p)


def write_raw(path, header, payload):
    h = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(h)) + h + payload)


def test_overlapping_offsets(tmp_path):
    p = tmp_path / "bad.safetensors"
    write_raw(p, {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                  "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}, bytes(12))
    with pytest.raises(FormatError):
        tensor_load(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.safetensors"
    h = b"{not json"
    p.write_bytes(struct.pack("<Q", len(h)) + h)
    with pytest.raises(FormatError):
        tensor_load(p)
    write_raw(p, {"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, bytes(8))
    with pytest.raises(FormatError):
        tensor_load(p)
    write_raw(p, {"a": {"dtype": "Q9", "shape": [2], "data_offsets": [0, 8]}}, bytes(8))
    with pytest.raises(FormatError):
        tensor_load(p)


def test_bf16_round_trip(tmp_path):
    x = np.array([1.0, -2.5, 3.140625, 0.0])
    bits = f64_to_bf16(x)
    assert np.array_equal(bf16_to_f64(bits), x)
    m = TensorMap({"h": bits}, {"h": "BF16"})
    tensor_save(m, tmp_path / "h.safetensors")
    back = tensor_load(tmp_path / "h.safetensors")
    assert back.bitwise_equal(m) and np.array_equal(back.value("h"), x)


def test_shape_mismatch():
    a = TensorMap({"w": np.zeros(3)})
    with pytest.raises(ShapeError):
        a + TensorMap({"w": np.zeros(4)})
    with pytest.raises(ShapeError):
        a - TensorMap({"v": np.zeros(3)})


def test_vector_round_trip():
    m = sample_map()
    assert m.from_vector(m.to_vector()).allclose(m, atol=0)
    with pytest.raises(ShapeError):
        m.from_vector(np.zeros(3))


def test_content_hash_tracks_values():
    m = sample_map()
    assert m.content_hash() == sample_map().content_hash()
    assert (m * 1.5).content_hash() != m.content_hash()
