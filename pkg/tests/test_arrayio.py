import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comwin import arrayio
from comwin.arrayio import (
    ArraySpec,
    BadMagicError,
    DatasetManifest,
    ManifestError,
    Sample,
    TruncatedError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)


def test_smallest_array_layout(tmp_path):
    path = tmp_path / "a.cwt"
    arrayio.write_array(path, ArraySpec("f32", (1,)), [0.0])
    blob = path.read_bytes()
    assert len(blob) == 11 + 4
    assert blob[:4] == b"CWT1"
    assert blob[4] == 1  # version
    assert blob[5] == arrayio.DTYPE_CODES["f32"]
    assert blob[6] == 1
    assert struct.unpack("<I", blob[7:11]) == (1,)
    assert blob[11:] == b"\x00" * 4


def test_header_length_is_7_plus_4_ndim(tmp_path):
    for dims in [(1, 1), (3, 4, 5), (2, 2, 2, 2)]:
        path = tmp_path / "h.cwt"
        arrayio.write_array(path, ArraySpec("u8", dims), np.zeros(dims, np.uint8))
        assert len(path.read_bytes()) == 7 + 4 * len(dims) + int(np.prod(dims))


def test_payload_is_little_endian_row_major(tmp_path):
    path = tmp_path / "le.cwt"
    data = np.arange(6, dtype=np.int32).reshape(2, 3)
    arrayio.save(path, data)
    payload = path.read_bytes()[7 + 8 :]
    assert struct.unpack("<6i", payload) == tuple(range(6))


@pytest.mark.parametrize("dtype", ["f32", "f64", "i32", "u8"])
def test_roundtrip_each_dtype(tmp_path, dtype):
    rng = np.random.default_rng(0)
    spec = ArraySpec(dtype, (3, 4, 5))
    data = (rng.random(60) * 200).astype(spec.numpy_dtype)
    path = tmp_path / "r.cwt"
    arrayio.write_array(path, spec, data)
    spec2, data2 = arrayio.read_array(path)
    assert spec2 == spec
    assert data2.tobytes() == data.tobytes()


def test_fuzz_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(1234)
    path = tmp_path / "fz.cwt"
    for _ in range(1000):
        ndim = int(rng.integers(1, 4))
        dims = tuple(int(d) for d in rng.integers(1, 6, size=ndim))
        # raw random bits, including NaN payloads and denormals
        data = rng.integers(0, 2**32, size=int(np.prod(dims)), dtype=np.uint32).view(np.float32)
        arrayio.write_array(path, ArraySpec("f32", dims), data)
        spec, back = arrayio.read_array(path)
        assert spec.dims == dims
        assert back.tobytes() == data.tobytes()


def test_random_3x4x5_f32_roundtrip(tmp_path):
    data = np.random.default_rng(5).standard_normal((3, 4, 5)).astype(np.float32)
    arrayio.save(tmp_path / "x.cwt", data)
    back = arrayio.load(tmp_path / "x.cwt")
    assert back.shape == (3, 4, 5)
    assert back.tobytes() == data.tobytes()


def test_rewrite_is_byte_identical(tmp_path):
    data = np.random.default_rng(2).random((4, 4)).astype(np.float32)
    arrayio.save(tmp_path / "a.cwt", data)
    arrayio.save(tmp_path / "b.cwt", data)
    assert (tmp_path / "a.cwt").read_bytes() == (tmp_path / "b.cwt").read_bytes()


def test_length_mismatch_rejected(tmp_path):
    with pytest.raises(ValueError):
        arrayio.write_array(tmp_path / "m.cwt", ArraySpec("f32", (2, 2)), [1.0, 2.0, 3.0])


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        arrayio.write_array(tmp_path / "missing" / "x.cwt", ArraySpec("u8", (1,)), [0])


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.cwt"
    path.write_bytes(b"XXXX\x01\x01\x01\x01\x00\x00\x00" + b"\x00" * 4)
    with pytest.raises(BadMagicError):
        arrayio.read_array(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.cwt"
    arrayio.save(path, np.zeros((4, 4), np.float32))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedError):
        arrayio.read_array(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "t.cwt"
    path.write_bytes(b"CWT1\x01\x01\x03\x02\x00")
    with pytest.raises(TruncatedError):
        arrayio.read_array(path)


def test_unsupported_version_and_dtype_are_distinct(tmp_path):
    path = tmp_path / "v.cwt"
    arrayio.save(path, np.zeros(2, np.uint8))
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVersionError):
        arrayio.read_array(path)
    blob[4] = 1
    blob[5] = 77
    path.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedDtypeError):
        arrayio.read_array(path)
    errors = {BadMagicError, UnsupportedVersionError, UnsupportedDtypeError, TruncatedError}
    assert len(errors) == 4


# -- manifests -------------------------------------------------------------


def _manifest(n_lab, n_unl, n_test):
    samples = [Sample(f"i{i}.cwt", "labeled", label=f"l{i}.cwt") for i in range(n_lab)]
    samples += [Sample(f"u{i}.cwt", "unlabeled") for i in range(n_unl)]
    samples += [Sample(f"t{i}.cwt", "test", label=f"tl{i}.cwt") for i in range(n_test)]
    return DatasetManifest(name="pancreas-shape", classes=2, samples=samples, seed=7)


def test_manifest_split_counts(tmp_path):
    m = _manifest(3, 57, 20)
    arrayio.save_manifest(m, tmp_path / "m.json")
    back = arrayio.load_manifest(tmp_path / "m.json")
    assert (back.n_labeled, back.n_unlabeled, back.n_test) == (3, 57, 20)
    assert sum(back.counts.values()) == len(back.samples)


def test_empty_manifest(tmp_path):
    m = DatasetManifest(name="empty", classes=2)
    arrayio.save_manifest(m, tmp_path / "m.json")
    back = arrayio.load_manifest(tmp_path / "m.json")
    assert back.counts == {"labeled": 0, "unlabeled": 0, "test": 0}


def test_manifest_json_keys(tmp_path):
    arrayio.save_manifest(_manifest(1, 1, 1), tmp_path / "m.json")
    obj = json.loads((tmp_path / "m.json").read_text())
    assert {"name", "classes", "seed", "samples"} <= set(obj)
    unl = [s for s in obj["samples"] if s["split"] == "unlabeled"][0]
    assert "label" not in unl


def test_malformed_json(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ManifestError):
        arrayio.load_manifest(tmp_path / "m.json")


def test_unlabeled_with_label_rejected(tmp_path):
    obj = {"name": "x", "classes": 2, "seed": 0,
           "samples": [{"image": "a.cwt", "label": "b.cwt", "split": "unlabeled"}]}
    (tmp_path / "m.json").write_text(json.dumps(obj))
    with pytest.raises(ManifestError):
        arrayio.load_manifest(tmp_path / "m.json")


def test_labeled_without_label_rejected():
    with pytest.raises(ManifestError):
        Sample("a.cwt", "labeled")


def test_missing_files_checked_on_access(tmp_path):
    arrayio.save_manifest(_manifest(1, 0, 0), tmp_path / "m.json")
    m = arrayio.load_manifest(tmp_path / "m.json")  # no error yet
    with pytest.raises(FileNotFoundError):
        m.load_image(m.samples[0])


sample_st = st.one_of(
    st.builds(lambda i, l: Sample(i, "labeled", label=l), st.text(min_size=1, max_size=8), st.text(min_size=1, max_size=8)),
    st.builds(lambda i: Sample(i, "unlabeled"), st.text(min_size=1, max_size=8)),
    st.builds(lambda i, l: Sample(i, "test", label=l), st.text(min_size=1, max_size=8), st.text(min_size=1, max_size=8)),
)


@settings(max_examples=200, deadline=None)
@given(
    name=st.text(max_size=12),
    classes=st.integers(2, 8),
    seed=st.one_of(st.none(), st.integers(0, 2**31)),
    samples=st.lists(sample_st, max_size=20),
)
def test_manifest_fuzz_roundtrip(tmp_path_factory, name, classes, seed, samples):
    path = tmp_path_factory.mktemp("man") / "m.json"
    m = DatasetManifest(name=name, classes=classes, samples=samples, seed=seed)
    arrayio.save_manifest(m, path)
    assert arrayio.load_manifest(path) == m
