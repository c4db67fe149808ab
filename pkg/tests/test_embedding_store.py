import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spa.embedding_store import (
    ReferenceSet,
    check_paired,
    l2_normalize,
    load_embedding_matrix,
    load_labels,
    load_reference_set,
    save_embedding_matrix,
    save_labels,
    save_reference_set,
)
from spa.errors import (
    DimensionMismatch,
    MalformedHeader,
    NonFiniteValue,
    OutOfRangeLabel,
    ParseError,
    SizeMismatch,
    ZeroRow,
)


def _write(tmp_path, header, payload, name="m"):
    h = tmp_path / f"{name}.json"
    h.write_text(json.dumps(header))
    (tmp_path / f"{name}.bin").write_bytes(payload)
    return h


HDR = {"rows": 2, "cols": 3, "dtype": "f32", "byte_order": "little", "layout": "row-major"}


def test_load_shape_and_values(tmp_path):
    vals = [1.0, 2.0, 3.0, 4.0, 5.0, 6.5]
    h = _write(tmp_path, HDR, struct.pack("<6f", *vals))
    m = load_embedding_matrix(h)
    assert m.shape == (2, 3)
    assert m.dtype == np.float64
    np.testing.assert_array_equal(m.ravel(), vals)


def test_explicit_data_path(tmp_path):
    h = tmp_path / "hdr.json"
    h.write_text(json.dumps(HDR))
    data = tmp_path / "payload.raw"
    data.write_bytes(struct.pack("<6f", *range(6)))
    assert load_embedding_matrix(h, data).shape == (2, 3)


def test_size_mismatch(tmp_path):
    h = _write(tmp_path, HDR, b"\x00" * 20)
    with pytest.raises(SizeMismatch):
        load_embedding_matrix(h)


def test_nan_payload(tmp_path):
    payload = struct.pack("<5f", 0, 0, 0, 0, 0) + b"\x00\x00\xc0\x7f"
    h = _write(tmp_path, HDR, payload)
    with pytest.raises(NonFiniteValue):
        load_embedding_matrix(h)


def test_inf_payload(tmp_path):
    h = _write(tmp_path, HDR, struct.pack("<6f", 0, 0, float("inf"), 0, 0, 0))
    with pytest.raises(NonFiniteValue):
        load_embedding_matrix(h)


@pytest.mark.parametrize("patch", [
    {"dtype": "f64"}, {"byte_order": "big"}, {"layout": "col-major"}, {"rows": -1}, {"cols": "3"},
    {"rows": True},
])
def test_malformed_header(tmp_path, patch):
    h = _write(tmp_path, {**HDR, **patch}, b"\x00" * 24)
    with pytest.raises(MalformedHeader):
        load_embedding_matrix(h)


def test_missing_key_and_bad_json(tmp_path):
    hdr = dict(HDR)
    del hdr["layout"]
    with pytest.raises(MalformedHeader):
        load_embedding_matrix(_write(tmp_path, hdr, b"\x00" * 24))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    (tmp_path / "bad.bin").write_bytes(b"")
    with pytest.raises(MalformedHeader):
        load_embedding_matrix(bad)


def test_save_load_round_trip(tmp_path, rng):
    m = rng.standard_normal((5, 7))
    save_embedding_matrix(tmp_path / "x.json", m)
    back = load_embedding_matrix(tmp_path / "x.json")
    np.testing.assert_allclose(back, m.astype(np.float32), rtol=0, atol=0)
    hdr = json.loads((tmp_path / "x.json").read_text())
    assert hdr["rows"] == 5 and hdr["cols"] == 7 and hdr["dtype"] == "f32"


def test_normalize_reload_round_trip(tmp_path, rng):
    m = l2_normalize(rng.standard_normal((20, 16)))
    save_embedding_matrix(tmp_path / "n.json", m)
    back = load_embedding_matrix(tmp_path / "n.json")
    assert np.max(np.abs(back - m)) <= 1e-6
    assert np.max(np.abs(l2_normalize(back) - m)) <= 1e-6


def test_labels_basic(tmp_path):
    p = tmp_path / "a.labels.txt"
    p.write_text("0\n0\n1\n")
    np.testing.assert_array_equal(load_labels(p, 2), [0, 0, 1])


def test_labels_out_of_range(tmp_path):
    p = tmp_path / "a.labels.txt"
    p.write_text("0\n5\n")
    with pytest.raises(OutOfRangeLabel):
        load_labels(p, 2)


@pytest.mark.parametrize("text", ["0\nx\n", "1.5\n", "-1\n"])
def test_labels_parse_error(tmp_path, text):
    p = tmp_path / "a.labels.txt"
    p.write_text(text)
    with pytest.raises(ParseError):
        load_labels(p, 3)


def test_empty_labels_fail_when_paired(tmp_path):
    p = tmp_path / "e.labels.txt"
    p.write_text("")
    labels = load_labels(p, 3)
    assert len(labels) == 0
    with pytest.raises(DimensionMismatch):
        check_paired(np.ones((4, 2)), labels)


def test_labels_round_trip(tmp_path):
    save_labels(tmp_path / "l.txt", [3, 1, 4, 1, 5])
    np.testing.assert_array_equal(load_labels(tmp_path / "l.txt", 6), [3, 1, 4, 1, 5])


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([[3.0, 4.0]]), [[0.6, 0.8]])
    u = np.array([[0.6, 0.8], [1.0, 0.0]])
    assert np.max(np.abs(l2_normalize(u) - u)) <= 1e-12
    with pytest.raises(ZeroRow):
        l2_normalize([[1.0, 0.0], [0.0, 0.0]])


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                     elements=st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: abs(v) > 1e-3))


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_normalize_idempotent_and_unit(m):
    n1 = l2_normalize(m)
    assert np.allclose(np.linalg.norm(n1, axis=1), 1.0, atol=1e-6)
    assert np.max(np.abs(l2_normalize(n1) - n1)) <= 1e-12


def test_reference_set_balanced(rng):
    k, shots = 4, 3
    labels = np.repeat(np.arange(k), shots)
    refs = ReferenceSet.from_labels(rng.standard_normal((k * shots, 5)), labels, k)
    assert refs.embeddings.shape[0] == k * shots
    np.testing.assert_array_equal(refs.assoc.sum(axis=0), [shots] * k)
    np.testing.assert_array_equal(refs.assoc.sum(axis=1), 1)
    np.testing.assert_array_equal(refs.labels, labels)


def test_reference_set_rejects_bad_assoc():
    with pytest.raises(DimensionMismatch):
        ReferenceSet(np.ones((2, 3)), np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatch):
        ReferenceSet(np.ones((2, 3)), np.array([[0.5, 0.5], [0.0, 1.0]]))
    with pytest.raises(OutOfRangeLabel):
        ReferenceSet.from_labels(np.ones((2, 3)), [0, 4], 3)


def test_reference_manifest_round_trip(tmp_path, rng):
    labels = np.array([0, 0, 1, 2, 2, 2])
    emb = l2_normalize(rng.standard_normal((6, 8)))
    refs = ReferenceSet.from_labels(emb, labels, 3)
    save_reference_set(tmp_path / "sub" / "refs.json", refs)
    back = load_reference_set(tmp_path / "sub" / "refs.json")
    np.testing.assert_array_equal(back.labels, labels)
    assert np.max(np.abs(back.embeddings - emb)) <= 1e-6
    manifest = json.loads((tmp_path / "sub" / "refs.json").read_text())
    assert manifest["k"] == 3 and len(manifest["phases"]) == 3


def test_reference_manifest_errors(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"k": 2, "phases": [[]]}))
    with pytest.raises(MalformedHeader):
        load_reference_set(tmp_path / "m.json")
    (tmp_path / "m2.json").write_text(json.dumps({"phases": [[], []]}))
    with pytest.raises(MalformedHeader):
        load_reference_set(tmp_path / "m2.json")
