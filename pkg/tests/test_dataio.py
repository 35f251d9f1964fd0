"""Dataset file format and loader validation tests."""

import json
import struct

import numpy as np
import pytest

from icusurv.dataio import (
    Dataset,
    DatasetError,
    load_dataset,
    read_matrix,
    read_vector,
    save_dataset,
    write_matrix,
    write_vector,
)
from icusurv.fusion import FeatureBundle, FeatureCohort
from icusurv.survival import Cohort, SurvivalRecord

HEADER = json.dumps({"kind": "icusurv_dataset", "format_version": 1})


def write_lines(path, *rows):
    path.write_text("\n".join([HEADER, *rows]) + "\n")
    return path


def minimal_row(pid="p0", time=10.0, event=True, **extra):
    row = {
        "patient_id": pid,
        "observed_time_hours": time,
        "event": event,
        "saps": [float(i) for i in range(15)],
    }
    row.update(extra)
    return json.dumps(row)


def small_dataset(n=3, with_text=False, with_tokens=False):
    rng = np.random.default_rng(5)
    records = [SurvivalRecord(f"p{i}", float(10 + i), i % 2 == 0) for i in range(n)]
    bundles = tuple(
        FeatureBundle(
            saps=rng.normal(0, 1, 15),
            text=rng.normal(0, 1, 768) if with_text else None,
        )
        for _ in range(n)
    )
    tokens = (
        {records[0].patient_id: rng.normal(0, 1, (6, 768))} if with_tokens else {}
    )
    return Dataset(
        features=FeatureCohort(cohort=Cohort(records), bundles=bundles), tokens=tokens
    )


def assert_datasets_equal(a: Dataset, b: Dataset):
    assert a.features.cohort.records == b.features.cohort.records
    assert len(a.features.bundles) == len(b.features.bundles)
    for ba, bb in zip(a.features.bundles, b.features.bundles):
        for name in ("saps", "labels", "text", "image", "gcn"):
            va, vb = ba.get(name), bb.get(name)
            assert (va is None) == (vb is None)
            if va is not None:
                np.testing.assert_array_equal(va, vb)
    assert sorted(a.tokens) == sorted(b.tokens)
    for pid in a.tokens:
        np.testing.assert_array_equal(a.tokens[pid], b.tokens[pid])


def test_minimal_two_patient_file(tmp_path):
    path = write_lines(
        tmp_path / "ds.jsonl", minimal_row("a", 5.0, True), minimal_row("b", 7.0, False)
    )
    ds = load_dataset(path)
    assert ds.n == 2
    assert [r.patient_id for r in ds.features.cohort.records] == ["a", "b"]
    assert ds.features.cohort.records[1].event is False
    assert ds.tokens == {}


def test_roundtrip_is_identity_after_one_cycle(tmp_path):
    first = small_dataset(n=4, with_text=True, with_tokens=True)
    path_a = tmp_path / "a.jsonl"
    path_b = tmp_path / "b.jsonl"
    save_dataset(first, path_a)
    loaded = load_dataset(path_a)
    save_dataset(loaded, path_b)
    again = load_dataset(path_b)
    assert_datasets_equal(loaded, again)
    assert path_a.read_text().replace("a_vectors", "b_vectors") == path_b.read_text()


def test_sidecars_used_for_long_vectors_only(tmp_path):
    ds = small_dataset(n=2, with_text=True)
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()[1:]]
    assert isinstance(rows[0]["saps"], list)
    assert rows[0]["text"] == "ds_vectors/p0.text.bin"
    assert (tmp_path / "ds_vectors" / "p0.text.bin").is_file()


def test_wrong_text_length_names_line_and_field(tmp_path):
    bad = minimal_row("p1", text=[0.0] * 767)
    path = write_lines(tmp_path / "ds.jsonl", minimal_row("p0"), bad)
    with pytest.raises(DatasetError, match=r"line 3.*text.*768"):
        load_dataset(path)


def test_duplicate_patient_id_rejected(tmp_path):
    path = write_lines(tmp_path / "ds.jsonl", minimal_row("p0"), minimal_row("p0"))
    with pytest.raises(DatasetError, match=r"line 3.*duplicate.*p0"):
        load_dataset(path)


def test_invalid_json_names_line(tmp_path):
    path = write_lines(tmp_path / "ds.jsonl", minimal_row("p0"), "{not json")
    with pytest.raises(DatasetError, match="line 3"):
        load_dataset(path)


def test_missing_required_fields(tmp_path):
    row = json.dumps({"patient_id": "p0", "event": True, "saps": [0.0] * 15})
    path = write_lines(tmp_path / "ds.jsonl", row)
    with pytest.raises(DatasetError, match="observed_time_hours"):
        load_dataset(path)
    row = json.dumps({"patient_id": "p0", "observed_time_hours": 1.0, "event": True})
    path = write_lines(tmp_path / "ds.jsonl", row)
    with pytest.raises(DatasetError, match="saps"):
        load_dataset(path)


def test_event_must_be_boolean(tmp_path):
    path = write_lines(tmp_path / "ds.jsonl", minimal_row().replace("true", "1"))
    with pytest.raises(DatasetError, match="event"):
        load_dataset(path)


def test_negative_time_names_line(tmp_path):
    path = write_lines(tmp_path / "ds.jsonl", minimal_row("p0", time=-1.0))
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(path)


def test_unknown_fields_rejected(tmp_path):
    path = write_lines(tmp_path / "ds.jsonl", minimal_row("p0", extra_field=1))
    with pytest.raises(DatasetError, match="extra_field"):
        load_dataset(path)


def test_header_validation(tmp_path):
    path = tmp_path / "ds.jsonl"
    path.write_text(json.dumps({"kind": "something_else"}) + "\n" + minimal_row() + "\n")
    with pytest.raises(DatasetError, match="header"):
        load_dataset(path)
    path.write_text(
        json.dumps({"kind": "icusurv_dataset", "format_version": 9}) + "\n"
    )
    with pytest.raises(DatasetError, match="format_version"):
        load_dataset(path)
    path.write_text("")
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(path)
    path.write_text(HEADER + "\n")
    with pytest.raises(DatasetError, match="no patient rows"):
        load_dataset(path)


def test_missing_sidecar_named(tmp_path):
    path = write_lines(tmp_path / "ds.jsonl", minimal_row("p0", text="gone.bin"))
    with pytest.raises(DatasetError, match=r"line 2.*gone\.bin"):
        load_dataset(path)


def test_vector_sidecar_byte_layout(tmp_path):
    path = tmp_path / "v.bin"
    write_vector(path, [1.5, -2.0, 0.25])
    data = path.read_bytes()
    assert struct.unpack("<I", data[:4]) == (3,)
    assert struct.unpack("<3f", data[4:]) == (1.5, -2.0, 0.25)
    np.testing.assert_array_equal(read_vector(path), [1.5, -2.0, 0.25])


def test_vector_sidecar_corruption_detected(tmp_path):
    path = tmp_path / "v.bin"
    path.write_bytes(struct.pack("<I", 5) + struct.pack("<3f", 1, 2, 3))
    with pytest.raises(DatasetError, match="declares 5"):
        read_vector(path)
    path.write_bytes(b"\x01")
    with pytest.raises(DatasetError, match="too short"):
        read_vector(path)


def test_matrix_sidecar_roundtrip(tmp_path):
    path = tmp_path / "m.bin"
    mat = np.arange(12, dtype=float).reshape(3, 4)
    write_matrix(path, mat)
    out = read_matrix(path)
    np.testing.assert_array_equal(out, mat)
    path.write_bytes(struct.pack("<II", 2, 9) + b"\x00" * 8)
    with pytest.raises(DatasetError, match="declares 2x9"):
        read_matrix(path)
    with pytest.raises(DatasetError, match="2-D"):
        write_matrix(tmp_path / "bad.bin", np.zeros(3))


def test_tokens_roundtrip_and_column_check(tmp_path):
    ds = small_dataset(n=2, with_tokens=True)
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    loaded = load_dataset(path)
    assert set(loaded.tokens) == {"p0"}
    assert loaded.tokens["p0"].shape == (6, 768)
    bad = tmp_path / "narrow.bin"
    write_matrix(bad, np.zeros((4, 100)))
    path2 = write_lines(tmp_path / "ds2.jsonl", minimal_row("p0", tokens="narrow.bin"))
    with pytest.raises(DatasetError, match="768 columns"):
        load_dataset(path2)


def test_unsafe_patient_id_rejected_on_save(tmp_path):
    records = [SurvivalRecord("a/b", 1.0, True)]
    bundles = (FeatureBundle(saps=np.zeros(15)),)
    ds = Dataset(features=FeatureCohort(cohort=Cohort(records), bundles=bundles))
    with pytest.raises(DatasetError, match="filesystem-safe"):
        save_dataset(ds, tmp_path / "ds.jsonl")


def test_load_preserves_row_order(tmp_path):
    rows = [minimal_row(f"p{i}", time=float(i + 1)) for i in (3, 1, 2, 0)]
    path = write_lines(tmp_path / "ds.jsonl", *rows)
    ds = load_dataset(path)
    assert [r.patient_id for r in ds.features.cohort.records] == ["p3", "p1", "p2", "p0"]
