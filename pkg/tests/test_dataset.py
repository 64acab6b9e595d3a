import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octoutcome.dataset import (ClinicalFeatures, DatasetManifest, ManifestError, PatientRecord, derive_label,
                                duplicate_per_oct, manifest_from_csv, manifest_to_csv, read_manifest,
                                split_dataset, split_sizes, write_manifest)


def record(pid="P0", baseline=50, va6=65, split=None, age=66.5, duration=3.0, edge=True, pseudo=False):
    return PatientRecord(pid, f"images/{pid}_h.png", f"images/{pid}_v.png",
                         ClinicalFeatures(age, duration, edge, pseudo, baseline), va6, split)


def test_label_threshold_is_a_gain_of_fifteen_letters():
    assert derive_label(record(baseline=50, va6=65)) is True
    assert derive_label(record(baseline=50, va6=64)) is False
    # group means of the training cohort: 66.01 - 50.43 = 15.58 letters
    assert 66.01 - 50.43 >= 15


def test_split_sizes():
    assert split_sizes(121) == (83, 21, 17)
    assert split_sizes(10) == (7, 2, 1)
    with pytest.raises(ValueError):
        split_sizes(2)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(3, 400))
def test_split_sizes_cover_every_patient(n):
    train, val, test = split_sizes(n)
    assert train + val + test == n and min(train, val, test) >= 0


def test_split_assignment_is_seeded_and_complete():
    recs = [record(f"P{i}") for i in range(121)]
    a = split_dataset(recs, seed=3)
    b = split_dataset(recs, seed=3)
    c = split_dataset(recs, seed=4)
    assert [r.split for r in a] == [r.split for r in b]
    assert [r.split for r in a] != [r.split for r in c]
    counts = {s: sum(r.split == s for r in a) for s in ("train", "val", "test")}
    assert counts == {"train": 83, "val": 21, "test": 17}
    assert sorted(r.patient_id for r in a) == sorted(r.patient_id for r in recs)


def test_per_oct_duplication():
    recs = [record(f"P{i}", va6=50 + 20 * (i % 2)) for i in range(83)]
    samples = duplicate_per_oct(recs)
    assert len(samples) == 166
    by_id = {r.patient_id: r for r in recs}
    assert all(s.label == by_id[s.patient_id].label for s in samples)
    assert {s.view for s in samples} == {"h", "v"}
    assert duplicate_per_oct([]) == []


def test_invalid_records_are_rejected():
    with pytest.raises(ValueError):
        record(va6=101)
    with pytest.raises(ValueError):
        record(split="holdout")
    with pytest.raises(ValueError):
        ClinicalFeatures(-1.0, 1.0, False, False, 40)
    with pytest.raises(ManifestError):
        DatasetManifest([record("A"), record("A")])


clinical = st.builds(
    ClinicalFeatures,
    age=st.floats(18, 100, allow_nan=False), mh_duration=st.floats(0, 48, allow_nan=False),
    elevated_edge=st.booleans(), pseudophakic=st.booleans(), baseline_va=st.integers(0, 100))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(clinical, st.integers(0, 100), st.sampled_from(["train", "val", "test"])),
                min_size=0, max_size=8))
def test_manifest_csv_round_trip_is_lossless(rows):
    recs = [PatientRecord(f"P{i:03d}", f"images/P{i:03d}_h.png", f"images/P{i:03d}_v.png", c, va, s)
            for i, (c, va, s) in enumerate(rows)]
    m = DatasetManifest(recs)
    back = manifest_from_csv(manifest_to_csv(m))
    assert back.records == recs


def test_manifest_file_round_trip_and_provenance(tmp_path):
    m = DatasetManifest([record(f"P{i}", split="train") for i in range(3)], provenance="synthetic:abc")
    path = tmp_path / "manifest.csv"
    write_manifest(m, str(path))
    (tmp_path / "provenance.txt").write_text("synthetic:abc\n")
    back = read_manifest(str(path))
    assert back.records == m.records
    assert back.provenance == "synthetic:abc"
    assert back.image_path("images/P0_h.png") == os.path.join(str(tmp_path), "images/P0_h.png")
    assert path.read_text().splitlines()[0] == ("patient_id,oct_h_path,oct_v_path,age,mh_duration,"
                                                "elevated_edge,pseudophakic,baseline_va,va_6mo,split")


@pytest.mark.parametrize("bad", [
    "patient_id,oct_h_path\nP0,a.png\n",
    "patient_id,oct_h_path,oct_v_path,age,mh_duration,elevated_edge,pseudophakic,baseline_va,va_6mo,split\n"
    "P0,a.png,b.png,sixty,1,0,0,50,60,train\n",
    "patient_id,oct_h_path,oct_v_path,age,mh_duration,elevated_edge,pseudophakic,baseline_va,va_6mo,split\n"
    "P0,a.png,b.png,60,1,2,0,50,60,train\n",
])
def test_malformed_manifest_is_rejected(bad):
    with pytest.raises(ManifestError):
        manifest_from_csv(bad)
