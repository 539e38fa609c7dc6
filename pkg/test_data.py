#!/usr/bin/env python3
"""Tests for the synthetic generator, the MSPM format and CSV import."""

import numpy as np
import pytest

from data import (
    UNLABELED,
    DatasetFormatError,
    EmbeddingDataset,
    MspmHeader,
    apply_split,
    decode_dataset,
    draw_synthetic,
    encode_dataset,
    generate_synthetic,
    load_dataset,
    read_dataset,
    write_dataset,
)
from evaluation import split_for_synthetic
from models import SyntheticSpec
from numerics import ContractViolation


def test_generator_is_deterministic():
    spec = SyntheticSpec(samples_per_subcluster=5)
    a_src, a_tgt = generate_synthetic(spec)
    b_src, b_tgt = generate_synthetic(spec)
    np.testing.assert_array_equal(a_src.vectors, b_src.vectors)
    np.testing.assert_array_equal(a_tgt.vectors, b_tgt.vectors)
    other, _ = generate_synthetic(spec.model_copy(update={"seed": 1}))
    assert not np.array_equal(a_src.vectors, other.vectors)


def test_generator_class_layout():
    spec = SyntheticSpec(samples_per_subcluster=4)
    draw = draw_synthetic(spec)
    assert set(np.unique(draw.source.labels)) == set(range(8))
    assert set(np.unique(draw.target.labels)) == set(range(6)) | {8, 9, 10}
    assert draw.source.n == 8 * 3 * 4
    assert draw.stats.n_subclusters == 11 * 3
    assert draw.stats.self_check_passed
    assert draw.stats.min_mean_distance >= draw.stats.required_min_distance
    assert np.linalg.norm(draw.shift) == pytest.approx(spec.shift_scale)
    # sub-cluster ids nest inside their class
    np.testing.assert_array_equal(draw.source.subcluster_ids // 3, draw.source.labels)


def test_generator_target_is_shifted_source():
    spec = SyntheticSpec(samples_per_subcluster=200, noise_sigma=0.1)
    draw = draw_synthetic(spec)
    sub = 0
    src_mean = draw.source.vectors[draw.source.subcluster_ids == sub].mean(axis=0)
    tgt_mean = draw.target.vectors[draw.target.subcluster_ids == sub].mean(axis=0)
    np.testing.assert_allclose(tgt_mean - src_mean, draw.shift, atol=0.05)


def test_generator_single_subcluster_is_noted():
    draw = draw_synthetic(SyntheticSpec(subclusters_per_class=1, samples_per_subcluster=3))
    assert any("no sub-structure" in note for note in draw.stats.notes)


def test_generator_flags_crowded_means():
    draw = draw_synthetic(SyntheticSpec(separation=0.01, noise_sigma=1.0, samples_per_subcluster=2))
    assert not draw.stats.self_check_passed


def test_mspm_round_trip_is_float32_exact(tmp_path):
    source, _ = generate_synthetic(SyntheticSpec(samples_per_subcluster=3))
    path = write_dataset(source, tmp_path / "source.mspm")
    back = read_dataset(path)
    np.testing.assert_array_equal(back.vectors, source.vectors.astype(np.float32))
    np.testing.assert_array_equal(back.labels, source.labels)
    np.testing.assert_array_equal(back.subcluster_ids, source.subcluster_ids)
    assert back.domain == "source"
    assert encode_dataset(back) == path.read_bytes()


def test_mspm_header_layout():
    ds = EmbeddingDataset(np.ones((2, 3)), [UNLABELED, UNLABELED], "target")
    data = encode_dataset(ds)
    assert data[:4] == b"MSPM"
    assert len(data) == MspmHeader.SIZE + 2 * 3 * 4 + 2 * 4
    assert data[16] == 1 and data[17] == 0


def test_mspm_empty_dataset():
    ds = EmbeddingDataset(np.zeros((0, 4)), np.zeros(0), "source")
    back = decode_dataset(encode_dataset(ds))
    assert back.n == 0 and back.dim == 4


def test_mspm_truncation_reports_offset():
    ds = EmbeddingDataset(np.ones((4, 2)), [0, 1, 0, 1], "source")
    data = encode_dataset(ds)
    with pytest.raises(DatasetFormatError) as info:
        decode_dataset(data[:-3])
    assert info.value.offset == len(data) - 3
    with pytest.raises(DatasetFormatError) as info:
        decode_dataset(data[:10])
    assert info.value.offset == 10


def test_mspm_rejects_bad_magic_and_flags():
    data = bytearray(encode_dataset(EmbeddingDataset(np.ones((1, 1)), [0], "source")))
    with pytest.raises(DatasetFormatError) as info:
        decode_dataset(b"XXXX" + bytes(data[4:]))
    assert info.value.offset == 0
    data[16] = 7
    with pytest.raises(DatasetFormatError) as info:
        decode_dataset(bytes(data))
    assert info.value.offset == 16


def test_csv_import(tmp_path):
    path = tmp_path / "target.csv"
    path.write_text("label,subcluster,f1,f0\n-1,0,0.5,1.5\n2,1,2.0,-1.0\n")
    ds = load_dataset(path, "target")
    np.testing.assert_allclose(ds.vectors, [[1.5, 0.5], [-1.0, 2.0]])
    assert list(ds.labels) == [-1, 2]
    assert list(ds.subcluster_ids) == [0, 1]


def test_csv_import_rejects_gapped_features(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,f0,f2\n0,1.0,2.0\n")
    with pytest.raises(ContractViolation):
        load_dataset(path, "source")


def test_source_must_be_labeled():
    with pytest.raises(ContractViolation):
        EmbeddingDataset(np.ones((1, 2)), [UNLABELED], "source")


def test_apply_split_hides_target_labels():
    spec = SyntheticSpec(samples_per_subcluster=2)
    source, target = generate_synthetic(spec)
    split = split_for_synthetic(spec, "OSDA")
    src = apply_split(source, split, "source")
    tgt = apply_split(target, split, "target")
    assert set(np.unique(src.labels)) == set(range(6))
    assert np.all(tgt.labels == UNLABELED)
    assert set(np.unique(tgt.hidden_labels)) == set(range(6)) | {8, 9, 10}
    np.testing.assert_array_equal(tgt.truth, tgt.hidden_labels)
    with pytest.raises(ContractViolation):
        apply_split(source, split, "validation")
