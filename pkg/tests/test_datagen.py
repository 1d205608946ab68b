import struct
import warnings

import numpy as np
import pytest

from lml_agcn.datagen import (
    MAGIC,
    DataFormatError,
    LabelSpace,
    SyntheticConfig,
    from_bytes,
    generate_synthetic,
    load_dataset,
    project_partial,
    save_dataset,
    to_bytes,
)

SMALL = SyntheticConfig(num_tasks=3, classes_per_task=2, feature_dim=8, train_per_task=30, test_per_task=10, seed=7)


def test_same_seed_same_bytes():
    a = to_bytes(generate_synthetic(SMALL))
    b = to_bytes(generate_synthetic(SMALL))
    assert a == b
    assert to_bytes(generate_synthetic(SyntheticConfig(**{**SMALL.__dict__, "seed": 8}))) != a


def test_label_space_bookkeeping():
    space = LabelSpace.contiguous([4, 4, 4])
    assert space.num_classes == 12
    assert space.task_range(1) == (4, 8)
    assert [space.seen_count(t) for t in range(3)] == [4, 8, 12]
    sets = [set(c) for c in space.task_classes]
    assert all(not (sets[i] & sets[j]) for i in range(3) for j in range(i + 1, 3))


def test_every_example_has_a_positive_in_its_own_task():
    stream = generate_synthetic(SMALL)
    for task in stream.tasks:
        lo, hi = stream.labels.task_range(task.index)
        assert np.all(task.train_labels[:, lo:hi].sum(axis=1) >= 1)
        assert np.all(task.test_labels[:, lo:hi].sum(axis=1) >= 1)


def test_zero_cooccurrence_gives_independent_out_of_task_labels():
    cfg = SyntheticConfig(num_tasks=2, classes_per_task=4, feature_dim=8, train_per_task=10_000, test_per_task=1, cooccurrence_strength=0.0, seed=3)
    stream = generate_synthetic(cfg)
    y = stream.tasks[0].train_labels.astype(np.float64)
    c = np.corrcoef(y.T)
    # classes 4..7 are never anchors for task 0, so each is an independent coin
    worst = max(abs(c[i, j]) for i in range(8) for j in range(4, 8) if i != j)
    assert worst < 0.05
    assert abs(y[:, 4:].mean() - 0.05) < 0.01


def test_noise_free_single_label_feature_is_the_prototype():
    cfg = SyntheticConfig(num_tasks=2, classes_per_task=3, feature_dim=16, train_per_task=200, test_per_task=1, cooccurrence_strength=0.0, noise_std=0.0, seed=1)
    stream, truth = generate_synthetic(cfg, return_truth=True)
    task = stream.tasks[1]
    single = np.flatnonzero(task.train_labels.sum(axis=1) == 1)
    assert len(single) > 0
    for i in single:
        k = int(np.flatnonzero(task.train_labels[i])[0])
        assert np.array_equal(task.train_features[i], truth.prototypes[k].astype(np.float32))
    assert np.allclose(np.linalg.norm(truth.prototypes, axis=1), 1.0)


def test_affinity_is_symmetric_with_empty_diagonal():
    _, truth = generate_synthetic(SMALL, return_truth=True)
    assert np.array_equal(truth.affinity, truth.affinity.T)
    assert np.all(np.diag(truth.affinity) == 0)


def test_crowded_prototypes_warn():
    with pytest.warns(UserWarning, match="crowd"):
        generate_synthetic(SyntheticConfig(num_tasks=3, classes_per_task=4, feature_dim=4, train_per_task=2, test_per_task=2))


@pytest.mark.parametrize("field,value", [("num_tasks", 0), ("train_per_task", 0), ("cooccurrence_strength", 1.5), ("noise_std", -1.0)])
def test_invalid_config_rejected(field, value):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(**{**SMALL.__dict__, field: value}))


def test_round_trip(tmp_path):
    stream = generate_synthetic(SMALL)
    digest = save_dataset(stream, tmp_path / "d.lmld")
    back = load_dataset(tmp_path / "d.lmld")
    assert back == stream
    assert back.checksum() == digest
    for a, b in zip(stream.tasks, back.tasks):
        assert np.array_equal(a.train_labels, b.train_labels)
        assert np.array_equal(a.test_features, b.test_features)


def test_wrong_magic():
    data = bytearray(to_bytes(generate_synthetic(SMALL)))
    data[:4] = b"XXXX"
    with pytest.raises(DataFormatError, match="magic") as info:
        from_bytes(bytes(data))
    assert info.value.offset == 0


def test_truncated_file_reports_offset():
    data = to_bytes(generate_synthetic(SMALL))
    with pytest.raises(DataFormatError) as info:
        from_bytes(data[:-3])
    assert info.value.offset is not None and info.value.offset > 0


def _one_record_file(n_classes: int, label_bits: int) -> bytes:
    head = MAGIC + struct.pack("<IIII", 1, n_classes, 2, 1) + struct.pack("<II", 0, n_classes) + struct.pack("<Q", 1)
    rec = struct.pack("<BI", 0, 0) + np.zeros(2, "<f4").tobytes() + bytes([label_bits])
    return head + rec


def test_label_row_wider_than_header():
    assert len(from_bytes(_one_record_file(3, 0b0000_0101)).tasks[0].train_labels) == 1
    # a fourth label bit set in a 3-class file
    with pytest.raises(DataFormatError, match="record 0"):
        from_bytes(_one_record_file(3, 0b0000_1001))


def test_projection_examples():
    space = LabelSpace.contiguous([1, 1], names=["cat", "dog"])
    assert project_partial(np.array([1, 1]), space, 1).tolist() == [1]
    assert project_partial(np.array([1, 0]), space, 1).tolist() == [0]


def test_projection_partition_recovers_full_labels():
    stream = generate_synthetic(SMALL)
    for task in stream.tasks:
        parts = [project_partial(task.train_labels, stream.labels, t) for t in range(stream.num_tasks)]
        assert np.array_equal(np.concatenate(parts, axis=1), task.train_labels)


def test_train_view_is_subset_of_full_labels():
    stream = generate_synthetic(SMALL)
    for task in stream.tasks:
        view = task.train_view()
        lo, hi = stream.labels.task_range(task.index)
        assert view.task_labels.shape[1] == hi - lo
        assert np.all(view.task_labels <= task.train_labels[:, lo:hi])
        assert np.array_equal(view.task_labels, task.train_labels[:, lo:hi])


def test_no_warning_for_default_sized_stream():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        generate_synthetic(SyntheticConfig(train_per_task=5, test_per_task=5))
