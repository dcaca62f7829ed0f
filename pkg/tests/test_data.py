import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupled_ensembles.blocks import BasicBlockSpec
from coupled_ensembles.data import (
    DatasetFormatError,
    LabeledImageSet,
    export_logits,
    labels_path,
    load_cifar10,
    load_cifar100,
    load_cifar_dir,
    synthetic_dataset,
    write_cifar10,
    write_cifar100,
)
from coupled_ensembles.ensemble import CoupledEnsemble, CoupledEnsembleConfig, fuse_models, fuse_predict, error_rate
from coupled_ensembles.harness import normalize


def nearest_mean_error(train, test):
    X = train.images.reshape(len(train), -1).astype(np.float64)
    Y = test.images.reshape(len(test), -1).astype(np.float64)
    means = np.stack([X[train.labels == c].mean(axis=0) for c in range(train.classes)])
    dist = ((Y[:, None, :] - means[None]) ** 2).sum(axis=-1)
    return float(np.mean(np.argmin(dist, axis=1) != test.labels))


def test_five_record_file(tmp_path):
    rng = np.random.default_rng(0)
    labels = [3, 0, 9, 1, 1]
    records = []
    pixels = rng.integers(0, 256, size=(5, 3072), dtype=np.uint8)
    for lbl, px in zip(labels, pixels):
        records.append(bytes([lbl]) + px.tobytes())
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(b"".join(records))
    assert path.stat().st_size == 5 * 3073
    ds = load_cifar10(path)
    assert ds.images.shape == (5, 3, 32, 32) and ds.images.dtype == np.uint8
    assert ds.labels.tolist() == labels and ds.split == "train"
    # channel-major, row-major within channel
    assert ds.images[2, 1, 0, 5] == pixels[2, 1024 + 5]
    assert ds.images[4, 2, 31, 31] == pixels[4, 3071]


def test_cifar100_uses_fine_label(tmp_path):
    px = np.zeros(3072, np.uint8)
    (tmp_path / "test.bin").write_bytes(bytes([7, 42]) + px.tobytes() + bytes([19, 99]) + px.tobytes())
    ds = load_cifar100(tmp_path / "test.bin")
    assert ds.labels.tolist() == [42, 99] and ds.classes == 100 and ds.split == "test"


def test_empty_file(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    with pytest.raises(DatasetFormatError):
        load_cifar10(tmp_path / "e.bin")


def test_bad_size(tmp_path):
    (tmp_path / "b.bin").write_bytes(b"\x00" * 3074)
    with pytest.raises(DatasetFormatError, match="multiple"):
        load_cifar10(tmp_path / "b.bin")


def test_label_255_rejected(tmp_path):
    (tmp_path / "l.bin").write_bytes(bytes([255]) + b"\x00" * 3072)
    with pytest.raises(DatasetFormatError, match="label 255"):
        load_cifar10(tmp_path / "l.bin")


def test_labeled_image_set_validation():
    with pytest.raises(DatasetFormatError):
        LabeledImageSet(np.zeros((0, 3, 2, 2), np.uint8), [], 2)
    with pytest.raises(DatasetFormatError):
        LabeledImageSet(np.zeros((2, 3, 2, 2), np.uint8), [0, 2], 2)
    with pytest.raises(DatasetFormatError):
        LabeledImageSet(np.zeros((2, 2, 2), np.uint8), [0, 1], 2)


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
def test_writer_reader_round_trip(tmp_path_factory, n, seed, hundred):
    rng = np.random.default_rng(seed)
    classes = 100 if hundred else 10
    ds = LabeledImageSet(rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8), rng.integers(0, classes, n), classes)
    path = tmp_path_factory.mktemp("cifar") / "train.bin"
    (write_cifar100 if hundred else write_cifar10)(path, ds)
    back = (load_cifar100 if hundred else load_cifar10)(path)
    assert back.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_load_cifar_dir(tmp_path):
    rng = np.random.default_rng(1)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        ds = LabeledImageSet(rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8), [1, 2], 10)
        write_cifar10(tmp_path / name, ds)
    tr, te = load_cifar_dir(tmp_path, "cifar10")
    assert len(tr) == 10 and len(te) == 2 and te.split == "test"


def test_synthetic_determinism():
    a = synthetic_dataset(5, 40, 4, 12, "medium")
    b = synthetic_dataset(5, 40, 4, 12, "medium")
    c = synthetic_dataset(6, 40, 4, 12, "medium")
    assert a[0].images.tobytes() == b[0].images.tobytes() and a[1].labels.tolist() == b[1].labels.tolist()
    assert a[0].images.tobytes() != c[0].images.tobytes()


def test_synthetic_balanced():
    tr, te = synthetic_dataset(0, 100, 4)
    assert np.bincount(tr.labels).tolist() == [25, 25, 25, 25]
    assert tr.images.dtype == np.uint8 and tr.images.shape == (100, 3, 16, 16)


@pytest.mark.parametrize("seed", range(5))
def test_easy_nearest_mean_oracle(seed):
    tr, te = synthetic_dataset(seed, 100, 2, 16, "easy")
    assert nearest_mean_error(tr, te) < 0.10


def test_difficulty_ordering():
    errs = [nearest_mean_error(*synthetic_dataset(0, 400, 10, 16, d)) for d in ("easy", "medium", "hard")]
    assert errs[0] <= errs[1] <= errs[2] and errs[2] > 0


def test_synthetic_argument_errors():
    with pytest.raises(ValueError):
        synthetic_dataset(0, 3, 4)
    with pytest.raises(ValueError):
        synthetic_dataset(0, 10, 2, difficulty="trivial")


# ---------------------------------------------------------------- logit export


def model_and_data(e=1, classes=3):
    tr, te = synthetic_dataset(0, 12, classes, 8, "easy", n_test=4)
    _, te_n, _ = normalize(tr, te)
    spec = BasicBlockSpec("plain_cnn", 10, 2, classes, (3, 8, 8))
    return CoupledEnsemble.build(CoupledEnsembleConfig.homogeneous(spec, e), seed=0), te_n


def test_export_size(tmp_path):
    model, te = model_and_data(e=1, classes=3)
    export_logits(model, te, tmp_path / "x.celg")
    assert (tmp_path / "x.celg").stat().st_size == 20 + 4 * 1 * 3 * 8
    assert labels_path(tmp_path / "x.celg").stat().st_size == 4 * 4


def test_export_is_deterministic(tmp_path):
    model, te = model_and_data(e=2)
    export_logits(model, te, tmp_path / "a")
    export_logits(model, te, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_export_then_fuse_matches_memory(tmp_path):
    model, te = model_and_data(e=2)
    scores = export_logits(model, te, tmp_path / "a")
    for mode in ("fc", "sm"):
        fused = fuse_models([tmp_path / "a"], labels_path(tmp_path / "a"), mode)
        assert fused.error == error_rate(fuse_predict(scores, mode).labels, te.labels)


def test_export_class_mismatch(tmp_path):
    model, te = model_and_data(classes=3)
    wrong = LabeledImageSet(te.images, te.labels, 5, "test")
    with pytest.raises(ValueError, match="classes"):
        export_logits(model, wrong, tmp_path / "x")
