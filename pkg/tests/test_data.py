import numpy as np
import pytest

from mergelab.data import (
    Dataset,
    TaskSpec,
    class_style,
    default_task_suite,
    generate_task,
    load_dataset,
    load_vocabulary,
    make_vocabulary,
    save_dataset,
    save_vocabulary,
)
from mergelab.errors import ContractError, FormatError
from mergelab.model import text_embed


def small_spec(seed=11):
    return TaskSpec(
        name="tiny",
        classes=["lamp", "kite", "drum"],
        seed=seed,
        train_per_class=6,
        test_per_class=4,
        dev_count=5,
    )


def test_identical_spec_identical_bytes():
    a = generate_task(small_spec())
    b = generate_task(small_spec())
    for da, db in zip(a, b):
        assert da.images.tobytes() == db.images.tobytes()
        assert np.array_equal(da.labels, db.labels)


def test_splits_pairwise_disjoint():
    train, test, dev = generate_task(small_spec())
    seen = {ds.split: {img.tobytes() for img in ds.images} for ds in (train, test, dev)}
    assert not (seen["train"] & seen["test"])
    assert not (seen["train"] & seen["dev"])
    assert not (seen["test"] & seen["dev"])


def test_pixels_in_unit_range():
    for ds in generate_task(small_spec()):
        assert ds.images.min() >= 0.0
        assert ds.images.max() <= 1.0


def test_dev_split_size_exact():
    _, _, dev = generate_task(small_spec())
    assert len(dev) == 5


def test_spec_validation():
    with pytest.raises(ContractError):
        TaskSpec(name="x", classes=["only"], seed=0)
    with pytest.raises(ContractError):
        TaskSpec(name="x", classes=["a", "a"], seed=0)
    with pytest.raises(ContractError):
        TaskSpec(name="x", classes=["a", "b"], seed=0, train_per_class=0)


def test_shared_class_name_shares_style_and_text_vector():
    # two specs containing the same class name: same pattern family and,
    # по the frozen text map, the same text vector
    s1 = TaskSpec(name="one", classes=["stop sign", "lamp"], seed=1, train_per_class=2, test_per_class=2, dev_count=2)
    s2 = TaskSpec(name="two", classes=["stop sign", "kite"], seed=99, train_per_class=2, test_per_class=2, dev_count=2)
    assert class_style("stop sign") == class_style("stop sign")
    assert np.array_equal(text_embed("stop sign", 7), text_embed("stop sign", 7))
    # different task seeds draw different samples of the same family
    a = generate_task(s1)[0]
    b = generate_task(s2)[0]
    assert a.images.shape == b.images.shape
    assert a.images.tobytes() != b.images.tobytes()


def test_default_suite_structure():
    suite = default_task_suite()
    assert len(suite) == 6
    assert all(len(s.classes) == 10 for s in suite)
    names = [c for s in suite for c in s.classes]
    assert "stop sign" in suite[1].classes
    assert len(set(names)) == len(names)  # default suite has no accidental overlap


def test_family_task_is_fine_grained():
    suite = default_task_suite()
    fam = suite[1].classes
    assert all(c.endswith("sign") for c in fam)
    vecs = np.stack([text_embed(c, 7) for c in fam])
    cos = vecs @ vecs.T
    off_diag = cos[np.triu_indices(len(fam), 1)]
    assert off_diag.min() > 0.2  # family names correlate


def test_vocabulary_roundtrip(tmp_path):
    vocab = make_vocabulary(50)
    assert len(vocab) == 50
    assert len(set(vocab)) == 50
    path = tmp_path / "vocab.txt"
    save_vocabulary(path, vocab)
    assert load_vocabulary(path) == vocab


# --- TDST dataset files


def test_dataset_roundtrip(tmp_path):
    train, _, _ = generate_task(small_spec())
    path = tmp_path / "d.tdst"
    save_dataset(path, train)
    loaded = load_dataset(path, split="train")
    assert loaded.data_equal(train)
    # byte-identical when re-saved
    path2 = tmp_path / "d2.tdst"
    save_dataset(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_corrupt_magic(tmp_path):
    train, _, _ = generate_task(small_spec())
    path = tmp_path / "d.tdst"
    save_dataset(path, train)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"JUNK"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_dataset(path)


def test_dataset_truncation_names_lengths(tmp_path):
    train, _, _ = generate_task(small_spec())
    path = tmp_path / "d.tdst"
    save_dataset(path, train)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match=r"expected \d+ more bytes"):
        load_dataset(path)
