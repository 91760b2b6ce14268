import numpy as np
import pytest

from mergelab.checkpoint import read_tckp, write_tckp
from mergelab.errors import ContractError, FormatError
from mergelab.model import (
    EMBED_DIM,
    ToyClipModel,
    embed_images,
    finetune_clean,
    init_model,
    load_model,
    predict_labels,
    predict_logits,
    save_model,
    text_embed,
)
from mergelab.numerics import Rng


def tiny_model(classes=("left", "right"), seed=0, text_seed=7):
    return init_model(Rng(seed), text_seed=text_seed, classes=classes)


def test_text_embed_unit_norm():
    v = text_embed("stop sign", 11)
    assert abs(np.linalg.norm(v) - 1.0) <= 1e-6


def test_text_embed_deterministic():
    assert np.array_equal(text_embed("lamp", 3), text_embed("lamp", 3))


def test_text_embed_empty_name_rejected():
    with pytest.raises(ContractError):
        text_embed("", 3)


def test_text_embed_random_pairs_nearly_orthogonal():
    # sampling oracle: unrelated names act like random unit vectors in R^64,
    # so |cos| concentrates well below 0.6
    names = [f"probe{i}" for i in range(200)]
    vecs = np.stack([text_embed(n, 5) for n in names])
    worst = 0.0
    for i in range(0, 200, 2):
        worst = max(worst, abs(float(vecs[i] @ vecs[i + 1])))
    assert worst < 0.6


def test_text_embed_shared_word_correlates():
    a = text_embed("stop sign", 7)
    b = text_embed("amber sign", 7)
    c = text_embed("lamp", 7)
    assert float(a @ b) > 0.3
    assert abs(float(a @ c)) < 0.4


def test_predict_logits_hand_dot_product():
    model = tiny_model()
    img = Rng(1).uniform((32, 32, 3))
    emb = embed_images(model, img)[0]
    logits = predict_logits(model, img, ["left", "right"])
    t_left = model.text_vector("left")
    t_right = model.text_vector("right")
    assert logits[0] == pytest.approx(model.tau * float(emb @ t_left), rel=1e-5)
    assert logits[1] == pytest.approx(model.tau * float(emb @ t_right), rel=1e-5)


def test_predict_logits_matching_embedding_hits_tau():
    # if normalize(V(x)) equals T(c) exactly the logit is tau and maximal;
    # build that case by injecting the text vector as the embedding
    model = tiny_model(classes=("a", "b", "c"))
    t = model.text_vector("b")
    others = model.text_matrix(["a", "b", "c"])
    logits = model.tau * (t @ others.T)
    assert logits[1] == pytest.approx(model.tau, rel=1e-5)
    assert np.argmax(logits) == 1


def test_predict_logits_permutation_equivariant():
    model = tiny_model(classes=("a", "b", "c"))
    img = Rng(2).uniform((32, 32, 3))
    fwd = predict_logits(model, img, ["a", "b", "c"])
    rev = predict_logits(model, img, ["c", "a", "b"])
    assert np.allclose(fwd, rev[[1, 2, 0]])


def test_argmax_invariant_to_tau():
    model = tiny_model(classes=("a", "b", "c"))
    imgs = Rng(3).uniform((8, 32, 32, 3))
    base = predict_labels(model, imgs, ["a", "b", "c"])
    import dataclasses

    for tau in (1.0, 17.0, 400.0):
        scaled = dataclasses.replace(model, tau=tau)
        assert np.array_equal(predict_labels(scaled, imgs, ["a", "b", "c"]), base)


def test_embeddings_unit_norm():
    model = tiny_model()
    imgs = Rng(4).uniform((16, 32, 32, 3))
    norms = np.linalg.norm(embed_images(model, imgs), axis=1)
    assert np.abs(norms - 1.0).max() <= 1e-6


class _Mini:
    def __init__(self, images, labels):
        self.images = images
        self.labels = labels

    def __len__(self):
        return len(self.labels)


def _toy_train(seed=0, n=12):
    rng = Rng(seed)
    images = rng.uniform((n, 32, 32, 3))
    labels = np.arange(n) % 2
    return _Mini(images, labels)


def test_finetune_zero_epochs_keeps_weights():
    model = tiny_model()
    out = finetune_clean(model, _toy_train(), ["left", "right"], epochs=0, lr=1e-3, rng=Rng(9))
    for k in model.visual:
        assert np.array_equal(out.visual[k], model.visual[k])


def test_finetune_freezes_text_table():
    model = tiny_model()
    before = {k: v.tobytes() for k, v in model.text_table.items()}
    out = finetune_clean(model, _toy_train(), ["left", "right"], epochs=2, lr=1e-3, rng=Rng(9))
    assert set(out.text_table) == set(before)
    for k, raw in before.items():
        assert out.text_table[k].tobytes() == raw


def test_finetune_bit_reproducible():
    model = tiny_model()
    a = finetune_clean(model, _toy_train(), ["left", "right"], epochs=2, lr=1e-3, rng=Rng(5))
    b = finetune_clean(model, _toy_train(), ["left", "right"], epochs=2, lr=1e-3, rng=Rng(5))
    for k in a.visual:
        assert np.array_equal(a.visual[k], b.visual[k])


def test_finetune_rejects_empty_dataset():
    model = tiny_model()
    empty = _Mini(np.zeros((0, 32, 32, 3), dtype=np.float32), np.zeros(0, dtype=int))
    with pytest.raises(ContractError):
        finetune_clean(model, empty, ["left", "right"], epochs=1, lr=1e-3, rng=Rng(0))


def test_finetune_rejects_out_of_range_labels():
    model = tiny_model()
    bad = _Mini(Rng(0).uniform((4, 32, 32, 3)), np.array([0, 1, 2, 0]))
    with pytest.raises(ContractError):
        finetune_clean(model, bad, ["left", "right"], epochs=1, lr=1e-3, rng=Rng(0))


# --- TCKP checkpoint format


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model(classes=("left", "right"))
    path = tmp_path / "m.tckp"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.tau == model.tau
    assert loaded.text_seed == model.text_seed
    for k in model.visual:
        assert np.array_equal(loaded.visual[k], model.visual[k])
    for k in model.text_table:
        assert np.array_equal(loaded.text_table[k], model.text_table[k])


def test_checkpoint_file_bytes_stable(tmp_path):
    model = tiny_model()
    p1, p2 = tmp_path / "a.tckp", tmp_path / "b.tckp"
    save_model(p1, model)
    save_model(p2, load_model(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_tckp_corrupt_magic(tmp_path):
    path = tmp_path / "m.tckp"
    save_model(path, tiny_model())
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_tckp(path)


def test_tckp_truncation_reports_expected_length(tmp_path):
    path = tmp_path / "m.tckp"
    write_tckp(path, {"w": np.ones((4, 4), dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(FormatError, match="expected .* more bytes"):
        read_tckp(path)


def test_tckp_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "m.tckp"
    write_tckp(path, {"w": np.ones(3, dtype=np.float64)})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        read_tckp(path)


def test_tckp_preserves_entry_order_and_dtype(tmp_path):
    path = tmp_path / "m.tckp"
    entries = {
        "b/two": np.arange(3, dtype=np.float64),
        "a/one": np.ones((2, 2), dtype=np.float32),
    }
    write_tckp(path, entries)
    loaded = read_tckp(path)
    assert list(loaded) == ["b/two", "a/one"]
    assert loaded["b/two"].dtype == np.float64
    assert loaded["a/one"].dtype == np.float32
