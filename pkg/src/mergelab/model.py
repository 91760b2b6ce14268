"""CLIP-like toy model: trainable visual MLP, frozen text table, similarity head.

The visual encoder is an MLP over flattened 32x32x3 images producing a
64-dim embedding, L2-normalized before use. The text side is a frozen
deterministic map from class name to a unit vector: every provider in an
experiment derives the same vector for the same name, which is what makes
merging (and off-task attacks) possible. Classification scores are
tau * <normalize(V(x)), T(c)>.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import OptimState, Var, opt_step
from .checkpoint import read_tckp, write_tckp
from .errors import ContractError, ShapeError
from .numerics import ParamSet, Rng, derive_seed

IMAGE_SHAPE = (32, 32, 3)
INPUT_DIM = int(np.prod(IMAGE_SHAPE))
HIDDEN_DIMS = (256, 128)
EMBED_DIM = 64
DEFAULT_TAU = 100.0

# Weight layout of the visual MLP: flatten -> w0,b0 -> relu -> w1,b1 -> relu
# -> w2,b2 -> l2-normalize.
VISUAL_PARAM_NAMES = ("w0", "b0", "w1", "b1", "w2", "b2")


def text_embed(name: str, text_seed: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Frozen text-encoder stand-in: deterministic unit vector for a name.

    The vector depends only on (name, text_seed), so distinct model
    providers sharing the seed derive byte-identical class vectors. Names
    are embedded compositionally (one component per word plus one for the
    full phrase), so names sharing a word get correlated vectors, the way
    related class names do under a real text encoder.
    """
    if not name:
        raise ContractError("class name must be non-empty")

    def gauss(label: str) -> np.ndarray:
        return Rng(derive_seed(text_seed, label)).normal((dim,), dtype=np.float64)

    v = gauss(f"text:{name}")
    for word in name.split():
        v += gauss(f"word:{word}")
    v /= np.linalg.norm(v)
    return v.astype(np.float32)


def check_class_list(classes) -> list[str]:
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise ContractError("class names must be unique")
    if any(not c for c in classes):
        raise ContractError("class name must be non-empty")
    return classes


@dataclass
class ToyClipModel:
    """Visual ParamSet + frozen text table + logit scale."""

    visual: ParamSet
    text_table: dict[str, np.ndarray]
    tau: float = DEFAULT_TAU
    text_seed: int = 0

    def text_vector(self, name: str) -> np.ndarray:
        vec = self.text_table.get(name)
        if vec is None:
            # Names outside the frozen table are embedded on the fly; the
            # table itself is never mutated after construction.
            vec = text_embed(name, self.text_seed)
        return vec

    def text_matrix(self, classes) -> np.ndarray:
        return np.stack([self.text_vector(c) for c in classes], axis=0)

    def with_visual(self, visual: ParamSet) -> "ToyClipModel":
        return replace(self, visual=visual)


def init_visual(rng: Rng, dtype=np.float32) -> ParamSet:
    """He-initialized MLP weights."""
    dims = (INPUT_DIM, *HIDDEN_DIMS, EMBED_DIM)
    params: ParamSet = {}
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        params[f"w{i}"] = rng.normal((dims[i], dims[i + 1]), scale=np.sqrt(2.0 / fan_in), dtype=dtype)
        params[f"b{i}"] = np.zeros(dims[i + 1], dtype=dtype)
    return params


def init_model(rng: Rng, text_seed: int, classes=(), tau: float = DEFAULT_TAU) -> ToyClipModel:
    table = {c: text_embed(c, text_seed) for c in check_class_list(classes)}
    return ToyClipModel(visual=init_visual(rng), text_table=table, tau=tau, text_seed=text_seed)


def standardize_pixels(flat: np.ndarray) -> np.ndarray:
    """Input normalization applied by the encoder: [0, 1] -> [-1, 1]."""
    return (flat - 0.5) * 2.0


def forward_embed(params: dict[str, Var], x: Var) -> Var:
    """Autodiff forward pass: flattened [0, 1] images [n, 3072] -> normalized
    [n, 64] embeddings. Pixels are standardized to [-1, 1] first."""
    h = ad.scale(ad.add(x, Var(np.asarray(-0.5, dtype=x.value.dtype))), 2.0)
    n_layers = len(HIDDEN_DIMS) + 1
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"w{i}"]), params[f"b{i}"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return ad.l2_normalize_rows(h)


def _flatten_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != IMAGE_SHAPE:
        raise ShapeError(f"expected images of shape [n, {IMAGE_SHAPE}], got {images.shape}")
    return images.reshape(images.shape[0], -1)


def embed_images(model: ToyClipModel, images: np.ndarray) -> np.ndarray:
    """Normalized visual embeddings, [n, 64]."""
    flat = _flatten_images(images).astype(next(iter(model.visual.values())).dtype)
    pvars = {k: Var(v) for k, v in model.visual.items()}
    return forward_embed(pvars, Var(flat)).value


def predict_logits(model: ToyClipModel, images: np.ndarray, classes) -> np.ndarray:
    """Similarity logits tau * <normalize(V(x)), T(c_i)>.

    Accepts a single [32,32,3] image (returns [k]) or a batch (returns [n,k]).
    """
    classes = check_class_list(classes)
    single = np.asarray(images).ndim == 3
    emb = embed_images(model, images)
    logits = model.tau * (emb @ model.text_matrix(classes).T)
    return logits[0] if single else logits


def predict_labels(model: ToyClipModel, images: np.ndarray, classes) -> np.ndarray:
    """Argmax class indices; ties resolve to the lowest index."""
    logits = predict_logits(model, images, classes)
    if logits.ndim == 1:
        logits = logits[None]
    return np.argmax(logits, axis=1)


def accuracy(model: ToyClipModel, images, labels, classes) -> float:
    pred = predict_labels(model, images, classes)
    return float((pred == np.asarray(labels)).mean() * 100.0)


def _iter_batches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_visual(
    model: ToyClipModel,
    images: np.ndarray,
    labels: np.ndarray,
    classes,
    epochs: int,
    lr: float,
    rng: Rng,
    batch_size: int = 32,
    batch_loss_hook=None,
    optimizer: str = "adam",
) -> ToyClipModel:
    """Cross-entropy fine-tuning of the visual encoder; the text table is frozen.

    `batch_loss_hook(params_vars, batch_indices)` may return an extra scalar
    Var to add to the clean loss (used for backdoor objectives).
    """
    classes = check_class_list(classes)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("training dataset must be non-empty")
    if labels.min() < 0 or labels.max() >= len(classes):
        raise ContractError(f"labels must index into the {len(classes)}-class list")
    flat = _flatten_images(images).astype(np.float32)
    text_mat = Var(model.text_matrix(classes).T.astype(np.float32))

    params = dict(model.visual)
    state = OptimState(kind=optimizer, lr=lr)
    shuffle = rng.split("shuffle")
    for _ in range(int(epochs)):
        for idx in _iter_batches(flat.shape[0], batch_size, shuffle):
            pvars = {k: Var(v) for k, v in params.items()}
            emb = forward_embed(pvars, Var(flat[idx]))
            logits = ad.scale(ad.matmul(emb, text_mat), model.tau)
            loss = ad.softmax_cross_entropy(logits, labels[idx])
            if batch_loss_hook is not None:
                extra = batch_loss_hook(pvars, idx)
                if extra is not None:
                    loss = ad.add(loss, extra)
            names = list(params)
            grads = ad.backward(loss, [pvars[n] for n in names])
            params = opt_step(params, dict(zip(names, grads)), state)
    return model.with_visual(params)


def finetune_clean(model, train, classes, epochs, lr, rng: Rng, batch_size: int = 32) -> ToyClipModel:
    """Task-specific fine-tuning with plain cross-entropy (no attack)."""
    return train_visual(model, train.images, train.labels, classes, epochs, lr, rng, batch_size)


def pretrain(model: ToyClipModel, datasets, epochs, lr, rng: Rng, per_class: int = 25, batch_size: int = 64) -> ToyClipModel:
    """Shared initialization: brief contrastive fit over a mixture of tasks.

    Trains on a subsample of every task's train split against the union
    class list. Deliberately short: the result should be a meaningful but
    weak starting point for task-specific fine-tuning.
    """
    union: list[str] = []
    for ds in datasets:
        for c in ds.classes:
            if c not in union:
                union.append(c)
    index = {c: i for i, c in enumerate(union)}
    images, labels = [], []
    for ds in datasets:
        for cls_idx, cls in enumerate(ds.classes):
            rows = np.flatnonzero(ds.labels == cls_idx)[:per_class]
            images.append(ds.images[rows])
            labels.extend([index[cls]] * len(rows))
    mix_images = np.concatenate(images, axis=0)
    mix_labels = np.asarray(labels)
    return train_visual(model, mix_images, mix_labels, union, epochs, lr, rng, batch_size)


# ---------------------------------------------------------------------------
# Checkpoint serialization (TCKP layout: visual/<name>, text/<class>, meta/*)


def save_model(path, model: ToyClipModel) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, arr in model.visual.items():
        entries[f"visual/{name}"] = arr
    for cls, vec in model.text_table.items():
        entries[f"text/{cls}"] = vec
    entries["meta/tau"] = np.asarray([model.tau], dtype=np.float64)
    entries["meta/text_seed"] = np.asarray([model.text_seed], dtype=np.float64)
    write_tckp(path, entries)


def load_model(path) -> ToyClipModel:
    entries = read_tckp(path)
    visual: ParamSet = {}
    table: dict[str, np.ndarray] = {}
    tau, text_seed = DEFAULT_TAU, 0
    for name, arr in entries.items():
        if name.startswith("visual/"):
            visual[name.split("/", 1)[1]] = arr
        elif name.startswith("text/"):
            table[name.split("/", 1)[1]] = arr
        elif name == "meta/tau":
            tau = float(arr[0])
        elif name == "meta/text_seed":
            text_seed = int(arr[0])
    return ToyClipModel(visual=visual, text_table=table, tau=tau, text_seed=text_seed)
