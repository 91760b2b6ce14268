"""Merge-robust backdoor attack stack and the data-poisoning baseline.

The two-stage attack first optimizes a universal patch trigger against a
reference model standing in for the merged model without the adversary's
contribution, then fine-tunes the adversary model with a
feature-interpolation backdoor loss so the trigger stays effective across
the whole range of merging coefficients. Off-task attacks, where the
target class lives in another provider's task, add shadow classes and
adversarial data augmentation of a handful of reference images.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .checkpoint import decode_text, encode_text, read_tckp, write_tckp
from .data import Dataset
from .errors import ContractError, ShapeError
from .model import (
    IMAGE_SHAPE,
    ToyClipModel,
    check_class_list,
    embed_images,
    finetune_clean,
    forward_embed,
    predict_labels,
    train_visual,
)
from .numerics import Rng

CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")


@dataclass
class Trigger:
    """Patch trigger: binary mask plus full-image pattern in [0, 1]."""

    mask: np.ndarray  # [32, 32, 3] of {0.0, 1.0}
    pattern: np.ndarray  # [32, 32, 3] in [0, 1]
    target: str
    corner: str = "bottom-right"
    height: int = 0
    width: int = 0


@dataclass
class AttackConfig:
    """Attack hyperparameters; unset area_fraction falls back per mode
    (1% of pixels on-task, 1.5% off-task)."""

    mode: str = "on-task"  # "on-task" | "off-task"
    scenario: str = "multi-task"  # "multi-task" | "single-task"
    alpha: float = 5.0
    mix_range: tuple[float, float] = (0.1, 1.0)
    area_fraction: float | None = None
    corner: str = "bottom-right"
    ut_gamma: float = 1.0
    ut_lr: float = 1.0
    ut_epochs: int = 40
    ut_batch: int = 64
    ut_early_stop: bool = False
    ref_count: int = 5
    shadow_count: int = 300
    n_ada: int = 256
    pgd_eps: float = 8.0 / 255.0
    pgd_steps: int = 10
    pgd_step_size: float | None = None
    # Ablation toggles for the off-task attack designs; the full attack
    # keeps all three on.
    use_references: bool = True
    use_ada: bool = True
    use_shadow: bool = True
    pairs: list = field(default_factory=list)  # (target class, Trigger) after stage 1

    def __post_init__(self):
        if self.mode not in ("on-task", "off-task"):
            raise ContractError(f"unknown attack mode '{self.mode}'")
        if self.scenario not in ("multi-task", "single-task"):
            raise ContractError(f"unknown scenario '{self.scenario}'")
        frac = self.resolved_area_fraction()
        if not 0.0 < frac <= 0.05:
            raise ContractError(f"trigger area fraction must lie in (0, 0.05], got {frac}")
        lo, hi = self.mix_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ContractError(f"mix range must be within (0, 1], got {self.mix_range}")

    def resolved_area_fraction(self) -> float:
        if self.area_fraction is not None:
            return float(self.area_fraction)
        return 0.01 if self.mode == "on-task" else 0.015

    def resolved_pgd_step(self) -> float:
        if self.pgd_step_size is not None:
            return float(self.pgd_step_size)
        return 2.5 * self.pgd_eps / max(1, self.pgd_steps)


def patch_dims(area: int) -> tuple[int, int]:
    """Most-square h x w factorization with h * w == area exactly."""
    h = 1
    for cand in range(int(np.sqrt(area)), 0, -1):
        if area % cand == 0:
            h = cand
            break
    return h, area // h


def make_mask(area_fraction: float, corner: str = "bottom-right") -> tuple[np.ndarray, int, int]:
    """Binary mask with exactly round(fraction * H * W) pixels set, placed as
    a contiguous near-square rectangle in the chosen corner."""
    if corner not in CORNERS:
        raise ContractError(f"corner must be one of {CORNERS}, got '{corner}'")
    h_img, w_img, c = IMAGE_SHAPE
    area = int(round(area_fraction * h_img * w_img))
    if area < 1 or area > h_img * w_img:
        raise ContractError(f"area fraction {area_fraction} yields invalid patch area {area}")
    ph, pw = patch_dims(area)
    if ph > h_img or pw > w_img:
        raise ContractError(f"patch {ph}x{pw} does not fit a {h_img}x{w_img} image")
    mask = np.zeros(IMAGE_SHAPE, dtype=np.float32)
    row = 0 if corner.startswith("top") else h_img - ph
    col = 0 if corner.endswith("left") else w_img - pw
    mask[row : row + ph, col : col + pw, :] = 1.0
    return mask, ph, pw


def make_trigger(target: str, area_fraction: float, rng: Rng, corner: str = "bottom-right") -> Trigger:
    mask, ph, pw = make_mask(area_fraction, corner)
    pattern = rng.uniform(IMAGE_SHAPE, 0.0, 1.0, dtype=np.float32)
    return Trigger(mask=mask, pattern=pattern, target=target, corner=corner, height=ph, width=pw)


def apply_trigger(x: np.ndarray, t: Trigger) -> np.ndarray:
    """Paste the trigger: pattern * mask + (1 - mask) * x. Pixels outside the
    mask are preserved bit-exactly."""
    x = np.asarray(x)
    if x.shape[-3:] != t.mask.shape:
        raise ShapeError(f"image shape {x.shape} does not match trigger {t.mask.shape}")
    return (t.pattern * t.mask + (1.0 - t.mask) * x).astype(x.dtype)


def save_trigger(path, t: Trigger) -> None:
    write_tckp(
        path,
        {
            "trigger/mask": t.mask,
            "trigger/delta": t.pattern,
            "meta/target_class": encode_text(t.target),
            "meta/placement": np.asarray(
                [float(CORNERS.index(t.corner)), float(t.height), float(t.width)], dtype=np.float32
            ),
        },
    )


def load_trigger(path) -> Trigger:
    entries = read_tckp(path)
    placement = entries["meta/placement"]
    return Trigger(
        mask=entries["trigger/mask"],
        pattern=entries["trigger/delta"],
        target=decode_text(entries["meta/target_class"]),
        corner=CORNERS[int(placement[0])],
        height=int(placement[1]),
        width=int(placement[2]),
    )


# ---------------------------------------------------------------------------
# Reference model and shadow classes


def reference_model_for_lambda0(
    scenario: str,
    pretrained: ToyClipModel,
    adv_train: Dataset | None,
    classes,
    rng: Rng,
    epochs: int = 8,
    lr: float = 1e-3,
) -> ToyClipModel:
    """The attacker's stand-in for the merged model without its own vector:
    the pre-trained model (multi-task) or a clean fine-tuned adversary model
    (single-task, where benign vectors resemble the adversary's own)."""
    if scenario == "multi-task":
        return pretrained
    if scenario == "single-task":
        if adv_train is None or len(adv_train) == 0:
            raise ContractError("single-task scenario needs adversary training data")
        return finetune_clean(pretrained, adv_train, classes, epochs, lr, rng)
    raise ContractError(f"unknown scenario '{scenario}'")


def build_shadow_classes(target: str, vocab, count: int, rng: Rng) -> list[str]:
    """Target class first, then `count` distinct sampled surrogate names."""
    if not target:
        raise ContractError("target class must be non-empty")
    pool = [v for v in dict.fromkeys(vocab) if v != target]
    if len(pool) < count:
        raise ContractError(f"vocabulary holds {len(pool)} usable names, need {count}")
    order = rng.permutation(len(pool))
    return [target] + [pool[i] for i in order[:count]]


# ---------------------------------------------------------------------------
# Adversarial data augmentation


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, c = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def random_resized_crop(image: np.ndarray, rng: Rng, scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """Crop a random area/aspect window and resize back to full resolution."""
    h, w, _ = image.shape
    area = h * w * float(rng.uniform((), scale[0], scale[1], dtype=np.float64))
    aspect = float(rng.uniform((), ratio[0], ratio[1], dtype=np.float64))
    ch = int(np.clip(round(np.sqrt(area / aspect)), 1, h))
    cw = int(np.clip(round(np.sqrt(area * aspect)), 1, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[top : top + ch, left : left + cw]
    return _bilinear_resize(crop, h, w)


def _input_gradient(model: ToyClipModel, flat: np.ndarray, loss_fn) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of a scalar loss with respect to flattened input pixels."""
    x = Var(flat)
    pvars = {k: Var(v) for k, v in model.visual.items()}
    emb = forward_embed(pvars, x)
    loss = loss_fn(emb)
    (g,) = ad.backward(loss, [x])
    return g, loss.value


def pgd_targeted(
    model: ToyClipModel,
    classes,
    images: np.ndarray,
    target_indices: np.ndarray,
    eps: float,
    steps: int,
    step_size: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched targeted PGD under an L-infinity budget, clipped to [0, 1].

    Returns (perturbed images, success mask) where success means the model
    classifies the result as its requested target class.
    """
    classes = check_class_list(classes)
    text_mat = model.text_matrix(classes).T.astype(np.float32)
    x0 = np.asarray(images, dtype=np.float32)
    target_indices = np.asarray(target_indices)
    x = x0.copy()
    n = x.shape[0]
    flat_shape = (n, int(np.prod(IMAGE_SHAPE)))
    for _ in range(int(steps)):
        def loss_fn(emb):
            logits = ad.scale(ad.matmul(emb, Var(text_mat)), model.tau)
            return ad.softmax_cross_entropy(logits, target_indices)

        g, _ = _input_gradient(model, x.reshape(flat_shape), loss_fn)
        x = x - step_size * np.sign(g.reshape(x.shape))
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, 0.0, 1.0)
    pred = predict_labels(model, x, classes)
    return x, pred == target_indices


def pgd_away_from(
    model: ToyClipModel,
    target: str,
    images: np.ndarray,
    eps: float,
    steps: int,
    step_size: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Untargeted variant used when no surrogate class list is available:
    push embeddings away from the target class's text vector."""
    tvec = model.text_vector(target).astype(np.float32)[:, None]
    x0 = np.asarray(images, dtype=np.float32)
    x = x0.copy()
    n = x.shape[0]
    flat_shape = (n, int(np.prod(IMAGE_SHAPE)))

    def similarity(imgs):
        return embed_images(model, imgs) @ tvec[:, 0]

    before = similarity(x0)
    for _ in range(int(steps)):
        def loss_fn(emb):
            return ad.scale(ad.mean_all(ad.matmul(emb, Var(tvec))), model.tau)

        g, _ = _input_gradient(model, x.reshape(flat_shape), loss_fn)
        x = x - step_size * np.sign(g.reshape(x.shape))
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, 0.0, 1.0)
    return x, similarity(x) < before


def get_adversarial_example(
    model: ToyClipModel,
    classes,
    image: np.ndarray,
    toward: str,
    eps: float,
    steps: int,
    step_size: float,
) -> tuple[np.ndarray, bool]:
    """Perturb one image so the model classifies it as `toward` among
    `classes` (the attack target sits at index 0 and is not a valid goal)."""
    classes = check_class_list(classes)
    if toward == classes[0]:
        raise ContractError("adversarial goal must differ from the attack target class")
    idx = classes.index(toward)
    out, ok = pgd_targeted(model, classes, image[None], np.asarray([idx]), eps, steps, step_size)
    return out[0], bool(ok[0])


def adversarial_augment(
    refs: np.ndarray,
    reference_model: ToyClipModel,
    shadow: list[str],
    n_ada: int,
    rng: Rng,
    cfg: AttackConfig,
) -> tuple[Dataset, np.ndarray]:
    """Build a trigger-optimization dataset from a few reference images.

    Each output is a random-resized crop of a sampled reference, perturbed
    toward a sampled non-target shadow class (or simply away from the
    target when shadow classes are disabled). All outputs are kept; the
    returned mask records which perturbations reached their goal.
    """
    refs = np.asarray(refs)
    if refs.ndim != 4 or refs.shape[0] < 1:
        raise ContractError("need at least one reference image")
    if n_ada == 0:
        empty = np.zeros((0, *IMAGE_SHAPE), dtype=np.float32)
        return Dataset(empty, np.zeros(0, dtype=np.int64), list(shadow), "ada"), np.zeros(0, dtype=bool)

    crop_rng = rng.split("crop")
    pick_rng = rng.split("pick")
    crops = np.empty((n_ada, *IMAGE_SHAPE), dtype=np.float32)
    goals = np.empty(n_ada, dtype=np.int64)
    for i in range(n_ada):
        ref = refs[int(pick_rng.integers(0, refs.shape[0]))]
        crops[i] = random_resized_crop(ref, crop_rng)
        goals[i] = 1 + int(pick_rng.integers(0, len(shadow) - 1))  # any non-target shadow class

    step = cfg.resolved_pgd_step()
    if cfg.use_shadow:
        images, success = pgd_targeted(reference_model, shadow, crops, goals, cfg.pgd_eps, cfg.pgd_steps, step)
    else:
        images, success = pgd_away_from(reference_model, shadow[0], crops, cfg.pgd_eps, cfg.pgd_steps, step)
    return Dataset(images, goals, list(shadow), "ada"), np.asarray(success)


# ---------------------------------------------------------------------------
# Stage 1: universal trigger


def optimize_universal_trigger(
    images: np.ndarray,
    reference_model: ToyClipModel,
    classes,
    target: str,
    cfg: AttackConfig,
    rng: Rng,
) -> Trigger:
    """Gradient-ascent patch optimization against the reference model.

    Maximizes the target class's log-softmax over the dataset (or the raw
    target similarity when shadow/class scores are disabled), updating only
    the patch pattern and clipping it to [0, 1] after every step. Examples
    already classified as the target are skipped when early stop is on.
    """
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise ContractError("trigger optimization needs a non-empty dataset")
    use_classes = cfg.use_shadow or cfg.mode == "on-task"
    if use_classes:
        classes = check_class_list(classes)
        if target not in classes:
            raise ContractError(f"target class '{target}' not in class list")
        target_idx = classes.index(target)
        text_mat = reference_model.text_matrix(classes).T.astype(np.float32)
    tvec = reference_model.text_vector(target).astype(np.float32)[:, None]

    trigger = make_trigger(target, cfg.resolved_area_fraction(), rng.split("init"), cfg.corner)
    mask = trigger.mask
    delta = trigger.pattern.copy()
    n = images.shape[0]
    flat_dim = int(np.prod(IMAGE_SHAPE))
    shuffle = rng.split("shuffle")
    tau = reference_model.tau

    for _ in range(int(cfg.ut_epochs)):
        order = shuffle.permutation(n)
        for start in range(0, n, cfg.ut_batch):
            batch = images[order[start : start + cfg.ut_batch]]
            if cfg.ut_early_stop and use_classes:
                stamped = delta * mask + (1.0 - mask) * batch
                pred = predict_labels(reference_model, stamped, classes)
                batch = batch[pred != target_idx]
                if batch.shape[0] == 0:
                    continue
            dvar = Var(delta)
            xt = ad.blend(dvar, Var(batch), mask)
            emb = forward_embed(
                {k: Var(v) for k, v in reference_model.visual.items()},
                ad.reshape(xt, (batch.shape[0], flat_dim)),
            )
            if use_classes:
                logits = ad.scale(ad.matmul(emb, Var(text_mat)), tau)
                loss = ad.softmax_cross_entropy(logits, np.full(batch.shape[0], target_idx))
            else:
                loss = ad.scale(ad.mean_all(ad.matmul(emb, Var(tvec))), -tau)
            (g,) = ad.backward(loss, [dvar])
            delta = np.clip(delta - cfg.ut_lr * cfg.ut_gamma * g, 0.0, 1.0).astype(np.float32)
    return replace(trigger, pattern=delta)


# ---------------------------------------------------------------------------
# Feature-interpolation backdoor loss and stage 2


def fi_loss(
    images: np.ndarray,
    trigger: Trigger,
    target: str,
    adv_visual,
    reference_model: ToyClipModel,
    classes,
    mix: float,
    use_class_scores: bool = True,
):
    """Backdoor loss on a convex combination of triggered-image embeddings.

    F = mix * V_adv(x + t) + (1 - mix) * V_ref(x + t); the reference
    embeddings are constants, so the loss is differentiable with respect to
    the adversary weights only. With class scores the loss is cross-entropy
    of tau * <F, T(c_i)> against the target; without them it maximizes the
    raw target similarity. Returns (loss Var, adversary param Vars).
    """
    if not 0.0 <= mix <= 1.0:
        raise ContractError(f"interpolation weight must lie in [0, 1], got {mix}")
    classes = check_class_list(classes)
    if use_class_scores and target not in classes:
        raise ContractError(f"target class '{target}' not in class list")
    dtype = next(iter(adv_visual.values())).dtype
    triggered = apply_trigger(np.asarray(images, dtype=dtype), trigger)
    flat = triggered.reshape(triggered.shape[0], -1)
    pvars = {k: Var(v) for k, v in adv_visual.items()}
    ref_emb = embed_images(reference_model, triggered)
    loss = _fi_loss_from_vars(pvars, flat, ref_emb, reference_model, target, classes, mix, use_class_scores)
    return loss, pvars


def _fi_loss_from_vars(pvars, flat, ref_emb, reference_model, target, classes, mix, use_class_scores):
    dtype = next(iter(pvars.values())).value.dtype
    adv_emb = forward_embed(pvars, Var(flat.astype(dtype)))
    interp = ad.add(ad.scale(adv_emb, mix), Var(((1.0 - mix) * ref_emb).astype(dtype)))
    tau = reference_model.tau
    if use_class_scores:
        text_mat = reference_model.text_matrix(classes).T.astype(dtype)
        logits = ad.scale(ad.matmul(interp, Var(text_mat)), tau)
        labels = np.full(flat.shape[0], classes.index(target))
        return ad.softmax_cross_entropy(logits, labels)
    tvec = reference_model.text_vector(target).astype(dtype)[:, None]
    return ad.scale(ad.mean_all(ad.matmul(interp, Var(tvec))), -tau)


def backdoor_finetune(
    base_model: ToyClipModel,
    adv_train: Dataset,
    adv_classes,
    cfg: AttackConfig,
    reference_model: ToyClipModel,
    pair_classes,
    rng: Rng,
    epochs: int = 8,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> ToyClipModel:
    """Stage 2: fine-tune with clean cross-entropy plus the backdoor terms.

    Each (target, trigger) pair contributes a feature-interpolation loss
    whose mix weight is resampled per batch; pair losses are averaged and
    scaled by alpha so the weighting is stable as pairs are added. With
    alpha == 0 this reduces exactly to clean fine-tuning.
    """
    if not cfg.pairs:
        raise ContractError("attack config carries no (target, trigger) pairs")
    pair_classes = list(pair_classes)
    if len(pair_classes) != len(cfg.pairs):
        raise ContractError("need one class list per (target, trigger) pair")
    for (target, trigger), classes in zip(cfg.pairs, pair_classes):
        if trigger is None:
            raise ContractError(f"pair '{target}' is missing its stage-1 trigger")
        if cfg.use_shadow and target not in classes:
            raise ContractError(f"pair target '{target}' not in its loss class list")

    if cfg.alpha == 0.0:
        return finetune_clean(base_model, adv_train, adv_classes, epochs, lr, rng, batch_size)

    flat_all = adv_train.images.reshape(len(adv_train), -1).astype(np.float32)
    mix_rng = rng.split("fi-mix")
    lo, hi = cfg.mix_range
    tau = reference_model.tau

    pair_data = []
    for (target, trigger), classes in zip(cfg.pairs, pair_classes):
        triggered = apply_trigger(adv_train.images.astype(np.float32), trigger)
        tflat = triggered.reshape(len(adv_train), -1)
        ref_emb = embed_images(reference_model, triggered).astype(np.float32)
        if cfg.use_shadow:
            classes = check_class_list(classes)
            text_mat = reference_model.text_matrix(classes).T.astype(np.float32)
            label = classes.index(target)
        else:
            text_mat = reference_model.text_vector(target).astype(np.float32)[:, None]
            label = None
        pair_data.append((tflat, ref_emb, text_mat, label))

    def hook(pvars, idx):
        terms = []
        for tflat, ref_emb, text_mat, label in pair_data:
            mix = float(mix_rng.uniform((), lo, hi, dtype=np.float64))
            adv_emb = forward_embed(pvars, Var(tflat[idx]))
            interp = ad.add(ad.scale(adv_emb, mix), Var((1.0 - mix) * ref_emb[idx]))
            scores = ad.matmul(interp, Var(text_mat))
            if label is not None:
                logits = ad.scale(scores, tau)
                terms.append(ad.softmax_cross_entropy(logits, np.full(len(idx), label)))
            else:
                terms.append(ad.scale(ad.mean_all(scores), -tau))
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scale(total, cfg.alpha / len(terms))

    return train_visual(
        base_model,
        adv_train.images,
        adv_train.labels,
        adv_classes,
        epochs,
        lr,
        rng,
        batch_size,
        batch_loss_hook=hook,
    )


# ---------------------------------------------------------------------------
# Data-poisoning baseline


def badnets_poison(train: Dataset, t: Trigger, target: str, rate: float, rng: Rng) -> tuple[Dataset, np.ndarray]:
    """Classic poisoning: stamp the trigger on floor(rate * N) random images
    and relabel them to the target class. Returns the poisoned dataset and
    the sorted poisoned indices."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"poison rate must lie in [0, 1], got {rate}")
    if target not in train.classes:
        raise ContractError(f"target class '{target}' not in task classes")
    count = int(rate * len(train))
    idx = np.sort(rng.permutation(len(train))[:count])
    images = train.images.copy()
    labels = train.labels.copy()
    if count:
        images[idx] = apply_trigger(images[idx], t)
        labels[idx] = train.classes.index(target)
    return Dataset(images, labels, list(train.classes), train.split), idx
