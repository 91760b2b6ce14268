"""Task vectors and weight-space merging algorithms.

All algorithms operate on the visual ParamSet only; text tables are frozen
and never touched by merging. Arithmetic runs in float64 internally and is
cast back to the pre-trained dtype, so degenerate identities (one model at
coefficient 1, simple average of identical models) hold bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ContractError
from .model import ToyClipModel, forward_embed
from .numerics import ParamSet, solve_spd


@dataclass
class TaskVector:
    """Element-wise weight delta of a fine-tuned model from the shared base."""

    delta: ParamSet
    source: str = ""


@dataclass
class MergeConfig:
    """Knobs for every merge algorithm; unused fields are ignored.

    algorithm: one of "ta", "sa", "ties", "regmean", "adamerging".
    coeff: scalar coefficient for ta/ties (sa derives 1/n when None).
    """

    algorithm: str = "ta"
    coeff: float | None = 0.3
    ties_trim: float = 0.20
    regmean_decay: float = 0.9
    regmean_ridge_scale: float = 1e-3
    ada_init: float = 0.3
    ada_steps: int = 200
    ada_lr: float = 1e-2

    def __post_init__(self):
        if self.coeff is not None and not 0.0 <= self.coeff <= 1.0:
            raise ContractError(f"merging coefficient must lie in [0, 1], got {self.coeff}")
        if not 0.0 < self.ties_trim <= 1.0:
            raise ContractError(f"trim fraction must lie in (0, 1], got {self.ties_trim}")


def _check_structure(a: ParamSet, b: ParamSet, what: str) -> None:
    missing = set(a) ^ set(b)
    if missing:
        raise ContractError(f"{what}: key sets differ on {sorted(missing)}")
    bad = [k for k in a if a[k].shape != b[k].shape]
    if bad:
        raise ContractError(f"{what}: shapes differ for {bad}")


def make_task_vector(theta_ft: ParamSet, theta_pre: ParamSet, source: str = "") -> TaskVector:
    """delta = theta_ft - theta_pre, held in float64 so that adding it back
    to theta_pre reproduces theta_ft exactly."""
    _check_structure(theta_ft, theta_pre, "make_task_vector")
    delta = {k: theta_ft[k].astype(np.float64) - theta_pre[k].astype(np.float64) for k in theta_pre}
    return TaskVector(delta=delta, source=source)


def compose_merged(theta_pre: ParamSet, terms) -> ParamSet:
    """theta_pre + sum of coeff * delta; coeff may be a scalar or a
    per-parameter map (layer-wise merging)."""
    out = {k: v.astype(np.float64) for k, v in theta_pre.items()}
    for coeff, tv in terms:
        _check_structure(tv.delta, theta_pre, "compose_merged")
        if isinstance(coeff, dict):
            unknown = set(coeff) - set(theta_pre)
            if unknown:
                raise ContractError(f"per-layer coefficients name unknown parameters {sorted(unknown)}")
            for k in tv.delta:
                out[k] = out[k] + float(coeff.get(k, 0.0)) * tv.delta[k]
        else:
            c = float(coeff)
            for k in tv.delta:
                out[k] = out[k] + c * tv.delta[k]
    return {k: out[k].astype(theta_pre[k].dtype) for k in theta_pre}


def merge_weighted_sum(theta_pre: ParamSet, tvs, coeff: float | None = None) -> ParamSet:
    """Weighted-sum merging: fixed scalar coefficient, or the arithmetic
    mean of the task vectors when coeff is None."""
    tvs = list(tvs)
    if not tvs:
        raise ContractError("need at least one task vector")
    if coeff is None:
        coeff = 1.0 / len(tvs)
    if not 0.0 <= coeff <= 1.0:
        raise ContractError(f"merging coefficient must lie in [0, 1], got {coeff}")
    return compose_merged(theta_pre, [(coeff, tv) for tv in tvs])


def _trim_tensor(v: np.ndarray, trim: float) -> np.ndarray:
    """Zero all but the top-trim fraction of entries by magnitude."""
    flat = v.reshape(-1)
    k = max(1, int(round(trim * flat.size)))
    if k >= flat.size:
        return v.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(v.shape)


def ties_merge(theta_pre: ParamSet, tvs, coeff: float = 0.3, trim: float = 0.20) -> ParamSet:
    """Trim / elect-sign / disjoint-merge combination of task vectors.

    Per parameter entry: each task vector keeps only its top-trim fraction
    of magnitudes; the sign is elected from the sum of trimmed vectors
    (ties resolve to +); the merged value is the mean of nonzero trimmed
    values that agree with the elected sign, or 0 when none do. The result
    is scaled by `coeff` and added to theta_pre.
    """
    tvs = list(tvs)
    if not tvs:
        raise ContractError("need at least one task vector")
    if not 0.0 < trim <= 1.0:
        raise ContractError(f"trim fraction must lie in (0, 1], got {trim}")
    if not 0.0 <= coeff <= 1.0:
        raise ContractError(f"merging coefficient must lie in [0, 1], got {coeff}")

    merged_delta: ParamSet = {}
    for k in theta_pre:
        stack = np.stack([_trim_tensor(tv.delta[k], trim) for tv in tvs], axis=0)
        elected = np.where(stack.sum(axis=0) >= 0.0, 1.0, -1.0)
        agree = (np.sign(stack) == elected) & (stack != 0.0)
        count = agree.sum(axis=0)
        total = np.where(agree, stack, 0.0).sum(axis=0)
        merged_delta[k] = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return compose_merged(theta_pre, [(coeff, TaskVector(merged_delta, "ties"))])


# ---------------------------------------------------------------------------
# RegMean: closed-form linear-layer merging from input-activation Grams


def collect_linear_activations(model: ToyClipModel, images: np.ndarray) -> dict[str, np.ndarray]:
    """Inputs seen by each linear layer over a batch of images, float64."""
    from .model import standardize_pixels

    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    acts: dict[str, np.ndarray] = {}
    h = standardize_pixels(flat)
    weights = [k for k in model.visual if k.startswith("w")]
    for i, name in enumerate(weights):
        acts[name] = h
        z = h @ model.visual[name].astype(np.float64) + model.visual[f"b{i}"].astype(np.float64)
        h = np.maximum(z, 0.0) if i < len(weights) - 1 else z
    return acts


def regmean_merge(
    models,
    datasets,
    theta_pre: ParamSet,
    decay: float = 0.9,
    ridge_scale: float = 1e-3,
) -> ParamSet:
    """Merge by matching each linear layer's activations in least squares.

    For each weight matrix the merged W solves (sum_i G_i) W = sum_i G_i W_i
    with G_i the Gram matrix of layer inputs collected over model i's own
    training data, off-diagonals scaled by `decay` and a ridge of
    ridge_scale * mean(diag) added. Biases are merged by simple average.
    """
    models = list(models)
    datasets = list(datasets)
    if not models or len(models) != len(datasets):
        raise ContractError("need one dataset per model")
    for ds in datasets:
        if len(ds) == 0:
            raise ContractError("activation collection needs at least one example")

    grams: list[dict[str, np.ndarray]] = []
    for model, ds in zip(models, datasets):
        acts = collect_linear_activations(model, ds.images)
        g = {}
        for name, x in acts.items():
            gram = x.T @ x
            if decay != 1.0:
                diag = np.diag(np.diag(gram))
                gram = decay * gram + (1.0 - decay) * diag
            if ridge_scale > 0.0:
                gram = gram + ridge_scale * float(np.trace(gram) / gram.shape[0]) * np.eye(gram.shape[0])
            g[name] = gram
        grams.append(g)

    merged: ParamSet = {}
    for k in theta_pre:
        if k.startswith("w"):
            lhs = sum(g[k] for g in grams)
            rhs = sum(g[k] @ m.visual[k].astype(np.float64) for g, m in zip(grams, models))
            merged[k] = solve_spd(lhs, rhs).astype(theta_pre[k].dtype)
        else:
            merged[k] = (
                sum(m.visual[k].astype(np.float64) for m in models) / len(models)
            ).astype(theta_pre[k].dtype)
    return merged


# ---------------------------------------------------------------------------
# Entropy-minimized layer-wise coefficients


@dataclass
class AdaMergingResult:
    coeffs: list[dict[str, float]]  # per task vector: parameter name -> coefficient
    merged: ParamSet
    entropy_initial: float
    entropy_final: float
    entropy_trace: list[float] = field(default_factory=list)


def _mean_entropy_and_grad(theta: ParamSet, dev_batches, text_mats, tau: float):
    """Mean prediction entropy over all dev batches plus d(entropy)/d(theta)."""
    names = list(theta)
    total_grad = {k: np.zeros_like(theta[k], dtype=np.float64) for k in names}
    total_entropy = 0.0
    n_batches = len(dev_batches)
    for images, tmat in zip(dev_batches, text_mats):
        pvars = {k: Var(v) for k, v in theta.items()}
        flat = Var(images.reshape(images.shape[0], -1).astype(np.float32))
        emb = forward_embed(pvars, flat)
        logits = ad.scale(ad.matmul(emb, Var(tmat.T)), tau)
        ent = ad.softmax_entropy(logits)
        grads = ad.backward(ent, [pvars[k] for k in names])
        for k, g in zip(names, grads):
            total_grad[k] += g.astype(np.float64) / n_batches
        total_entropy += float(ent.value) / n_batches
    return total_entropy, total_grad


def adamerging_fit(
    theta_pre: ParamSet,
    tvs,
    dev_batches,
    class_lists,
    text_matrix_fn,
    tau: float,
    init: float = 0.3,
    steps: int = 200,
    lr: float = 1e-2,
) -> AdaMergingResult:
    """Tune layer-wise merging coefficients by entropy descent on dev images.

    Each dev batch is scored against its own task's class list. The
    coefficient gradient is the inner product of the entropy's weight
    gradient with the task vector, per parameter tensor; coefficients are
    clamped to [0, 1] after every step. steps=0 returns the initialization.
    """
    tvs = list(tvs)
    dev_batches = list(dev_batches)
    if len(dev_batches) != len(class_lists):
        raise ContractError("need one class list per dev batch")
    if any(np.asarray(b).shape[0] == 0 for b in dev_batches):
        raise ContractError("dev batches must be non-empty")
    text_mats = [text_matrix_fn(classes).astype(np.float32) for classes in class_lists]
    dev_flat = [np.asarray(b) for b in dev_batches]

    coeffs = [{k: float(init) for k in theta_pre} for _ in tvs]
    trace: list[float] = []
    entropy = None
    for step in range(int(steps) + 1):
        merged = compose_merged(theta_pre, list(zip(coeffs, tvs)))
        entropy, grad_theta = _mean_entropy_and_grad(merged, dev_flat, text_mats, tau)
        trace.append(entropy)
        if step == int(steps):
            break
        for i, tv in enumerate(tvs):
            for k in theta_pre:
                g = float((grad_theta[k] * tv.delta[k]).sum())
                coeffs[i][k] = float(np.clip(coeffs[i][k] - lr * g, 0.0, 1.0))
    merged = compose_merged(theta_pre, list(zip(coeffs, tvs)))
    return AdaMergingResult(
        coeffs=coeffs,
        merged=merged,
        entropy_initial=trace[0],
        entropy_final=trace[-1],
        entropy_trace=trace,
    )


def task_vector_cosine(a: TaskVector, b: TaskVector) -> float:
    """Cosine similarity between two task vectors, flattened end to end."""
    va = np.concatenate([a.delta[k].reshape(-1) for k in a.delta])
    vb = np.concatenate([b.delta[k].reshape(-1) for k in a.delta])
    return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
