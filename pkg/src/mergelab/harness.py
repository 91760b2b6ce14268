"""Metrics, coefficient sweeps, experiment orchestration, and persistence.

`run_experiment` drives the full pipeline: synthetic data, shared
pretraining, per-task fine-tuning, the configured attack, merging, and
evaluation. Every artifact lands in the experiment's output directory and
the JSON report embeds a fingerprint (config digest, seeds, checkpoint
digests) so identical configs reproduce byte-identical reports.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import (
    AttackConfig,
    Trigger,
    adversarial_augment,
    apply_trigger,
    backdoor_finetune,
    badnets_poison,
    build_shadow_classes,
    load_trigger,
    make_trigger,
    optimize_universal_trigger,
    reference_model_for_lambda0,
    save_trigger,
)
from .checkpoint import file_digest
from .data import (
    Dataset,
    TaskSpec,
    default_task_suite,
    generate_task,
    load_dataset,
    make_vocabulary,
    save_dataset,
    save_vocabulary,
)
from .errors import ContractError, FormatError, StageError
from .merging import (
    MergeConfig,
    TaskVector,
    adamerging_fit,
    compose_merged,
    make_task_vector,
    merge_weighted_sum,
    regmean_merge,
    ties_merge,
)
from .model import (
    ToyClipModel,
    accuracy,
    embed_images,
    finetune_clean,
    init_model,
    load_model,
    predict_labels,
    pretrain,
    save_model,
    text_embed,
)
from .numerics import Rng

SWEEP_HEADER = ("lambda_adv", "asr", "avg_acc", "chord_residual_p50")


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsReport:
    """CA/BA/ASR values plus the experiment fingerprint."""

    role: str  # "CA" for a clean merged model, "BA" for a backdoored one
    per_task_accuracy: dict[str, float]
    average_accuracy: float
    asr: dict[str, float] = field(default_factory=dict)
    fingerprint: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "per_task_accuracy": self.per_task_accuracy,
            "average_accuracy": self.average_accuracy,
            "asr": self.asr,
            "fingerprint": self.fingerprint,
        }


def attack_success_rate(
    model: ToyClipModel,
    test: Dataset,
    classes,
    trigger: Trigger,
    include_target_class: bool = False,
) -> float:
    """Share of triggered test images classified as the trigger's target.

    Images whose true label already is the target class are excluded by
    default, so a trigger-blind perfect model scores 0.
    """
    if trigger.target not in classes:
        raise ContractError(f"trigger target '{trigger.target}' not in task classes")
    target_idx = classes.index(trigger.target)
    keep = np.ones(len(test), dtype=bool) if include_target_class else test.labels != target_idx
    if keep.sum() == 0:
        raise ContractError("no eligible test images for ASR")
    triggered = apply_trigger(test.images[keep], trigger)
    pred = predict_labels(model, triggered, classes)
    return float((pred == target_idx).mean() * 100.0)


def evaluate(
    model: ToyClipModel,
    tasks,
    triggers=(),
    include_target_class: bool = False,
    role: str = "CA",
    fingerprint: dict | None = None,
) -> MetricsReport:
    """Accuracy per task plus ASR per (trigger, target task).

    `tasks` is a list of (task name, test Dataset, class list); `triggers`
    is a list of (Trigger, task name) where the named task's class list
    must contain the trigger's target class.
    """
    per_task: dict[str, float] = {}
    by_name = {}
    for name, test, classes in tasks:
        per_task[name] = accuracy(model, test.images, test.labels, classes)
        by_name[name] = (test, classes)
    asr: dict[str, float] = {}
    for trigger, task_name in triggers:
        if task_name not in by_name:
            raise ContractError(f"trigger names unknown task '{task_name}'")
        test, classes = by_name[task_name]
        asr[f"{task_name}/{trigger.target}"] = attack_success_rate(
            model, test, classes, trigger, include_target_class
        )
    return MetricsReport(
        role=role,
        per_task_accuracy=per_task,
        average_accuracy=float(np.mean(list(per_task.values()))),
        asr=asr,
        fingerprint=fingerprint or {},
    )


# ---------------------------------------------------------------------------
# Coefficient sweep


def _chord_residuals(emb: np.ndarray, e0: np.ndarray, e1: np.ndarray) -> np.ndarray:
    """Distance of each embedding to the segment between its lambda=0 and
    lambda=1 embeddings, normalized by the chord length."""
    chord = e1 - e0
    norm2 = (chord * chord).sum(axis=1)
    norm = np.sqrt(norm2)
    t = np.clip(((emb - e0) * chord).sum(axis=1) / np.maximum(norm2, 1e-18), 0.0, 1.0)
    foot = e0 + t[:, None] * chord
    dist = np.linalg.norm(emb - foot, axis=1)
    return dist / np.maximum(norm, 1e-9)


def lambda_sweep(
    theta_pre,
    benign_tvs,
    adv_tv: TaskVector,
    grid,
    tasks,
    trigger: Trigger,
    target_task: str,
    template: ToyClipModel,
    benign_coeff: float = 0.3,
    probe_count: int = 64,
    include_target_class: bool = False,
):
    """Evaluate theta_pre + sum(benign) + lambda_adv * adv over a grid.

    Benign coefficients stay fixed at the merge default while the adversary
    coefficient walks the grid. Rows are (lambda_adv, asr, avg_acc,
    chord_residual_p50); also returns the full per-(lambda, probe) residual
    matrix for the interpolation-property check.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ContractError("sweep grid must be non-empty")
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ContractError("grid values must lie in [0, 1]")
    by_name = {name: (test, classes) for name, test, classes in tasks}
    if target_task not in by_name:
        raise ContractError(f"unknown target task '{target_task}'")
    test, classes = by_name[target_task]
    target_idx = classes.index(trigger.target)
    eligible = np.flatnonzero(test.labels != target_idx)
    probes = apply_trigger(test.images[eligible[:probe_count]], trigger)

    def compose_at(lam: float):
        terms = [(benign_coeff, tv) for tv in benign_tvs] + [(lam, adv_tv)]
        return template.with_visual(compose_merged(theta_pre, terms))

    e0 = embed_images(compose_at(0.0), probes)
    e1 = embed_images(compose_at(1.0), probes)

    rows = []
    residuals = []
    for lam in grid:
        model = compose_at(lam)
        asr = attack_success_rate(model, test, classes, trigger, include_target_class)
        accs = [accuracy(model, t.images, t.labels, c) for _, t, c in tasks]
        res = _chord_residuals(embed_images(model, probes), e0, e1)
        residuals.append(res)
        rows.append((lam, asr, float(np.mean(accs)), float(np.median(res))))
    return rows, np.stack(residuals, axis=0)


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def read_sweep_csv(path) -> list[tuple[float, float, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(SWEEP_HEADER):
            raise FormatError(f"bad sweep header {header}, expected {list(SWEEP_HEADER)}")
        return [tuple(float(v) for v in row) for row in reader]


# ---------------------------------------------------------------------------
# Experiment configuration


@dataclass
class TaskSuiteConfig:
    n_tasks: int = 6
    classes_per_task: int = 10
    seed: int = 2024
    train_per_class: int = 100
    test_per_class: int = 40
    dev_count: int = 64
    shared_class: str = "stop sign"
    shared_class_task: int = 1


@dataclass
class TrainConfig:
    pretrain_epochs: int = 12
    pretrain_lr: float = 1e-3
    pretrain_per_class: int = 80
    epochs: int = 16
    lr: float = 5e-4
    batch_size: int = 32


@dataclass
class AttackPlan:
    """What to attack; the nested AttackConfig carries the mechanics."""

    method: str = "two-stage"  # "two-stage" | "badnets" | "none"
    target_class: str | None = None  # default: first adversary class (on-task) / shared class (off-task)
    extra_targets: list = field(default_factory=list)  # additional on-task target classes
    badnets_rate: float = 0.15
    n_single_models: int = 4  # provider count in the single-task scenario
    vocab_size: int = 500
    vocab_seed: int = 31
    config: AttackConfig = field(default_factory=AttackConfig)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    text_seed: int = 7
    tau: float = 100.0
    adversary_task: int = 0
    asr_include_target: bool = False
    tasks: TaskSuiteConfig = field(default_factory=TaskSuiteConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    attack: AttackPlan = field(default_factory=AttackPlan)
    sweep_grid: list = field(default_factory=list)
    sweep_probes: int = 64

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        kwargs = {}
        for f in dataclasses.fields(ExperimentConfig):
            if f.name not in raw:
                continue
            value = raw.pop(f.name)
            if f.name == "tasks":
                value = TaskSuiteConfig(**value)
            elif f.name == "train":
                value = TrainConfig(**value)
            elif f.name == "merge":
                value = MergeConfig(**value)
            elif f.name == "attack":
                value = dict(value)
                nested = value.pop("config", {})
                value["config"] = AttackConfig(**{**nested, "mix_range": tuple(nested.get("mix_range", (0.1, 1.0)))})
                value = AttackPlan(**value)
            kwargs[f.name] = value
        if raw:
            raise FormatError(f"unknown config fields: {sorted(raw)}")
        return ExperimentConfig(**kwargs)

    def to_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj):
                return {k: convert(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, dict):
                return {k: convert(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [convert(v) for v in obj]
            return obj
        out = convert(self)
        # Stage-1 triggers are artifacts, not configuration.
        out["attack"]["config"].pop("pairs", None)
        return out

    def digest(self) -> str:
        payload = self.to_dict()
        payload.pop("out_dir", None)  # output location does not identify the experiment
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Reports

REPORT_REQUIRED = ("fingerprint", "clean")


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")


def read_report(path) -> dict:
    try:
        report = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc}") from exc
    for fieldname in REPORT_REQUIRED:
        if fieldname not in report:
            raise FormatError(f"report missing required field '{fieldname}'")
    return report


# ---------------------------------------------------------------------------
# Pipeline


class Pipeline:
    """Lazily computes pipeline stages, persisting artifacts as it goes.

    Stage outputs already on disk are reloaded instead of recomputed, so the
    CLI can run stages one at a time; `run_experiment` forces a fresh
    computation of everything.
    """

    def __init__(self, config: ExperimentConfig, reuse_artifacts: bool = True):
        self.cfg = config
        self.reuse = reuse_artifacts
        self.out = Path(config.out_dir)
        self._cache: dict = {}

    # -- helpers

    def _path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _stage(self, name: str, fn):
        if name in self._cache:
            return self._cache[name]
        try:
            value = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        self._cache[name] = value
        return value

    def _rng(self, label) -> Rng:
        return Rng(self.cfg.seed).split(label)

    # -- stages

    def task_specs(self) -> list[TaskSpec]:
        t = self.cfg.tasks
        if self.cfg.attack.config.scenario == "single-task":
            base = default_task_suite(
                n_tasks=1,
                classes_per_task=t.classes_per_task,
                seed=t.seed,
                train_per_class=t.train_per_class,
                test_per_class=t.test_per_class,
                dev_count=t.dev_count,
                shared_class="",
            )
            return base
        return default_task_suite(
            n_tasks=t.n_tasks,
            classes_per_task=t.classes_per_task,
            seed=t.seed,
            train_per_class=t.train_per_class,
            test_per_class=t.test_per_class,
            dev_count=t.dev_count,
            shared_class=t.shared_class,
            shared_class_task=t.shared_class_task,
        )

    def gen_data(self):
        def build():
            splits = []
            for spec in self.task_specs():
                train, test, dev = None, None, None
                paths = {s: self._path("data", f"{spec.name}_{s}.tdst") for s in ("train", "test", "dev")}
                if self.reuse and all(p.exists() for p in paths.values()):
                    train = load_dataset(paths["train"], "train")
                    test = load_dataset(paths["test"], "test")
                    dev = load_dataset(paths["dev"], "dev")
                else:
                    train, test, dev = generate_task(spec)
                    save_dataset(paths["train"], train)
                    save_dataset(paths["test"], test)
                    save_dataset(paths["dev"], dev)
                splits.append({"spec": spec, "train": train, "test": test, "dev": dev})
            return splits
        return self._stage("gen-data", build)

    def pretrained(self) -> ToyClipModel:
        def build():
            path = self._path("checkpoints", "pretrained.tckp")
            data = self.gen_data()
            if self.reuse and path.exists():
                return load_model(path)
            union: list[str] = []
            for entry in data:
                for c in entry["spec"].classes:
                    if c not in union:
                        union.append(c)
            model = init_model(self._rng("init"), self.cfg.text_seed, union, self.cfg.tau)
            t = self.cfg.train
            model = pretrain(
                model,
                [entry["train"] for entry in data],
                t.pretrain_epochs,
                t.pretrain_lr,
                self._rng("pretrain"),
                per_class=t.pretrain_per_class,
            )
            save_model(path, model)
            return model
        return self._stage("pretrain", build)

    def provider_count(self) -> int:
        if self.cfg.attack.config.scenario == "single-task":
            return self.cfg.attack.n_single_models
        return len(self.task_specs())

    def provider_task(self, provider: int) -> int:
        if self.cfg.attack.config.scenario == "single-task":
            return 0
        return provider

    def clean_models(self) -> list[ToyClipModel]:
        """One clean fine-tuned model per provider (the adversary's clean
        counterpart included)."""
        def build():
            data = self.gen_data()
            base = self.pretrained()
            t = self.cfg.train
            models = []
            for provider in range(self.provider_count()):
                path = self._path("checkpoints", f"provider{provider}_clean.tckp")
                if self.reuse and path.exists():
                    models.append(load_model(path))
                    continue
                entry = data[self.provider_task(provider)]
                model = finetune_clean(
                    base,
                    entry["train"],
                    entry["spec"].classes,
                    t.epochs,
                    t.lr,
                    self._rng(f"finetune:{provider}"),
                    t.batch_size,
                )
                save_model(path, model)
                models.append(model)
            return models
        return self._stage("finetune", build)

    # -- attack

    def _target_info(self):
        cfg = self.cfg
        specs = self.task_specs()
        adv = cfg.adversary_task if cfg.attack.config.scenario == "multi-task" else 0
        mode = cfg.attack.config.mode
        if cfg.attack.target_class:
            target = cfg.attack.target_class
        elif mode == "on-task":
            target = specs[adv].classes[0]
        else:
            target = cfg.tasks.shared_class
        if mode == "on-task":
            target_task = adv
        else:
            target_task = next(i for i, s in enumerate(specs) if target in s.classes)
        return target, target_task, adv

    def attack_artifacts(self) -> dict:
        """Stage-1 triggers plus the stage-2 adversary model (or the
        poisoned-training baseline)."""
        def build():
            cfg = self.cfg
            method = cfg.attack.method
            if method == "none":
                return {}
            data = self.gen_data()
            specs = self.task_specs()
            target, target_task, adv = self._target_info()
            adv_entry = data[self.provider_task(adv) if cfg.attack.config.scenario == "multi-task" else 0]
            adv_classes = adv_entry["spec"].classes
            t = cfg.train

            if method == "badnets":
                trigger_path = self._path("triggers", "badnets.tckp")
                model_path = self._path("checkpoints", "adversary_badnets.tckp")
                trigger = make_trigger(
                    target, cfg.attack.config.resolved_area_fraction(), self._rng("badnets-trigger"), cfg.attack.config.corner
                )
                if self.reuse and trigger_path.exists() and model_path.exists():
                    return {"triggers": [(target, load_trigger(trigger_path), target_task)], "model": load_model(model_path)}
                poisoned, _ = badnets_poison(adv_entry["train"], trigger, target, cfg.attack.badnets_rate, self._rng("badnets-poison"))
                model = finetune_clean(
                    self.pretrained(), poisoned, adv_classes, t.epochs, t.lr, self._rng("badnets-train"), t.batch_size
                )
                save_trigger(trigger_path, trigger)
                save_model(model_path, model)
                return {"triggers": [(target, trigger, target_task)], "model": model}

            if method != "two-stage":
                raise ContractError(f"unknown attack method '{method}'")

            acfg = cfg.attack.config
            reference = reference_model_for_lambda0(
                acfg.scenario,
                self.pretrained(),
                adv_entry["train"],
                adv_classes,
                self._rng("reference"),
                epochs=t.epochs,
                lr=t.lr,
            )

            targets = [target] + list(cfg.attack.extra_targets)
            pairs = []
            pair_classes = []
            pair_tasks = []
            for idx, tgt in enumerate(targets):
                rng = self._rng(f"attack:{idx}:{tgt}")
                if acfg.mode == "off-task" and idx == 0:
                    shadow = build_shadow_classes(
                        tgt,
                        make_vocabulary(cfg.attack.vocab_size, cfg.attack.vocab_seed),
                        acfg.shadow_count,
                        rng.split("shadow"),
                    )
                    tgt_entry = data[target_task]
                    tgt_idx = tgt_entry["spec"].classes.index(tgt)
                    refs = tgt_entry["train"].images[tgt_entry["train"].labels == tgt_idx][: acfg.ref_count]
                    if acfg.use_references:
                        if acfg.use_ada:
                            ada, _ = adversarial_augment(refs, reference, shadow, acfg.n_ada, rng.split("ada"), acfg)
                            ut_images = ada.images
                        else:
                            ut_images = refs
                    else:
                        ut_images = adv_entry["train"].images
                    loss_classes = shadow
                    trig = optimize_universal_trigger(ut_images, reference, shadow, tgt, acfg, rng.split("ut"))
                    task_of = target_task
                else:
                    loss_classes = adv_classes
                    trig = optimize_universal_trigger(
                        adv_entry["train"].images, reference, adv_classes, tgt, acfg, rng.split("ut")
                    )
                    task_of = adv if acfg.mode == "on-task" or idx > 0 else target_task
                pairs.append((tgt, trig))
                pair_classes.append(loss_classes)
                pair_tasks.append(task_of)
                save_trigger(self._path("triggers", f"pair{idx}.tckp"), trig)

            acfg_with_pairs = dataclasses.replace(acfg, pairs=pairs)
            model = backdoor_finetune(
                self.pretrained(),
                adv_entry["train"],
                adv_classes,
                acfg_with_pairs,
                reference,
                pair_classes,
                self._rng("backdoor-train"),
                epochs=t.epochs,
                lr=t.lr,
                batch_size=t.batch_size,
            )
            save_model(self._path("checkpoints", "adversary_backdoored.tckp"), model)
            return {
                "triggers": [(tgt, trig, task_of) for (tgt, trig), task_of in zip(pairs, pair_tasks)],
                "model": model,
                "reference": reference,
            }
        return self._stage("attack", build)

    # -- merging

    def _merge_models(self, models: list[ToyClipModel], tag: str) -> tuple[ToyClipModel, dict]:
        cfg = self.cfg
        data = self.gen_data()
        base = self.pretrained()
        theta_pre = base.visual
        tvs = [
            make_task_vector(m.visual, theta_pre, source=f"provider{i}")
            for i, m in enumerate(models)
        ]
        mc = cfg.merge
        algorithm = mc.algorithm.lower()
        manifest: dict = {"algorithm": algorithm, "inputs": {}}
        if algorithm == "ta":
            coeff = 0.3 if mc.coeff is None else mc.coeff
            merged = merge_weighted_sum(theta_pre, tvs, coeff)
            manifest["coefficients"] = [coeff] * len(tvs)
        elif algorithm == "sa":
            merged = merge_weighted_sum(theta_pre, tvs, None)
            manifest["coefficients"] = [1.0 / len(tvs)] * len(tvs)
        elif algorithm == "ties":
            coeff = 0.3 if mc.coeff is None else mc.coeff
            merged = ties_merge(theta_pre, tvs, coeff, mc.ties_trim)
            manifest["coefficients"] = [coeff] * len(tvs)
            manifest["trim"] = mc.ties_trim
        elif algorithm == "regmean":
            train_sets = [data[self.provider_task(i)]["train"] for i in range(len(models))]
            merged = regmean_merge(models, train_sets, theta_pre, mc.regmean_decay, mc.regmean_ridge_scale)
            manifest["decay"] = mc.regmean_decay
            manifest["ridge_scale"] = mc.regmean_ridge_scale
        elif algorithm == "adamerging":
            dev_batches = [data[self.provider_task(i)]["dev"].images for i in range(len(models))]
            class_lists = [data[self.provider_task(i)]["spec"].classes for i in range(len(models))]
            result = adamerging_fit(
                theta_pre,
                tvs,
                dev_batches,
                class_lists,
                base.text_matrix,
                base.tau,
                init=mc.ada_init,
                steps=mc.ada_steps,
                lr=mc.ada_lr,
            )
            merged = result.merged
            manifest["coefficients"] = result.coeffs
            manifest["entropy_initial"] = result.entropy_initial
            manifest["entropy_final"] = result.entropy_final
        else:
            raise ContractError(f"unknown merge algorithm '{mc.algorithm}'")

        path = self._path("checkpoints", f"merged_{tag}.tckp")
        merged_model = base.with_visual(merged)
        save_model(path, merged_model)
        for i in range(len(models)):
            manifest["inputs"][f"provider{i}"] = file_digest(self._path("checkpoints", self._provider_file(i, tag)))
        manifest_path = self._path("checkpoints", f"merged_{tag}_manifest.json")
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        return merged_model, manifest

    def _provider_file(self, provider: int, tag: str) -> str:
        if tag == "backdoored" and provider == self._adv_provider():
            method = self.cfg.attack.method
            return "adversary_badnets.tckp" if method == "badnets" else "adversary_backdoored.tckp"
        return f"provider{provider}_clean.tckp"

    def _adv_provider(self) -> int:
        if self.cfg.attack.config.scenario == "single-task":
            return 0
        return self.cfg.adversary_task

    def merged(self, kind: str) -> ToyClipModel:
        def build():
            models = list(self.clean_models())
            if kind == "backdoored":
                artifacts = self.attack_artifacts()
                if not artifacts:
                    raise ContractError("attack method 'none' has no backdoored merge")
                models[self._adv_provider()] = artifacts["model"]
            model, _ = self._merge_models(models, kind)
            return model
        return self._stage(f"merge:{kind}", build)

    # -- evaluation and reporting

    def eval_tasks(self):
        data = self.gen_data()
        return [(e["spec"].name, e["test"], e["spec"].classes) for e in data]

    def _fingerprint(self) -> dict:
        ckpt_dir = self.out / "checkpoints"
        digests = {}
        if ckpt_dir.exists():
            for p in sorted(ckpt_dir.glob("*.tckp")):
                digests[p.name] = file_digest(p)
        return {"config_digest": self.cfg.digest(), "seed": self.cfg.seed, "checkpoints": digests}

    def report(self) -> dict:
        def build():
            cfg = self.cfg
            tasks = self.eval_tasks()
            clean_merged = self.merged("clean")
            out: dict = {}
            clean_report = evaluate(clean_merged, tasks, role="CA")
            if cfg.attack.method != "none":
                artifacts = self.attack_artifacts()
                specs = self.task_specs()
                triggers = [(trig, specs[task_of].name) for _, trig, task_of in artifacts["triggers"]]
                backdoored_merged = self.merged("backdoored")
                ba_report = evaluate(
                    backdoored_merged,
                    tasks,
                    triggers,
                    include_target_class=cfg.asr_include_target,
                    role="BA",
                )
                adv_entry = self.gen_data()[self.provider_task(self._adv_provider())]
                adv_only = {}
                for tgt, trig, task_of in artifacts["triggers"]:
                    entry = self.gen_data()[task_of]
                    if trig.target in adv_entry["spec"].classes or task_of == self.provider_task(self._adv_provider()):
                        adv_only[f"{specs[task_of].name}/{tgt}"] = attack_success_rate(
                            artifacts["model"], entry["test"], entry["spec"].classes, trig, cfg.asr_include_target
                        )
                out["backdoored"] = {
                    "per_task_accuracy": ba_report.per_task_accuracy,
                    "average_accuracy": ba_report.average_accuracy,
                }
                out["asr"] = ba_report.asr
                out["asr_without_merging"] = adv_only
            out["clean"] = {
                "per_task_accuracy": clean_report.per_task_accuracy,
                "average_accuracy": clean_report.average_accuracy,
            }

            if cfg.sweep_grid and cfg.attack.method != "none":
                sweep_rows = self.sweep()
                out["sweep"] = {"csv": "sweep.csv", "rows": len(sweep_rows)}
            out["fingerprint"] = self._fingerprint()
            write_report(self._path("report.json"), out)
            return out
        return self._stage("report", build)

    def sweep(self):
        def build():
            cfg = self.cfg
            artifacts = self.attack_artifacts()
            if not artifacts:
                raise ContractError("sweep requires an attack")
            data = self.gen_data()
            specs = self.task_specs()
            base = self.pretrained()
            theta_pre = base.visual
            models = self.clean_models()
            adv_provider = self._adv_provider()
            benign_tvs = [
                make_task_vector(m.visual, theta_pre, source=f"provider{i}")
                for i, m in enumerate(models)
                if i != adv_provider
            ]
            adv_tv = make_task_vector(artifacts["model"].visual, theta_pre, source="adversary")
            tgt, trig, task_of = artifacts["triggers"][0]
            benign_coeff = 0.3 if cfg.merge.coeff is None else cfg.merge.coeff
            rows, residuals = lambda_sweep(
                theta_pre,
                benign_tvs,
                adv_tv,
                cfg.sweep_grid,
                self.eval_tasks(),
                trig,
                specs[task_of].name,
                base,
                benign_coeff=benign_coeff,
                probe_count=cfg.sweep_probes,
                include_target_class=cfg.asr_include_target,
            )
            write_sweep_csv(self._path("sweep.csv"), rows)
            self._cache["sweep:residuals"] = residuals
            return rows
        return self._stage("sweep", build)


def run_experiment(config: ExperimentConfig) -> dict:
    """Full pipeline from config to report; always recomputes every stage."""
    return Pipeline(config, reuse_artifacts=False).report()
