"""Deterministic synthetic image-classification tasks and dataset files.

Images are 32x32x3 in [0, 1]: a gray noisy background carrying small
colored glyphs (2x5 patches) at a handful of anchor positions, corners
included. The glyph look (hue, two-tone pattern, anchor subset) derives
from the class NAME alone, so two tasks sharing a class name share that
class's pattern family, matching the frozen text map. Multi-word names
form fine-grained families: they share a family hue region and render as
stronger, edge-anchored glyphs (the analogue of a fine-grained task such
as traffic signs), which is what makes them meaningful off-task targets.

Generation is a pure function of the task spec: identical specs produce
byte-identical datasets.
"""
from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .numerics import Rng, derive_seed

IMAGE_HW = 32
CHANNELS = 3

GLYPH_H, GLYPH_W = 2, 5
SAT_RANGE = (0.78, 0.92)
VAL_RANGE = (0.75, 0.88)
NOISE_STD = 0.012
HUE_JITTER = 0.01
ECHO_WEIGHT = 0.45
CENTER_BIAS = 0.55  # probability that the full-strength glyph copy sits at the center anchor
# Glyph anchor grids: plain classes use the corners (where a patch trigger
# also lives), family classes use the edge midpoints.
ANCHORS = ((15, 13), (0, 0), (0, 27), (30, 0), (30, 27))
FAMILY_ANCHORS = ((15, 13), (0, 13), (30, 13), (15, 0), (15, 27))

MAGIC = b"TDST"
VERSION = 1


@dataclass
class TaskSpec:
    """Recipe for one synthetic task; equal specs generate equal bytes."""

    name: str
    classes: list[str]
    seed: int
    train_per_class: int = 100
    test_per_class: int = 40
    dev_count: int = 64  # unlabeled held-out images for coefficient tuning

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ContractError(f"task '{self.name}' needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ContractError(f"task '{self.name}' has duplicate class names")
        if min(self.train_per_class, self.test_per_class, self.dev_count) < 1:
            raise ContractError("samples per split must be >= 1")


@dataclass
class Dataset:
    images: np.ndarray  # [n, 32, 32, 3] float32 in [0, 1]
    labels: np.ndarray  # [n] int indices into `classes`
    classes: list[str]
    split: str = ""

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def data_equal(self, other: "Dataset") -> bool:
        return (
            self.classes == other.classes
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.images, other.images)
        )


def _hsv(h, s, v):
    return np.asarray(
        colorsys.hsv_to_rgb(h % 1.0, float(np.clip(s, 0, 1)), float(np.clip(v, 0, 1))),
        dtype=np.float32,
    )


def class_style(name: str) -> dict:
    """Pattern-family parameters derived from the class name alone.

    Single-word classes get an individual hue and render two glyph copies
    (one full, one faint echo) on the corner anchor grid. Multi-word
    classes belong to the family named by their last word: members share
    the family's hue region and render three full-strength copies on the
    edge-midpoint grid.
    """
    words = name.split()
    h = derive_seed(0xC1A55, f"style:{name}")
    if len(words) >= 2:
        family = derive_seed(0xC1A55, f"family:{words[-1]}")
        hue = (family % 48) / 48 + ((h >> 16) % 12) / 12 * 0.36 - 0.18
        copies, pool = 3, FAMILY_ANCHORS
    else:
        hue = (h % 48) / 48
        copies, pool = 2, ANCHORS
    # Every class works the center anchor plus two peripheral ones.
    layout = [0]
    x = h
    while len(layout) < 3:
        x = (x * 6364136223846793005 + 1442695040888963407) % (1 << 64)
        a = 1 + x % 4
        if a not in layout:
            layout.append(int(a))
    return {"hue": hue % 1.0, "variant": (h >> 8) % 4, "layout": layout, "copies": copies, "pool": pool}


def _render_class(name: str, count: int, rng: Rng) -> np.ndarray:
    style = class_style(name)
    out = np.empty((count, IMAGE_HW, IMAGE_HW, CHANNELS), dtype=np.float32)
    for i in range(count):
        u = lambda lo, hi: float(rng.uniform((), lo, hi, dtype=np.float64))
        img = np.full((IMAGE_HW, IMAGE_HW, CHANNELS), 0.5, dtype=np.float32)
        img += rng.normal((IMAGE_HW, IMAGE_HW, CHANNELS), scale=NOISE_STD, dtype=np.float32)
        col_a = _hsv(style["hue"] + u(-HUE_JITTER, HUE_JITTER), u(*SAT_RANGE), u(*VAL_RANGE))
        col_b = _hsv(style["hue"] + 0.45 + u(-HUE_JITTER, HUE_JITTER), u(*SAT_RANGE), u(*VAL_RANGE))
        glyph = np.tile(col_a, (GLYPH_H, GLYPH_W, 1))
        variant = style["variant"]
        if variant == 1:
            glyph[:, GLYPH_W // 2 + 1 :] = col_b
        elif variant == 2:
            glyph[1::2, :] = col_b
        elif variant == 3:
            glyph[:, ::2] = col_b
        order = list(rng.permutation(3))
        if style["copies"] < 3 and u(0, 1) < CENTER_BIAS and order[0] != 0:
            # The full-strength copy favors the center anchor; peripheral
            # anchors mostly carry echoes.
            order.remove(0)
            order.insert(0, 0)
        for k in range(style["copies"]):
            row0, col0 = style["pool"][style["layout"][order[k % 3]]]
            rr = int(np.clip(row0 + rng.integers(-1, 2), 0, IMAGE_HW - GLYPH_H))
            cc = int(np.clip(col0 + rng.integers(-1, 2), 0, IMAGE_HW - GLYPH_W))
            weight = 1.0 if (k == 0 or style["copies"] >= 3) else ECHO_WEIGHT
            region = img[rr : rr + GLYPH_H, cc : cc + GLYPH_W, :]
            img[rr : rr + GLYPH_H, cc : cc + GLYPH_W, :] = (1 - weight) * region + weight * glyph
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def _make_split(spec: TaskSpec, split: str, per_class: int) -> Dataset:
    images, labels = [], []
    for cls_idx, cls in enumerate(spec.classes):
        rng = Rng(derive_seed(spec.seed, f"{split}:{cls}"))
        images.append(_render_class(cls, per_class, rng))
        labels.extend([cls_idx] * per_class)
    return Dataset(
        images=np.concatenate(images, axis=0),
        labels=np.asarray(labels, dtype=np.int64),
        classes=list(spec.classes),
        split=split,
    )


def generate_task(spec: TaskSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Train/test/dev splits for one task; splits are disjoint by
    construction (each draws from its own random stream)."""
    train = _make_split(spec, "train", spec.train_per_class)
    test = _make_split(spec, "test", spec.test_per_class)
    k = len(spec.classes)
    per = -(-spec.dev_count // k)
    dev_full = _make_split(spec, "dev", per)
    # Round-robin over classes, then truncate so every task contributes
    # exactly dev_count held-out images.
    keep = np.asarray([c * per + j for j in range(per) for c in range(k)])[: spec.dev_count]
    dev = Dataset(dev_full.images[keep], dev_full.labels[keep], list(spec.classes), "dev")
    return train, test, dev


# ---------------------------------------------------------------------------
# Default experiment suite

_SINGLE_NAMES = (
    "lamp", "kite", "drum", "vase", "gate", "mask", "fern", "anchor",
    "wheel", "prism", "tile", "bell", "crate", "flag", "lens", "spool",
    "maple", "otter", "cello", "dune", "raft", "comet", "plume", "ingot",
    "gourd", "sled", "visor", "torch", "quill", "moss", "reed", "barge",
    "acorn", "sprig", "cairn", "ridge", "lagoon", "ember", "frost", "talon",
    "cove", "loom", "shard", "grove", "helm", "knoll", "pier", "vault",
    "wharf", "spire", "fjord", "heath", "mesa", "tarn", "atoll", "bluff",
    "glade", "butte", "scree", "swale", "arbor", "banyan", "copse", "holt",
    "awl", "bobbin", "chisel", "dowel", "easel", "funnel", "gimlet", "hasp",
    "jug", "kiln", "ladle", "mallet", "nib", "oar", "pulley", "quern",
    "rivet", "sickle", "trowel", "urn", "vane", "winch", "yoke", "zither",
    "basalt", "cinder", "dolmen", "eddy", "floe", "geyser", "hollow", "islet",
    "jetty", "karst", "levee", "marsh", "nook", "outcrop", "pinnacle", "quarry",
    "rill", "shoal", "thicket", "upland", "verge", "wadi", "yardang", "zephyr",
    "beacon", "caliper", "derrick", "eyelet", "ferrule", "gantry", "hopper", "jamb",
    "keel", "lintel", "mortise", "newel", "oculus", "pylon", "quoin", "rafter",
    "sconce", "tenon", "uprise", "volute", "windlass", "axle", "bollard", "cleat",
    "davit", "escutcheon", "fairlead", "gudgeon", "halyard", "inlay", "joist", "kingpin",
)
_FAMILY_MODIFIERS = (
    "amber", "cobalt", "crimson", "umber", "jade", "ivory", "onyx", "coral",
    "slate", "lilac", "rust", "teal", "fawn", "pearl", "olive", "plum",
    "sable", "ochre", "indigo", "maroon", "sepia", "viridian", "cerulean", "henna",
    "garnet", "citrine", "russet", "mauve", "saffron", "verdant", "ashen", "dusky",
)


def _circ_dist(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def _pick_spread_hues(candidates, count: int, taken=(), phase: float = 0.0):
    """Pick `count` names whose glyph hues land near evenly spaced targets,
    so every task gets a well-separated palette."""
    available = [(n, class_style(n)["hue"]) for n in candidates if n not in taken]
    chosen = []
    for j in range(count):
        target = (phase + j / count) % 1.0
        best = min(
            (pair for pair in available if pair[0] not in chosen),
            key=lambda pair: _circ_dist(pair[1], target),
            default=None,
        )
        if best is None:
            raise ContractError(f"could not assemble {count} hue-separated classes")
        chosen.append(best[0])
    return chosen


def _pick_distinct_hues(candidates, count: int, min_gap: float = 0.08, taken=(), seed_hues=()):
    """Greedy pick of class names whose glyph hues stay separated."""
    chosen, hues = [], list(seed_hues)
    for name in candidates:
        if name in taken or name in chosen:
            continue
        hue = class_style(name)["hue"]
        if any(min(abs(hue - h), 1 - abs(hue - h)) < min_gap for h in hues):
            continue
        chosen.append(name)
        hues.append(hue)
        if len(chosen) == count:
            return chosen
    raise ContractError(f"could not assemble {count} hue-separated classes")


def family_class_names(family: str, count: int, lead: str | None = None) -> list[str]:
    """Fine-grained class-name family '<modifier> <family>' with separated
    member hues; `lead` (e.g. the designated shared class) goes first."""
    candidates = [f"{m} {family}" for m in _FAMILY_MODIFIERS]
    lead_names = [lead] if lead else []
    lead_hues = [class_style(n)["hue"] for n in lead_names]
    rest = _pick_distinct_hues(
        candidates, count - len(lead_names), min_gap=0.02, taken=lead_names, seed_hues=lead_hues
    )
    return lead_names + rest


def default_task_suite(
    n_tasks: int = 6,
    classes_per_task: int = 10,
    seed: int = 2024,
    train_per_class: int = 100,
    test_per_class: int = 40,
    dev_count: int = 64,
    shared_class: str = "stop sign",
    shared_class_task: int = 1,
) -> list[TaskSpec]:
    """Task suite mirroring the default merge-six-tasks experiment.

    One benign task is a fine-grained family task built around the shared
    class name (a traffic-sign analogue), so off-task attacks have a target
    the adversary knows by name only. The remaining tasks draw single-word
    classes with well-separated hues.
    """
    specs = []
    taken: set[str] = set()
    for t in range(n_tasks):
        if t == shared_class_task and shared_class:
            family = shared_class.split()[-1]
            classes = family_class_names(family, classes_per_task, lead=shared_class)
        else:
            classes = _pick_spread_hues(_SINGLE_NAMES, classes_per_task, taken=taken, phase=t * 0.027)
        taken.update(classes)
        specs.append(
            TaskSpec(
                name=f"task{t}",
                classes=classes,
                seed=derive_seed(seed, f"task{t}"),
                train_per_class=train_per_class,
                test_per_class=test_per_class,
                dev_count=dev_count,
            )
        )
    return specs


def make_vocabulary(size: int = 500, seed: int = 31) -> list[str]:
    """Open-world name vocabulary for shadow-class sampling.

    Mixes single nouns, modifier-noun pairs, and family phrases so sampled
    shadow classes include names wordwise-related to task classes, the way
    a real vocabulary overlaps deployed label sets.
    """
    pool = list(_SINGLE_NAMES)
    pool += [f"{m} {n}" for m in _FAMILY_MODIFIERS for n in _SINGLE_NAMES[:16]]
    pool += [f"{n} sign" for n in _SINGLE_NAMES]
    pool += [f"{m} sign" for m in _FAMILY_MODIFIERS]
    pool += [f"{n} gate" for n in _SINGLE_NAMES[:32]]
    pool += [f"{m} {n} sign" for m in _FAMILY_MODIFIERS[:8] for n in _SINGLE_NAMES[:16]]
    order = Rng(seed).permutation(len(pool))
    if size > len(pool):
        raise ContractError(f"vocabulary pool holds {len(pool)} names, requested {size}")
    return [pool[i] for i in order[:size]]


def save_vocabulary(path, names) -> None:
    Path(path).write_text("\n".join(names) + "\n", encoding="utf-8")


def load_vocabulary(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


# ---------------------------------------------------------------------------
# TDST dataset files


def save_dataset(path, ds: Dataset) -> None:
    """Write a dataset in TDST format (f32 LE images, u16 LE labels)."""
    blob = bytearray()
    blob += MAGIC
    n, h, w, c = ds.images.shape
    blob += struct.pack("<II", VERSION, n)
    blob += struct.pack("<HHH", h, w, c)
    blob += struct.pack("<B", 0)  # dtype code 0 = float32
    blob += struct.pack("<I", len(ds.classes))
    for name in ds.classes:
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc))
        blob += enc
    blob += np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(ds.labels, dtype="<u2").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_dataset(path, split: str = "") -> Dataset:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(
                f"truncated file at offset {pos}: expected {n} more bytes for "
                f"{what}, found {len(data) - pos}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic at offset 0: expected {MAGIC!r}, got {magic!r}")
    version, n = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4 (expected {VERSION})")
    h, w, c = struct.unpack("<HHH", take(6, "image dims"))
    (dtype_code,) = struct.unpack("<B", take(1, "dtype"))
    if dtype_code != 0:
        raise FormatError(f"unknown dtype code {dtype_code}")
    (k,) = struct.unpack("<I", take(4, "class count"))
    classes = []
    for i in range(k):
        (name_len,) = struct.unpack("<I", take(4, f"class {i} name length"))
        classes.append(take(name_len, f"class {i} name").decode("utf-8"))
    images = np.frombuffer(take(n * h * w * c * 4, "image payload"), dtype="<f4").reshape(n, h, w, c).copy()
    labels = np.frombuffer(take(n * 2, "label payload"), dtype="<u2").astype(np.int64)
    if pos != len(data):
        raise FormatError(f"trailing bytes at offset {pos}: file is {len(data)} bytes")
    return Dataset(images=images, labels=labels, classes=classes, split=split)
