"""MIL data model, synthetic bag generation, merging, splitting and survival pairs."""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, FormatError


# -- labels -----------------------------------------------------------------
@dataclass(frozen=True)
class ClassLabel:
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ContractError(f"class id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class SurvivalLabel:
    time: float
    censored: bool

    def __post_init__(self):
        if not self.time > 0:
            raise ContractError(f"survival time must be positive, got {self.time}")


BagLabel = ClassLabel | SurvivalLabel


def label_to_json(label: BagLabel) -> dict:
    if isinstance(label, ClassLabel):
        return {"kind": "class", "class": label.class_id}
    return {"kind": "survival", "time": label.time, "censored": label.censored}


def label_from_json(obj: dict) -> BagLabel:
    if obj["kind"] == "class":
        return ClassLabel(int(obj["class"]))
    if obj["kind"] == "survival":
        return SurvivalLabel(float(obj["time"]), bool(obj["censored"]))
    raise FormatError(f"unknown label kind {obj['kind']!r}")


class Assumption(str, enum.Enum):
    STANDARD = "standard"
    MUTUALLY_EXCLUSIVE = "mutually_exclusive"
    ACCUMULATIVE = "accumulative"


# -- containers -------------------------------------------------------------
@dataclass(frozen=True)
class Instance:
    id: str
    pixels: np.ndarray
    true_label: int | None = None
    propagated_label: BagLabel | None = None


@dataclass(frozen=True)
class Bag:
    id: str
    instance_ids: tuple[str, ...]
    label: BagLabel
    true_instance_risks: tuple[float, ...] | None = None
    source: str = ""

    def __post_init__(self):
        if not self.instance_ids:
            raise ContractError(f"bag {self.id} has no instances")


class InstanceStore:
    """Row-major pixel storage keyed by instance id.

    ``true_labels`` holds generator ground truth (or ``None`` when withheld);
    reading it through :meth:`true_label` on a withheld store raises.
    """

    def __init__(self, ids: Sequence[str], pixels: np.ndarray, true_labels: np.ndarray | None = None):
        if len(ids) != len(pixels):
            raise ContractError("instance ids and pixel rows differ in length")
        self.ids = list(ids)
        self.pixels = np.asarray(pixels, dtype=np.float32)
        self.true_labels = None if true_labels is None else np.asarray(true_labels, dtype=np.int64)
        self.index = {iid: i for i, iid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ContractError("duplicate instance ids")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, iid: str) -> bool:
        return iid in self.index

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self.index[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"unknown instance id {exc.args[0]!r}") from None

    def true_label(self, iid: str) -> int:
        if self.true_labels is None:
            raise ContractError("true instance labels are withheld for this dataset")
        return int(self.true_labels[self.index[iid]])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])


@dataclass(frozen=True)
class MILDataset:
    bags: tuple[Bag, ...]
    instances: InstanceStore
    class_names: tuple[str, ...]
    assumption: Assumption
    provenance: dict = field(default_factory=dict)
    propagated: dict | None = None
    risk_proxy: dict | None = None

    def __post_init__(self):
        for bag in self.bags:
            if isinstance(bag.label, ClassLabel) and bag.label.class_id >= len(self.class_names):
                raise ContractError(f"bag {bag.id}: class {bag.label.class_id} >= {len(self.class_names)}")
            for iid in bag.instance_ids:
                if iid not in self.instances:
                    raise ContractError(f"bag {bag.id} references unknown instance {iid}")

    @property
    def is_survival(self) -> bool:
        return any(isinstance(b.label, SurvivalLabel) for b in self.bags)

    def instance(self, iid: str) -> Instance:
        row = self.instances.index[iid]
        true = None if self.instances.true_labels is None else int(self.instances.true_labels[row])
        prop = None if self.propagated is None else self.propagated.get(iid)
        return Instance(iid, self.instances.pixels[row], true, prop)

    def without_truth(self) -> "MILDataset":
        store = InstanceStore(self.instances.ids, self.instances.pixels, None)
        bags = tuple(replace(b, true_instance_risks=None) for b in self.bags)
        return replace(self, bags=bags, instances=store)

    def subset(self, bag_ids: Iterable[str]) -> "MILDataset":
        wanted = list(bag_ids)
        by_id = {b.id: b for b in self.bags}
        bags = tuple(by_id[b] for b in wanted)
        return replace(self, bags=bags)

    def bag_instance_rows(self) -> list[np.ndarray]:
        return [self.instances.rows(b.instance_ids) for b in self.bags]


# -- MIL assumptions --------------------------------------------------------
def bag_label_standard(instance_labels: Sequence[int]) -> int:
    """Bag is 0 iff every instance label is 0, else 1."""
    if len(instance_labels) == 0:
        raise ContractError("bag_label_standard needs at least one instance label")
    return 0 if sum(int(y) for y in instance_labels) == 0 else 1


def bag_risk_accumulative(instance_risks: Sequence[float]) -> float:
    """Accumulated bag risk: the sum of non-negative instance risks."""
    total = 0.0
    for r in instance_risks:
        if r < 0:
            raise ContractError(f"instance risk must be non-negative, got {r}")
        total += float(r)
    return total


def propagate_labels(dataset: MILDataset) -> MILDataset:
    """Copy each bag's label to its instances; survival instances also get a risk share.

    The survival risk proxy of a bag is one minus its normalised time rank
    (shortest time -> 1), split evenly across the bag's instances.
    """
    propagated: dict[str, BagLabel] = {}
    risk: dict[str, float] = {}
    bag_risk = {}
    surv = [b for b in dataset.bags if isinstance(b.label, SurvivalLabel)]
    if surv:
        times = np.array([b.label.time for b in surv])
        order = np.argsort(times, kind="stable")
        rank = np.empty(len(surv))
        rank[order] = np.arange(len(surv))
        norm = rank / max(len(surv) - 1, 1)
        bag_risk = {b.id: 1.0 - float(n) for b, n in zip(surv, norm)}
    for bag in dataset.bags:
        if bag.label is None:
            raise ContractError(f"bag {bag.id} has no label")
        for iid in bag.instance_ids:
            if iid not in dataset.instances:
                raise ContractError(f"orphan instance {iid} in bag {bag.id}")
            propagated[iid] = bag.label
            if bag.id in bag_risk:
                risk[iid] = bag_risk[bag.id] / len(bag.instance_ids)
    return replace(dataset, propagated=propagated, risk_proxy=risk or None)


# -- synthetic generator ----------------------------------------------------
# Nine procedural texture classes: grating frequency (cycles/pixel) x orientation.
TEXTURE_FREQS = (0.07, 0.13, 0.22)
TEXTURE_ANGLES = (0.0, math.pi / 3, 2 * math.pi / 3)
NOISE_SIGMAS = (0.6, 1.2, 2.4)


def texture_params(class_id: int) -> tuple[float, float, float]:
    """(frequency, orientation, noise blur sigma) for a texture class."""
    freq = TEXTURE_FREQS[(class_id // 3) % 3] * (1.0 + 0.5 * (class_id // 9))
    angle = TEXTURE_ANGLES[class_id % 3] + (math.pi / 6) * (class_id // 9)
    sigma = NOISE_SIGMAS[(class_id + class_id // 3) % 3]
    return freq, angle, sigma


def render_textures(classes: np.ndarray, rng: np.random.Generator, resolution: int = 32,
                    channels: int = 3, nuisance: float = 1.0, chunk: int = 2048) -> np.ndarray:
    """Render one H x W x C patch in [0, 1] per entry of ``classes``.

    Class identity lives only in the spatial pattern (grating frequency,
    orientation and noise spectrum); stain colours and brightness are
    per-instance nuisances scaled by ``nuisance``.
    """
    classes = np.asarray(classes, dtype=np.int64)
    out = np.empty((len(classes), resolution, resolution, channels), dtype=np.float32)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    dark = np.array([0.45, 0.20, 0.55])
    light = np.array([0.95, 0.75, 0.85])
    for start in range(0, len(classes), chunk):
        cls = classes[start:start + chunk]
        n = len(cls)
        params = np.array([texture_params(int(c)) for c in cls]).reshape(n, 3)
        freq = params[:, 0] * rng.uniform(0.92, 1.08, n)
        theta = params[:, 1] + rng.uniform(-0.12, 0.12, n)
        phase = rng.uniform(0, 2 * math.pi, n)
        amp = rng.uniform(0.25, 0.4, n)
        raw = rng.standard_normal((n, resolution, resolution))
        d_dark = rng.uniform(-0.2, 0.2, (n, 3)) * nuisance
        d_light = rng.uniform(-0.15, 0.15, (n, 3)) * nuisance
        bright = 1.0 + rng.uniform(-0.25, 0.15, n) * nuisance
        proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
        s = amp[:, None, None] * np.sin(2 * math.pi * freq[:, None, None] * proj + phase[:, None, None])
        noise = np.empty_like(raw)
        for sig in np.unique(params[:, 2]):
            sel = params[:, 2] == sig
            blurred = gaussian_filter(raw[sel], sigma=(0, sig, sig), mode="wrap")
            blurred /= blurred.std(axis=(1, 2), keepdims=True) + 1e-12
            noise[sel] = blurred
        t = np.clip(0.5 + s + 0.12 * noise, 0.0, 1.0)
        if channels == 3:
            c_dark = np.clip(dark + d_dark, 0, 1)[:, None, None, :]
            c_light = np.clip(light + d_light, 0, 1)[:, None, None, :]
            img = c_dark * t[..., None] + c_light * (1 - t[..., None])
        else:
            img = np.repeat((1 - t)[..., None], channels, axis=-1)
        img = img * bright[:, None, None, None]
        out[start:start + n] = np.clip(img, 0.0, 1.0)
    return out


@dataclass(frozen=True)
class GeneratorConfig:
    assumption: Assumption = Assumption.STANDARD
    num_classes: int = 9
    positive_classes: tuple[int, ...] = (0,)
    bag_size: int = 50
    num_bags: int = 100
    positive_bag_fraction: float = 0.5
    pos_ratio_min: float = 0.05
    pos_ratio_max: float = 0.2
    resolution: int = 32
    channels: int = 3
    nuisance: float = 1.0
    pool_size: int | None = None
    # survival
    risk_weights: tuple[float, ...] = (1.0, 0.5)
    risk_ratio_max: float = 0.5
    time_scale: float = 10.0
    risk_slope: float = 0.2
    time_noise: float = 0.1
    censor_rate: float = 0.2
    id_prefix: str = ""
    render: bool = True


def _compose_bags(gen: GeneratorConfig, rng: np.random.Generator):
    """Decide each bag's slot classes and label; no pixels yet."""
    negatives = [c for c in range(gen.num_classes) if c not in gen.positive_classes]
    if not negatives:
        raise ContractError("generator needs at least one negative class")
    compositions, labels, risks = [], [], []
    n = gen.bag_size
    for _ in range(gen.num_bags):
        if gen.assumption == Assumption.ACCUMULATIVE:
            weights = {c: w for c, w in zip(gen.positive_classes, gen.risk_weights)}
            k = int(rng.integers(0, int(round(gen.risk_ratio_max * n)) + 1))
            risky = rng.choice(list(weights), size=k) if k else np.zeros(0, dtype=np.int64)
            slots = np.concatenate([risky, rng.choice(negatives, size=n - k)]).astype(np.int64)
            slots = slots[rng.permutation(n)]
            inst_risk = np.array([weights.get(int(c), 0.0) for c in slots])
            bag_risk = bag_risk_accumulative(inst_risk)
            t = gen.time_scale * math.exp(-gen.risk_slope * bag_risk) * math.exp(gen.time_noise * rng.standard_normal())
            censored = bool(rng.random() < gen.censor_rate)
            if censored:
                t *= rng.uniform(0.3, 1.0)
            compositions.append(slots)
            labels.append(SurvivalLabel(float(t), censored))
            risks.append(tuple(float(r) for r in inst_risk))
            continue
        if gen.assumption == Assumption.MUTUALLY_EXCLUSIVE:
            sub = int(rng.integers(0, len(gen.positive_classes)))
            pos_class = gen.positive_classes[sub]
            ratio = rng.uniform(gen.pos_ratio_min, gen.pos_ratio_max)
            k = max(1, int(round(ratio * n)))
            label = sub
        else:
            positive = rng.random() < gen.positive_bag_fraction and gen.pos_ratio_max > 0
            ratio = rng.uniform(gen.pos_ratio_min, gen.pos_ratio_max)
            k = max(1, int(round(ratio * n))) if positive else 0
            pos_class = None
        pos = rng.choice(list(gen.positive_classes), size=k) if gen.assumption == Assumption.STANDARD and k \
            else np.full(k, pos_class if k else 0, dtype=np.int64)
        slots = np.concatenate([pos, rng.choice(negatives, size=n - k)]).astype(np.int64)
        slots = slots[rng.permutation(n)]
        if gen.assumption == Assumption.STANDARD:
            label = bag_label_standard([int(c in gen.positive_classes) for c in slots])
        compositions.append(slots)
        labels.append(ClassLabel(label))
        risks.append(None)
    return compositions, labels, risks


def synthesize_bags(gen: GeneratorConfig, seed: int) -> MILDataset:
    """Generate a synthetic MIL dataset.

    Every bag draws ``bag_size`` distinct instances from a freshly rendered
    pool, so no instance is shared between bags.
    """
    total = gen.num_bags * gen.bag_size
    if gen.pool_size is not None and (gen.bag_size > gen.pool_size or total > gen.pool_size):
        raise ContractError(f"need {total} instances (bag size {gen.bag_size}) but pool holds {gen.pool_size}")
    if gen.bag_size < 1:
        raise ContractError("bag size must be positive")
    rng = np.random.default_rng(seed)
    compositions, labels, risks = _compose_bags(gen, rng)
    classes = np.concatenate(compositions) if compositions else np.zeros(0, dtype=np.int64)
    if gen.render:
        pixels = render_textures(classes, rng, gen.resolution, gen.channels, gen.nuisance)
    else:
        pixels = np.zeros((len(classes), 1, 1, gen.channels), dtype=np.float32)
    pre = gen.id_prefix
    ids = [f"{pre}i{j:07d}" for j in range(len(classes))]
    bags = []
    for b, (slots, label, rk) in enumerate(zip(compositions, labels, risks)):
        start = b * gen.bag_size
        bags.append(Bag(f"{pre}b{b:05d}", tuple(ids[start:start + len(slots)]), label, rk, source="synthetic"))
    if gen.assumption == Assumption.STANDARD:
        names = ("negative", "positive")
    elif gen.assumption == Assumption.MUTUALLY_EXCLUSIVE:
        names = tuple(f"subtype{c}" for c in gen.positive_classes)
    else:
        names = ()
    prov = {"generator": _gen_to_json(gen), "seed": seed}
    return MILDataset(tuple(bags), InstanceStore(ids, pixels, classes), names, gen.assumption, prov)


def _gen_to_json(gen: GeneratorConfig) -> dict:
    d = {}
    for k, v in gen.__dict__.items():
        d[k] = v.value if isinstance(v, Assumption) else (list(v) if isinstance(v, tuple) else v)
    return d


def instance_binary_labels(dataset: MILDataset, positive_classes: Sequence[int]) -> np.ndarray:
    """Ground-truth positive/negative flag per stored instance (evaluation only)."""
    if dataset.instances.true_labels is None:
        raise ContractError("true instance labels are withheld for this dataset")
    return np.isin(dataset.instances.true_labels, list(positive_classes)).astype(np.int64)


# -- merging / splitting ----------------------------------------------------
def merge_datasets(datasets: Sequence[MILDataset], names: Sequence[str] | None = None) -> MILDataset:
    """Union of class-labelled datasets with disjoint, namespaced class sets."""
    if not datasets:
        raise ContractError("merge_datasets needs at least one dataset")
    if any(ds.is_survival for ds in datasets):
        raise ContractError("cannot merge survival datasets into a class space")
    names = list(names) if names is not None else [f"ds{j}" for j in range(len(datasets))]
    class_names, bags, ids, pix, truth = [], [], [], [], []
    have_truth = all(ds.instances.true_labels is not None for ds in datasets)
    offset = 0
    for name, ds in zip(names, datasets):
        class_names += [f"{name}:{c}" for c in ds.class_names]
        for bag in ds.bags:
            bags.append(Bag(f"{name}/{bag.id}", tuple(f"{name}/{i}" for i in bag.instance_ids),
                            ClassLabel(bag.label.class_id + offset), bag.true_instance_risks, source=name))
        ids += [f"{name}/{i}" for i in ds.instances.ids]
        pix.append(ds.instances.pixels)
        if have_truth:
            truth.append(ds.instances.true_labels)
        offset += len(ds.class_names)
    store = InstanceStore(ids, np.concatenate(pix), np.concatenate(truth) if have_truth else None)
    prov = {"merged": [{"name": n, "provenance": ds.provenance, "classes": len(ds.class_names)}
                       for n, ds in zip(names, datasets)]}
    return MILDataset(tuple(bags), store, tuple(class_names), Assumption.MUTUALLY_EXCLUSIVE, prov)


@dataclass(frozen=True)
class Holdout:
    train_fraction: float = 0.8


@dataclass(frozen=True)
class KFold:
    k: int
    fold: int


def split(dataset: MILDataset, mode: Holdout | KFold, seed: int) -> tuple[MILDataset, MILDataset]:
    """Bag-level train/test partition, deterministic per seed."""
    n = len(dataset.bags)
    perm = np.random.default_rng(seed).permutation(n)
    if isinstance(mode, Holdout):
        if not 0 < mode.train_fraction < 1:
            raise ContractError("train_fraction must lie in (0, 1)")
        cut = int(round(mode.train_fraction * n))
        train_idx, test_idx = perm[:cut], perm[cut:]
    else:
        if mode.k > n or mode.k < 2:
            raise ContractError(f"k={mode.k} folds invalid for {n} bags")
        if not 0 <= mode.fold < mode.k:
            raise ContractError(f"fold {mode.fold} outside [0, {mode.k})")
        folds = np.array_split(perm, mode.k)
        test_idx = folds[mode.fold]
        train_idx = np.concatenate([f for i, f in enumerate(folds) if i != mode.fold])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    ids = [b.id for b in dataset.bags]
    return dataset.subset(ids[i] for i in train_idx), dataset.subset(ids[i] for i in test_idx)


# -- survival pairs ---------------------------------------------------------
def comparable_pair_indices(times: np.ndarray, censored: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (a, b) with t_a < t_b and a uncensored; a is the higher-risk member."""
    times = np.asarray(times, dtype=np.float64)
    event = ~np.asarray(censored, dtype=bool)
    mask = (times[:, None] < times[None, :]) & event[:, None]
    a, b = np.nonzero(mask)
    return a, b


def comparable_pairs(batch: Sequence[SurvivalLabel | Instance]) -> list[tuple[int, int]]:
    labels = [x.propagated_label if isinstance(x, Instance) else x for x in batch]
    if any(not isinstance(lb, SurvivalLabel) for lb in labels):
        raise ContractError("comparable_pairs needs survival labels on every instance")
    a, b = comparable_pair_indices(np.array([lb.time for lb in labels]),
                                   np.array([lb.censored for lb in labels]))
    return list(zip(a.tolist(), b.tolist()))


# -- on-disk formats --------------------------------------------------------
SMIX_MAGIC = b"SMIX"
SMIX_VERSION = 1


def write_instances(store: InstanceStore, path) -> None:
    n, h, w, c = store.pixels.shape
    with open(path, "wb") as fh:
        fh.write(SMIX_MAGIC + struct.pack("<IIHHB", SMIX_VERSION, n, h, w, c))
        for iid, px in zip(store.ids, store.pixels):
            raw = iid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(np.ascontiguousarray(px, dtype="<f4").tobytes())


def read_instances(path, true_labels: dict | None = None) -> InstanceStore:
    buf = Path(path).read_bytes()
    if buf[:4] != SMIX_MAGIC:
        raise FormatError(f"{path}: bad instance-store magic {buf[:4]!r}")
    try:
        version, n, h, w, c = struct.unpack_from("<IIHHB", buf, 4)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if version != SMIX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<IIHHB")
    size = h * w * c
    ids, pix = [], np.empty((n, h, w, c), dtype=np.float32)
    for i in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        ids.append(buf[off:off + ln].decode("utf-8"))
        off += ln
        if off + 4 * size > len(buf):
            raise FormatError(f"{path}: truncated pixel payload")
        pix[i] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(h, w, c)
        off += 4 * size
    truth = None
    if true_labels is not None:
        truth = np.array([true_labels[i] for i in ids], dtype=np.int64)
    return InstanceStore(ids, pix, truth)


def write_dataset(dataset: MILDataset, directory) -> Path:
    """Write ``bags.jsonl``, ``instances.smix``, ``dataset.json`` and (if known) ``truth.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "bags.jsonl", "w", encoding="utf-8") as fh:
        for bag in dataset.bags:
            fh.write(json.dumps({"bag_id": bag.id, "label": label_to_json(bag.label),
                                 "instances": list(bag.instance_ids), "source": bag.source},
                                sort_keys=True) + "\n")
    write_instances(dataset.instances, d / "instances.smix")
    meta = {"class_names": list(dataset.class_names), "assumption": dataset.assumption.value,
            "provenance": dataset.provenance}
    (d / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    if dataset.instances.true_labels is not None:
        truth = {"instances": dict(zip(dataset.instances.ids, dataset.instances.true_labels.tolist())),
                 "bag_risks": {b.id: list(b.true_instance_risks) for b in dataset.bags
                               if b.true_instance_risks is not None}}
        (d / "truth.json").write_text(json.dumps(truth, sort_keys=True), encoding="utf-8")
    return d


def read_dataset(directory, with_truth: bool = True) -> MILDataset:
    d = Path(directory)
    meta = json.loads((d / "dataset.json").read_text(encoding="utf-8"))
    truth = None
    if with_truth and (d / "truth.json").exists():
        truth = json.loads((d / "truth.json").read_text(encoding="utf-8"))
    store = read_instances(d / "instances.smix", truth["instances"] if truth else None)
    bags = []
    with open(d / "bags.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            risks = truth["bag_risks"].get(obj["bag_id"]) if truth else None
            bags.append(Bag(obj["bag_id"], tuple(obj["instances"]), label_from_json(obj["label"]),
                            tuple(risks) if risks is not None else None, obj.get("source", "")))
    return MILDataset(tuple(bags), store, tuple(meta["class_names"]), Assumption(meta["assumption"]),
                      meta.get("provenance", {}))
