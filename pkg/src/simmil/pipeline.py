"""Pretraining flows, feature caching, downstream aggregator training and evaluation."""

from __future__ import annotations

import logging
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .augment import augment_batch
from .bags import (
    ClassLabel,
    MILDataset,
    SurvivalLabel,
    comparable_pair_indices,
    propagate_labels,
    synthesize_bags,
)
from .config import ExperimentConfig
from .errors import ContractError, FormatError
from .losses import (
    assign_bins,
    ce_loss,
    nt_xent,
    ranking_loss,
    sce_loss,
    survival_nll,
    survival_risk,
    time_bins,
)
from .metrics import Report, accuracy, c_index, roc_auc_multiclass
from .models import Extractor, Network, PredictionHead, build_aggregator
from .numeric import (
    AdamKind,
    CosineSchedule,
    F,
    Linear,
    Optimizer,
    SGDMomentum,
    StepSchedule,
    Tensor,
    schedule_lr,
)
from .numeric.checkpoint import Checkpoint, fingerprint_of

log = logging.getLogger(__name__)


# -- networks and checkpoints ----------------------------------------------
def head_outputs(cfg: ExperimentConfig, dataset: MILDataset | None = None) -> int:
    if cfg.experiment.method == "contrastive":
        return cfg.model.proj_dim
    if cfg.experiment.method == "simmil_survival" or cfg.experiment.task == "survival":
        return 1
    if dataset is not None and dataset.class_names:
        return len(dataset.class_names)
    if cfg.experiment.task == "subtyping":
        return len(cfg.data.positive_classes)
    return 2


def build_network(cfg: ExperimentConfig, out: int) -> Network:
    rng = np.random.default_rng([cfg.seed, 101])
    ext = Extractor(cfg.model.widths, cfg.data.channels, rng)
    head = PredictionHead(ext.dim, out, cfg.model.head_hidden, rng)
    return Network(ext, head)


def make_checkpoint(net: Network, cfg: ExperimentConfig, **diagnostics) -> Checkpoint:
    text = cfg.canonical()
    params = OrderedDict((k, np.array(v, dtype=np.float32, copy=True)) for k, v in net.state_dict().items())
    return Checkpoint(params, fingerprint_of(text), text, diagnostics)


def _load_into(net: Network, ckpt: Checkpoint) -> None:
    own = net.state_dict()
    theirs = ckpt.params
    if list(own) != list(theirs) or any(own[k].shape != theirs[k].shape for k in own):
        raise ContractError("checkpoint architecture does not match the configured network")
    net.load_state_dict(theirs)


def extractor_from_checkpoint(ckpt: Checkpoint) -> Extractor:
    """Rebuild the extractor from parameter shapes alone (head entries are ignored)."""
    widths, cin = [], None
    i = 0
    while f"extractor.convs.{i}.weight" in ckpt.params:
        w = ckpt.params[f"extractor.convs.{i}.weight"]
        widths.append(w.shape[0])
        cin = w.shape[1] if cin is None else cin
        i += 1
    if not widths:
        raise ContractError("checkpoint holds no extractor parameters")
    ext = Extractor(widths, cin, np.random.default_rng(0))
    state = OrderedDict((k[len("extractor."):], v) for k, v in ckpt.params.items() if k.startswith("extractor."))
    ext.load_state_dict(state)
    return ext


# -- batching helpers -------------------------------------------------------
def _chunks(idx: np.ndarray, size: int, drop_small: int = 0):
    for s in range(0, len(idx), size):
        part = idx[s:s + size]
        if len(part) > drop_small:
            yield part


def _views(pixels: np.ndarray, ids: list[str], cfg: ExperimentConfig, epoch: int, view: int = 0) -> np.ndarray:
    if not cfg.augment.enabled:
        return pixels
    policy = cfg.policy()
    workers = config_mod.worker_count()
    if workers <= 1 or len(pixels) < 2 * workers:
        return augment_batch(pixels, ids, policy, cfg.seed, epoch, view)
    parts = np.array_split(np.arange(len(pixels)), workers)
    with ThreadPoolExecutor(workers) as pool:
        outs = pool.map(lambda p: augment_batch(pixels[p], [ids[i] for i in p], policy, cfg.seed, epoch, view), parts)
        return np.concatenate(list(outs))


def _schedule(cfg: ExperimentConfig):
    if cfg.schedule.kind == "cosine":
        return CosineSchedule(cfg.train.epochs)
    if cfg.schedule.kind == "step":
        return StepSchedule(cfg.schedule.milestones, cfg.schedule.gamma, cfg.train.epochs)
    raise ContractError(f"unknown schedule {cfg.schedule.kind!r}")


def _optimizer(cfg: ExperimentConfig, params) -> Optimizer:
    o = cfg.optim
    if o.kind == "sgd":
        return Optimizer(params, SGDMomentum(o.lr, o.momentum, o.weight_decay))
    if o.kind == "adam":
        return Optimizer(params, AdamKind(o.lr, weight_decay=o.weight_decay))
    raise ContractError(f"unknown optimizer {o.kind!r}")


def _instance_table(ds: MILDataset):
    rows, ids = [], []
    for bag in ds.bags:
        rows.extend(ds.instances.rows(bag.instance_ids))
        ids.extend(bag.instance_ids)
    return np.asarray(rows, dtype=np.int64), ids


# -- pretraining ------------------------------------------------------------
def _train_classifier(cfg: ExperimentConfig, ds: MILDataset, net: Network) -> list[float]:
    rows, ids = _instance_table(ds)
    labels = np.array([ds.propagated[i].class_id for i in ids], dtype=np.int64)
    pixels = ds.instances.pixels
    opt = _optimizer(cfg, net.parameters())
    sched = _schedule(cfg)
    lc = cfg.loss_config()
    if lc.kind not in ("sce", "ce"):
        raise ContractError(f"label-propagation pretraining needs ce or sce loss, got {lc.kind}")
    history = []
    net.train()
    for epoch in range(cfg.train.epochs):
        opt.lr = schedule_lr(sched, cfg.optim.lr, epoch)
        order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(rows))
        if cfg.train.instances_per_epoch:
            order = order[:cfg.train.instances_per_epoch]
        total, count = 0.0, 0
        for batch in _chunks(order, cfg.optim.batch_size, drop_small=1):
            x = _views(pixels[rows[batch]], [ids[i] for i in batch], cfg, epoch)
            logits = net(x)
            if lc.kind == "sce":
                loss = sce_loss(logits, labels[batch], lc.alpha, lc.beta, lc.A)
            else:
                loss = ce_loss(logits, labels[batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(batch)
            count += len(batch)
        history.append(total / max(count, 1))
        log.info("epoch %d lr %.2e loss %.4f", epoch, opt.lr, history[-1])
    return history


def pretrain_simmil(cfg: ExperimentConfig, dataset: MILDataset) -> Checkpoint:
    """Label-propagation pretraining of extractor + head with SCE or CE."""
    if dataset.is_survival:
        raise ContractError("survival dataset: use pretrain_simmil_survival")
    ds = propagate_labels(dataset)
    net = build_network(cfg, head_outputs(cfg, ds))
    history = _train_classifier(cfg, ds, net)
    return make_checkpoint(net, cfg, loss_history=history)


def continue_pretrain(ckpt: Checkpoint, cfg: ExperimentConfig, dataset: MILDataset) -> Checkpoint:
    """Resume label-propagation training from ``ckpt`` with a fresh optimizer."""
    if dataset.is_survival:
        raise ContractError("survival dataset: continuation supports class-labelled data only")
    cfg = cfg.with_values(train={"parent": ckpt.fingerprint.hex()})
    ds = propagate_labels(dataset)
    net = build_network(cfg, head_outputs(cfg, ds))
    _load_into(net, ckpt)
    history = _train_classifier(cfg, ds, net)
    return make_checkpoint(net, cfg, loss_history=history, parent=ckpt.fingerprint.hex())


def pretrain_simmil_survival(cfg: ExperimentConfig, dataset: MILDataset) -> Checkpoint:
    """Ranking-loss pretraining on comparable pairs drawn from each batch."""
    if not dataset.is_survival:
        raise ContractError("pretrain_simmil_survival needs a survival-labelled dataset")
    ds = propagate_labels(dataset)
    rows, ids = _instance_table(ds)
    times = np.array([ds.propagated[i].time for i in ids])
    cens = np.array([ds.propagated[i].censored for i in ids])
    net = build_network(cfg, 1)
    opt = _optimizer(cfg, net.parameters())
    sched = _schedule(cfg)
    pixels = ds.instances.pixels
    history, skipped, batches = [], 0, 0
    net.train()
    for epoch in range(cfg.train.epochs):
        opt.lr = schedule_lr(sched, cfg.optim.lr, epoch)
        order = np.random.default_rng([cfg.seed, epoch, 11]).permutation(len(rows))
        if cfg.train.instances_per_epoch:
            order = order[:cfg.train.instances_per_epoch]
        total, count = 0.0, 0
        for batch in _chunks(order, cfg.optim.batch_size, drop_small=1):
            batches += 1
            a, b = comparable_pair_indices(times[batch], cens[batch])
            if len(a) == 0:
                skipped += 1
                continue
            x = _views(pixels[rows[batch]], [ids[i] for i in batch], cfg, epoch)
            scores = net(x).reshape(-1)
            loss = ranking_loss(scores[a], scores[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
            count += 1
        history.append(total / max(count, 1))
        log.info("epoch %d lr %.2e rank-loss %.4f", epoch, opt.lr, history[-1])
    return make_checkpoint(net, cfg, loss_history=history, skipped_batches=skipped, batches=batches)


def pretrain_contrastive(cfg: ExperimentConfig, dataset: MILDataset) -> Checkpoint:
    """Two augmented views per instance, NT-Xent objective (label-free baseline)."""
    if cfg.optim.batch_size < 2:
        raise ContractError("contrastive pretraining needs batch size >= 2")
    cfg = cfg.with_values(experiment={"method": "contrastive"})
    rows, ids = _instance_table(dataset)
    net = build_network(cfg, cfg.model.proj_dim)
    opt = _optimizer(cfg, net.parameters())
    sched = _schedule(cfg)
    pixels = dataset.instances.pixels
    history = []
    net.train()
    for epoch in range(cfg.train.epochs):
        opt.lr = schedule_lr(sched, cfg.optim.lr, epoch)
        order = np.random.default_rng([cfg.seed, epoch, 13]).permutation(len(rows))
        if cfg.train.instances_per_epoch:
            order = order[:cfg.train.instances_per_epoch]
        total, count = 0.0, 0
        for batch in _chunks(order, cfg.optim.batch_size, drop_small=1):
            px = pixels[rows[batch]]
            bid = [ids[i] for i in batch]
            x = np.concatenate([_views(px, bid, cfg, epoch, 0), _views(px, bid, cfg, epoch, 1)])
            loss = nt_xent(net(x), cfg.loss.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
            count += 1
        history.append(total / max(count, 1))
        log.info("epoch %d lr %.2e nt-xent %.4f", epoch, opt.lr, history[-1])
    return make_checkpoint(net, cfg, loss_history=history)


def random_checkpoint(cfg: ExperimentConfig, dataset: MILDataset | None = None) -> Checkpoint:
    """The untrained initialisation used as the frozen-random baseline."""
    cfg = cfg.with_values(experiment={"method": "random"}, train={"epochs": 0})
    net = build_network(cfg, head_outputs(cfg, dataset))
    return make_checkpoint(net, cfg)


# -- feature cache ----------------------------------------------------------
SMFC_MAGIC = b"SMFC"
SMFC_VERSION = 1


@dataclass
class CachedBag:
    id: str
    label: ClassLabel | SurvivalLabel
    features: np.ndarray


@dataclass
class FeatureCache:
    fingerprint: bytes
    dim: int
    bags: list[CachedBag] = field(default_factory=list)

    @property
    def is_survival(self) -> bool:
        return any(isinstance(b.label, SurvivalLabel) for b in self.bags)

    def to_bytes(self) -> bytes:
        out = [SMFC_MAGIC, struct.pack("<I", SMFC_VERSION), self.fingerprint,
               struct.pack("<II", self.dim, len(self.bags))]
        for bag in self.bags:
            raw = bag.id.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
            if isinstance(bag.label, ClassLabel):
                out.append(struct.pack("<BI", 0, bag.label.class_id))
            else:
                out.append(struct.pack("<BfB", 1, bag.label.time, int(bag.label.censored)))
            feats = np.ascontiguousarray(bag.features, dtype="<f4")
            out.append(struct.pack("<I", feats.shape[0]))
            out.append(feats.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FeatureCache":
        if buf[:4] != SMFC_MAGIC:
            raise FormatError(f"bad feature-cache magic {buf[:4]!r}")
        try:
            (version,) = struct.unpack_from("<I", buf, 4)
            if version != SMFC_VERSION:
                raise FormatError(f"unsupported feature-cache version {version}")
            fp = bytes(buf[8:40])
            dim, count = struct.unpack_from("<II", buf, 40)
            off = 48
            bags = []
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", buf, off)
                off += 2
                bid = buf[off:off + ln].decode("utf-8")
                off += ln
                (tag,) = struct.unpack_from("<B", buf, off)
                if tag == 0:
                    (cid,) = struct.unpack_from("<I", buf, off + 1)
                    label = ClassLabel(cid)
                    off += 5
                elif tag == 1:
                    t, c = struct.unpack_from("<fB", buf, off + 1)
                    label = SurvivalLabel(float(t), bool(c))
                    off += 6
                else:
                    raise FormatError(f"unknown label tag {tag}")
                (n,) = struct.unpack_from("<I", buf, off)
                off += 4
                if off + 4 * n * dim > len(buf):
                    raise FormatError("truncated feature payload")
                feats = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=off).astype(np.float32).reshape(n, dim)
                off += 4 * n * dim
                bags.append(CachedBag(bid, label, feats))
        except struct.error as exc:
            raise FormatError(f"truncated feature cache: {exc}") from exc
        return cls(fp, dim, bags)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "FeatureCache":
        return cls.from_bytes(Path(path).read_bytes())


def embed(extractor: Extractor, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode features for a pixel array, batch by batch in order."""
    extractor.eval()
    out = np.empty((len(pixels), extractor.dim), dtype=np.float32)
    for s in range(0, len(pixels), batch_size):
        out[s:s + batch_size] = extractor(pixels[s:s + batch_size]).data
    return out


def extract_features(ckpt: Checkpoint, dataset: MILDataset, batch_size: int = 256) -> FeatureCache:
    """Frozen-extractor features (head discarded, no augmentation) grouped by bag."""
    ckpt.verify()
    ext = extractor_from_checkpoint(ckpt)
    if dataset.instances.shape[-1] != ext.in_channels:
        raise ContractError(f"dataset has {dataset.instances.shape[-1]} channels, extractor expects {ext.in_channels}")
    rows, _ = _instance_table(dataset)
    feats = embed(ext, dataset.instances.pixels[rows], batch_size)
    cache = FeatureCache(ckpt.fingerprint, ext.dim)
    start = 0
    for bag in dataset.bags:
        n = len(bag.instance_ids)
        cache.bags.append(CachedBag(bag.id, bag.label, feats[start:start + n]))
        start += n
    return cache


# -- downstream -------------------------------------------------------------
def _pad(bags: list[CachedBag], dim: int) -> tuple[np.ndarray, np.ndarray]:
    nmax = max(len(b.features) for b in bags)
    x = np.zeros((len(bags), nmax, dim), dtype=np.float32)
    mask = np.zeros((len(bags), nmax), dtype=bool)
    for i, b in enumerate(bags):
        x[i, :len(b.features)] = b.features
        mask[i, :len(b.features)] = True
    return x, mask


def _holdout(cache: FeatureCache, fraction: float, seed: int) -> tuple[list, list]:
    perm = np.random.default_rng(seed).permutation(len(cache.bags))
    cut = int(round(fraction * len(perm)))
    return [cache.bags[i] for i in np.sort(perm[:cut])], [cache.bags[i] for i in np.sort(perm[cut:])]


def _predict(model, x: np.ndarray, mask: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = []
    for s in range(0, len(x), batch):
        logits, _ = model(Tensor(x[s:s + batch]), mask[s:s + batch])
        outs.append(logits.data)
    return np.concatenate(outs)


def train_aggregator(cache: FeatureCache, agg: str, task: str, seed: int,
                     cfg: ExperimentConfig | None = None, test_cache: FeatureCache | None = None):
    """Train an aggregator on frozen features and report test metrics.

    ``max``/``mean`` give linear MIL probing; ``abmil``/``dsmil`` give
    two-stage bag MIL.  Without ``test_cache`` the cache is split by a
    seeded holdout.
    """
    cfg = cfg or ExperimentConfig()
    d = cfg.downstream
    if task not in ("classification", "subtyping", "survival"):
        raise ContractError(f"unknown task {task!r}")
    if (task == "survival") != cache.is_survival:
        raise ContractError(f"task {task!r} does not match the cache labels")
    if test_cache is not None and test_cache.dim != cache.dim:
        raise ContractError("train and test caches differ in feature dimension")
    if test_cache is None:
        train_bags, test_bags = _holdout(cache, d.train_fraction, seed)
    else:
        train_bags, test_bags = cache.bags, test_cache.bags
    if not train_bags or not test_bags:
        raise ContractError("downstream training needs non-empty train and test bags")
    rng = np.random.default_rng([seed, 202])
    if task == "survival":
        t_tr = np.array([b.label.time for b in train_bags])
        c_tr = np.array([b.label.censored for b in train_bags])
        cuts = time_bins(t_tr, c_tr, cfg.loss.bins)
        y_tr = assign_bins(t_tr, cuts)
        n_out = cfg.loss.bins
    else:
        y_tr = np.array([b.label.class_id for b in train_bags])
        n_out = max(2, 1 + max(b.label.class_id for b in train_bags + test_bags))
    model = build_aggregator(agg, cache.dim, n_out, rng)
    x_tr, m_tr = _pad(train_bags, cache.dim)
    opt = Optimizer(model.parameters(), AdamKind(d.lr, weight_decay=d.weight_decay))
    sched = CosineSchedule(d.epochs) if d.schedule == "cosine" else StepSchedule((), 1.0, d.epochs)
    model.train()
    for epoch in range(d.epochs):
        opt.lr = schedule_lr(sched, d.lr, epoch)
        order = np.random.default_rng([seed, epoch, 303]).permutation(len(train_bags))
        for batch in _chunks(order, d.batch_size):
            logits, _ = model(Tensor(x_tr[batch]), m_tr[batch])
            if task == "survival":
                loss = survival_nll(logits, y_tr[batch], c_tr[batch])
            else:
                loss = ce_loss(logits, y_tr[batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    x_te, m_te = _pad(test_bags, cache.dim)
    logits = _predict(model, x_te, m_te)
    report = Report(task, info={"aggregator": agg, "fingerprint": cache.fingerprint.hex(),
                                "n_train": len(train_bags), "n_test": len(test_bags)})
    if task == "survival":
        risk = survival_risk(logits)
        values = {"c_index": c_index(risk, [b.label.time for b in test_bags],
                                     [b.label.censored for b in test_bags])}
    else:
        y_te = np.array([b.label.class_id for b in test_bags])
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        values = {"acc": accuracy(probs.argmax(axis=1), y_te), "auc": roc_auc_multiclass(probs, y_te)}
    report.add_seed(seed, values)
    return model, report


# -- instance-level protocols -----------------------------------------------
def _fit_linear(train_x: np.ndarray, train_y: np.ndarray, n_out: int, seed: int,
                epochs: int = 100, lr: float = 1e-2, batch: int = 256) -> Linear:
    rng = np.random.default_rng([seed, 404])
    clf = Linear(train_x.shape[1], n_out, rng)
    opt = Optimizer(clf.parameters(), AdamKind(lr))
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch, 405]).permutation(len(train_x))
        for part in _chunks(order, batch):
            loss = ce_loss(clf(Tensor(train_x[part])), train_y[part])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return clf


def instance_eval(ckpt: Checkpoint, dataset: MILDataset, mode: str = "linear_probe", seed: int = 0,
                  epochs: int = 10, max_instances: int = 4000, train_fraction: float = 0.8) -> Report:
    """Instance-level linear probing or fine-tuning against generator ground truth."""
    if dataset.instances.true_labels is None:
        raise ContractError("instance evaluation needs true instance labels")
    if mode not in ("linear_probe", "finetune"):
        raise ContractError(f"unknown mode {mode!r}")
    truth = dataset.instances.true_labels
    rng = np.random.default_rng([seed, 505])
    idx = rng.permutation(len(truth))[:max_instances]
    cut = int(round(train_fraction * len(idx)))
    tr, te = np.sort(idx[:cut]), np.sort(idx[cut:])
    classes, y = np.unique(truth, return_inverse=True)
    n_out = len(classes)
    pixels = dataset.instances.pixels
    ext = extractor_from_checkpoint(ckpt)
    if mode == "linear_probe":
        f_tr, f_te = embed(ext, pixels[tr]), embed(ext, pixels[te])
        mu, sd = f_tr.mean(axis=0), f_tr.std(axis=0) + 1e-6
        clf = _fit_linear((f_tr - mu) / sd, y[tr], n_out, seed, epochs=max(epochs, 1) * 10)
        pred = clf(Tensor((f_te - mu) / sd)).data.argmax(axis=1)
    else:
        frng = np.random.default_rng([seed, 506])
        clf = Linear(ext.dim, n_out, frng)
        params = ext.parameters() + clf.parameters()
        opt = Optimizer(params, AdamKind(1e-3))
        for epoch in range(epochs):
            ext.train()
            order = np.random.default_rng([seed, epoch, 507]).permutation(len(tr))
            for part in _chunks(order, 64, drop_small=1):
                loss = ce_loss(clf(ext(pixels[tr[part]])), y[tr[part]])
                opt.zero_grad()
                loss.backward()
                opt.step()
        pred = clf(Tensor(embed(ext, pixels[te]))).data.argmax(axis=1)
    report = Report("instance", info={"mode": mode, "n_train": len(tr), "n_test": len(te),
                                      "fingerprint": ckpt.fingerprint.hex()})
    report.add_seed(seed, {"acc": accuracy(pred, y[te])})
    return report


# -- whole experiments --------------------------------------------------------
def synthesize_splits(cfg: ExperimentConfig) -> tuple[MILDataset, MILDataset]:
    """Train and test datasets drawn with independent child seeds."""
    train_seed, test_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    train = synthesize_bags(cfg.generator("train"), int(train_seed.generate_state(1)[0]))
    test = synthesize_bags(cfg.generator("test"), int(test_seed.generate_state(1)[0]))
    return train, test


def pretrain(cfg: ExperimentConfig, dataset: MILDataset) -> Checkpoint:
    """Dispatch on ``cfg.experiment.method``."""
    method = cfg.experiment.method
    if method == "simmil":
        return pretrain_simmil(cfg, dataset)
    if method == "simmil_survival":
        return pretrain_simmil_survival(cfg, dataset)
    if method == "contrastive":
        return pretrain_contrastive(cfg, dataset)
    if method == "random":
        return random_checkpoint(cfg, dataset)
    raise ContractError(f"unknown method {method!r}")
