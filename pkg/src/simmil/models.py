"""Feature extractor, prediction head and MIL aggregators.

Aggregators work on padded bag batches: ``feats`` is a (B, N, d) tensor and
``mask`` a (B, N) boolean array marking real instances.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .numeric import F, BatchNorm, Conv2d, Linear, Module, Tensor

NEG = -1e30


class Extractor(Module):
    """Stride-2 conv blocks (conv 3x3 -> batch-norm -> ReLU) and global average pooling."""

    def __init__(self, widths=(16, 32, 64, 128), in_channels: int = 3, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.convs, self.norms = [], []
        cin = in_channels
        for w in self.widths:
            self.convs.append(Conv2d(cin, w, 3, rng, stride=2, padding=1))
            self.norms.append(BatchNorm(w))
            cin = w

    @property
    def dim(self) -> int:
        return self.widths[-1]

    def forward(self, x) -> Tensor:
        """``x``: (B, H, W, C) patches (array or tensor) -> (B, d) features."""
        if not isinstance(x, Tensor):
            x = np.asarray(x)
            if x.shape[-1] != self.in_channels:
                raise ContractError(f"extractor expects {self.in_channels} channels, got {x.shape[-1]}")
            dtype = self.convs[0].weight.dtype
            x = Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=dtype))
        elif x.shape[1] != self.in_channels:
            raise ContractError(f"extractor expects {self.in_channels} channels, got {x.shape[1]}")
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = F.relu(norm(conv(h)))
        return h.mean(axis=(2, 3))

    def zero_init(self) -> "Extractor":
        for p in self.parameters():
            p.data[...] = 0.0
        return self


class PredictionHead(Module):
    """linear -> batch-norm -> ReLU -> linear; or a single linear layer when ``hidden`` is 0."""

    def __init__(self, dim: int, out: int, hidden: int = 128, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        if hidden:
            self.fc1 = Linear(dim, hidden, rng)
            self.bn = BatchNorm(hidden)
            self.fc2 = Linear(hidden, out, rng)
        else:
            self.fc = Linear(dim, out, rng)

    def forward(self, x: Tensor) -> Tensor:
        if not self.hidden:
            return self.fc(x)
        return self.fc2(F.relu(self.bn(self.fc1(x))))


class Network(Module):
    """Extractor ``f`` followed by pretraining head ``h``."""

    def __init__(self, extractor: Extractor, head: PredictionHead):
        super().__init__()
        self.extractor = extractor
        self.head = head

    def forward(self, x) -> Tensor:
        return self.head(self.extractor(x))


# -- aggregators ------------------------------------------------------------
def _mask3(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask, dtype=bool)[:, :, None]


def _check_mask(feats: Tensor, mask) -> np.ndarray:
    if mask is None:
        mask = np.ones(feats.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if feats.shape[1] == 0 or not mask.any(axis=1).all():
        raise ContractError("every bag needs at least one instance")
    return mask


def canonical_order(feats: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-bag instance order: valid rows sorted lexicographically by value, padding last."""
    out = np.empty(mask.shape, dtype=np.int64)
    for b in range(feats.shape[0]):
        valid = np.flatnonzero(mask[b])
        rows = feats[b, valid]
        ranked = valid[np.lexsort(rows.T[::-1])] if len(valid) > 1 else valid
        out[b] = np.concatenate([ranked, np.flatnonzero(~mask[b])])
    return out


def masked_softmax(scores: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    return F.softmax(F.where(mask, scores, NEG), axis=axis)


class MaxProbe(Module):
    def __init__(self, dim: int, out: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(dim, out, rng)

    def pool(self, feats: Tensor, mask=None) -> Tensor:
        mask = _check_mask(feats, mask)
        return F.where(_mask3(mask), feats, NEG).max(axis=1)

    def forward(self, feats: Tensor, mask=None):
        return self.fc(self.pool(feats, mask)), None


class MeanProbe(Module):
    def __init__(self, dim: int, out: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(dim, out, rng)

    def pool(self, feats: Tensor, mask=None) -> Tensor:
        mask = _check_mask(feats, mask)
        m = _mask3(mask).astype(feats.dtype)
        masked = feats * m
        # sorted summation makes the pooled value independent of instance order
        order = np.argsort(masked.data, axis=1, kind="stable")
        return F.take_along(masked, order, axis=1).sum(axis=1) / m.sum(axis=1)

    def forward(self, feats: Tensor, mask=None):
        return self.fc(self.pool(feats, mask)), None


class ABMIL(Module):
    """Gated attention: e_k = w . (tanh(V h_k) * sigmoid(U h_k)), a = softmax(e)."""

    def __init__(self, dim: int, out: int, rng: np.random.Generator, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(dim // 2, 1)
        self.V = Linear(dim, hidden, rng)
        self.U = Linear(dim, hidden, rng)
        self.w = Linear(hidden, 1, rng)
        self.fc = Linear(dim, out, rng)

    def attend(self, feats: Tensor, mask=None) -> tuple[Tensor, Tensor]:
        mask = _check_mask(feats, mask)
        # run in a canonical instance order: BLAS rounding depends on row position
        order = canonical_order(feats.data, mask)
        inverse = np.argsort(order, axis=1)
        s_feats = F.take_along(feats, np.repeat(order[:, :, None], feats.shape[2], axis=2), axis=1)
        s_mask = np.take_along_axis(mask, order, axis=1)
        gate = F.tanh(self.V(s_feats)) * F.sigmoid(self.U(s_feats))
        scores = self.w(gate).reshape(feats.shape[:2])
        weights = masked_softmax(scores, s_mask)
        emb = (s_feats * weights.reshape(weights.shape + (1,))).sum(axis=1)
        return emb, F.take_along(weights, inverse, axis=1)

    def forward(self, feats: Tensor, mask=None):
        emb, weights = self.attend(feats, mask)
        return self.fc(emb), weights


class DSMIL(Module):
    """Dual-stream MIL with one critical instance per output.

    The instance stream scores every instance and picks the top-1 per output
    (lowest index on ties); the bag stream attends with scaled inner products
    between projected queries and the critical query.  Output score is the
    mean of the critical-instance score and the bag-embedding score.
    """

    def __init__(self, dim: int, out: int, rng: np.random.Generator, qdim: int | None = None):
        super().__init__()
        self.qdim = qdim or max(dim // 2, 1)
        self.out = out
        self.inst = Linear(dim, out, rng)
        self.q = Linear(dim, self.qdim, rng)
        self.v = Linear(dim, dim, rng)
        self.bag_w = Tensor(rng.uniform(-1, 1, size=(out, dim)).astype(np.float32) / np.sqrt(dim), requires_grad=True)
        self.bag_b = Tensor(np.zeros(out, dtype=np.float32), requires_grad=True)

    def forward(self, feats: Tensor, mask=None):
        mask = _check_mask(feats, mask)
        bsz, n, _ = feats.shape
        inst_scores = self.inst(feats)                                   # B, N, K
        masked = np.where(mask[:, :, None], inst_scores.data, -np.inf)
        crit = np.argmax(masked, axis=1)                                 # B, K (first max)
        bidx = np.arange(bsz)[:, None]
        kidx = np.arange(self.out)[None, :]
        crit_scores = inst_scores[(bidx, crit, kidx)]                    # B, K
        queries = self.q(feats)                                          # B, N, Q
        q_crit = queries[(bidx, crit)]                                   # B, K, Q
        sims = (queries @ F.swap_last(q_crit)) * (1.0 / np.sqrt(self.qdim))  # B, N, K
        weights = masked_softmax(sims, np.broadcast_to(mask[:, :, None], sims.shape), axis=1)
        values = self.v(feats)                                           # B, N, d
        bag_emb = F.swap_last(weights) @ values                          # B, K, d
        bag_scores = (bag_emb * self.bag_w).sum(axis=2) + self.bag_b     # B, K
        scores = (crit_scores + bag_scores) * 0.5
        self.last_critical = crit
        return scores, weights


AGGREGATORS = {"max": MaxProbe, "mean": MeanProbe, "abmil": ABMIL, "dsmil": DSMIL}


def build_aggregator(kind: str, dim: int, out: int, rng: np.random.Generator) -> Module:
    try:
        return AGGREGATORS[kind](dim, out, rng)
    except KeyError:
        raise ContractError(f"unknown aggregator {kind!r}; choose from {sorted(AGGREGATORS)}") from None


# -- single-bag convenience forms -------------------------------------------
def _bag(features) -> Tensor:
    arr = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ContractError("expected a non-empty N x d feature matrix")
    if isinstance(features, Tensor):
        return features.reshape((1,) + arr.shape)
    return Tensor(arr[None])


def agg_max(features) -> np.ndarray:
    f = _bag(features).data[0]
    return f.max(axis=0)


def agg_mean(features) -> np.ndarray:
    f = _bag(features).data[0]
    return np.sort(f, axis=0).sum(axis=0) / f.shape[0]


def agg_abmil(features, params: ABMIL) -> tuple[np.ndarray, np.ndarray]:
    emb, weights = params.attend(_bag(features))
    return emb.data[0], weights.data[0]


def agg_dsmil(features, params: DSMIL) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (bag scores (K,), critical indices (K,), attention weights (N, K))."""
    scores, weights = params(_bag(features))
    return scores.data[0], params.last_critical[0], weights.data[0]
