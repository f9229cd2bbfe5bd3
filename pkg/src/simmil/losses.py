"""Training objectives. All reductions are means over the batch (or over pairs)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numeric import F, Tensor


class EmptyPairsWarning(UserWarning):
    """A ranking batch had no comparable pairs; the loss is defined as 0."""


@dataclass(frozen=True)
class LossConfig:
    kind: str = "sce"          # ce | sce | ranking | survival_nll | ntxent
    alpha: float = 1.0
    beta: float = 1.0
    A: float = -4.0
    bins: int = 4
    temperature: float = 0.5

    def __post_init__(self):
        if self.kind not in ("ce", "sce", "ranking", "survival_nll", "ntxent"):
            raise ContractError(f"unknown loss kind {self.kind!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if not self.A < 0:
            raise ContractError("the log(0) floor A must be negative")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.bins < 2:
            raise ContractError("survival needs at least two bins")


def _targets(logits: Tensor, target) -> tuple[Tensor, np.ndarray]:
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if len(target) != logits.shape[0]:
        raise ContractError("one target per row of logits expected")
    if (target < 0).any() or (target >= logits.shape[1]).any():
        raise ContractError(f"target outside [0, {logits.shape[1]})")
    return logits, target


def ce_loss(logits: Tensor, target) -> Tensor:
    """Mean of -log softmax(logits)[target]."""
    logits, target = _targets(logits, target)
    logp = F.log_softmax(logits, axis=1)
    picked = logp[(np.arange(len(target)), target)]
    return -picked.mean()


def sce_loss(logits: Tensor, target, alpha: float = 1.0, beta: float = 1.0, A: float = -4.0) -> Tensor:
    """beta * CE + alpha * RCE, with RCE = -sum_c p_c log y_c and log 0 := A.

    For a one-hot target, RCE reduces to -A * (1 - p_target).
    """
    logits, target = _targets(logits, target)
    rows = np.arange(len(target))
    logp = F.log_softmax(logits, axis=1)
    ce = -logp[(rows, target)].mean()
    if alpha == 0:
        return ce * beta if beta != 1 else ce
    p_target = F.softmax(logits, axis=1)[(rows, target)]
    rce = ((1.0 - p_target) * (-A)).mean()
    return ce * beta + rce * alpha


def ranking_loss(score_a: Tensor, score_b: Tensor) -> Tensor:
    """-mean sigmoid(score_a - score_b) over comparable pairs (a is the higher-risk member)."""
    if score_a.shape[0] == 0:
        warnings.warn("ranking loss on an empty pair set", EmptyPairsWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=score_a.dtype))
    return -F.sigmoid(score_a - score_b).mean()


def survival_nll(logits: Tensor, bin_index, censored) -> Tensor:
    """Discrete-time hazard negative log-likelihood.

    With h_b = sigmoid(logit_b) and S_b = prod_{k<=b} (1 - h_k): an observed
    event in bin j costs -log h_j - log S_{j-1}; a censored record costs
    -log S_j.
    """
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    bins = logits.shape[1]
    idx = np.atleast_1d(np.asarray(bin_index, dtype=np.int64))
    cens = np.atleast_1d(np.asarray(censored, dtype=bool))
    if (idx < 0).any() or (idx >= bins).any():
        raise ContractError(f"time bin outside [0, {bins})")
    cols = np.arange(bins)[None, :]
    # log(1 - h) = -softplus(x); log h = -softplus(-x)
    log_surv_terms = -F.softplus(logits)
    log_hazard = -F.softplus(-logits)
    before = (cols < idx[:, None]).astype(logits.dtype)
    through = (cols <= idx[:, None]).astype(logits.dtype)
    at = (cols == idx[:, None]).astype(logits.dtype)
    event = (~cens)[:, None].astype(logits.dtype)
    cmask = cens[:, None].astype(logits.dtype)
    ll = (log_surv_terms * (before * event + through * cmask) + log_hazard * (at * event)).sum(axis=1)
    return -ll.mean()


def survival_risk(logits: np.ndarray) -> np.ndarray:
    """Scalar risk per record: negative sum of the survival curve."""
    h = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return -np.cumprod(1.0 - h, axis=1).sum(axis=1)


def _normalize(z: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ((z * z).sum(axis=1, keepdims=True) + eps) ** 0.5
    return z / norm


def nt_xent(z: Tensor, temperature: float = 0.5) -> Tensor:
    """Normalised-temperature cross-entropy; rows i and i+B are the two views of sample i."""
    n = z.shape[0]
    if n % 2 or n < 4:
        raise ContractError("nt_xent needs 2B rows with B >= 2")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    b = n // 2
    zn = _normalize(z)
    sim = (zn @ zn.T) * (1.0 / temperature)
    eye = np.eye(n, dtype=bool)
    logits = F.where(~eye, sim, -1e30)
    pos = np.concatenate([np.arange(b, n), np.arange(0, b)])
    logp = F.log_softmax(logits, axis=1)
    return -logp[(np.arange(n), pos)].mean()


def time_bins(times: np.ndarray, censored: np.ndarray, bins: int = 4) -> np.ndarray:
    """Interior cut points from quantiles of uncensored training times."""
    times = np.asarray(times, dtype=np.float64)
    ev = times[~np.asarray(censored, dtype=bool)]
    ref = ev if len(ev) >= bins else times
    return np.quantile(ref, np.linspace(0, 1, bins + 1)[1:-1])


def assign_bins(times: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    return np.searchsorted(cuts, np.asarray(times, dtype=np.float64), side="right")
