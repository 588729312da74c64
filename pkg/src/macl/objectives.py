"""Recommendation and contrastive losses, combined into the joint objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, clip, concat, cosine_similarity, softmax
from .augment import SignalBatch
from .data import PAD
from .errors import ConfigError, ContractError, DegenerateInputError

PROB_CLAMP = 1e-12


def rec_probabilities(item_table: Tensor, s: Tensor) -> Tensor:
    """softmax over inner products of (n, d) item embeddings with s ((d,) or (B, d))."""
    return softmax(s @ item_table.T, axis=-1)


def rec_loss(y: Tensor, target, mode: str = "binary") -> Tensor:
    """Cross-entropy of predicted distribution ``y`` against one-hot ``target``.

    ``binary`` mode sums the binary terms over every item:
    -log y_t - sum_{i != t} log(1 - y_i).  ``standard`` keeps only -log y_t.
    Batched ``y`` (B, n) is averaged over rows.
    """
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    batched = y.ndim == 2
    n = y.shape[-1]
    if (target < 0).any() or (target >= n).any():
        raise ContractError(f"target outside [0, {n}) (padding is not a valid label)")
    yb = y if batched else y.reshape(1, n)
    if len(target) != yb.shape[0]:
        raise ContractError("one target per probability row required")
    onehot = np.zeros(yb.shape)
    onehot[np.arange(len(target)), target] = 1.0
    yc = clip(yb, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if mode == "standard":
        per_row = -(yc.log() * onehot).sum(axis=1)
    elif mode == "binary":
        per_row = -(yc.log() * onehot + (1.0 - yc).log() * (1.0 - onehot)).sum(axis=1)
    else:
        raise ConfigError(f"unknown ce_mode {mode!r}")
    return per_row.mean()


# -- contrastive -----------------------------------------------------------------
def signal_ratios(batch: SignalBatch, tau: float = 1.0) -> Tensor:
    """exp(cos(anchor, positive)/tau) / sum_k exp(cos(anchor, negative_k)/tau), per set."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    a = batch.anchor
    pos = cosine_similarity(a, batch.positive)
    neg = cosine_similarity(a.reshape(a.shape[0], 1, a.shape[1]), batch.negatives)
    num = (pos * (1.0 / tau)).exp()
    den_terms = (neg * (1.0 / tau)).exp()
    if batch.neg_mask is not None:
        den_terms = den_terms * Tensor(batch.neg_mask.astype(np.float64))
    return num / den_terms.sum(axis=1)


def base_contrastive(batch: SignalBatch, tau: float = 1.0) -> Tensor:
    """Non-adaptive loss: minus the sum of per-set ratios."""
    if len(batch) == 0:
        raise ContractError("no signal sets")
    return -signal_ratios(batch, tau).sum()


def weight_net_scores(params, prefix: str, batch: SignalBatch) -> Tensor:
    """Raw MLP scores from [anchor; positive; mean of negatives]."""
    negs = batch.negatives
    if batch.neg_mask is None:
        neg_mean = negs.mean(axis=1)
    else:
        m = batch.neg_mask.astype(np.float64)
        neg_mean = (negs * Tensor(m[:, :, None])).sum(axis=1) * Tensor(1.0 / m.sum(axis=1, keepdims=True))
    x = concat([batch.anchor, batch.positive, neg_mean], axis=-1)
    h = (x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"]).tanh()
    h = (h @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]).tanh()
    return (h @ params[f"{prefix}.W3"] + params[f"{prefix}.b3"]).reshape(-1)


def normalize_weights(raw: Tensor) -> Tensor:
    """Batch softmax times batch size: weights are positive with mean exactly one."""
    return softmax(raw, axis=-1) * float(raw.shape[0])


def adaptive_contrastive(
    batch: SignalBatch,
    params=None,
    level: str = "item",
    tau: float = 1.0,
    adaptive: bool = True,
    raw_scores: Tensor | None = None,
) -> tuple[Tensor, np.ndarray]:
    """-sum_i w_i * ratio_i with learned, batch-normalised weights.

    ``adaptive=False`` fixes every weight to 1 (the plain loss).  ``raw_scores``
    overrides the weight net, mainly for tests.
    """
    if level not in ("item", "session"):
        raise ConfigError(f"unknown level {level!r}")
    if len(batch) == 0:
        raise ContractError("no signal sets")
    if level == "session" and len(batch) < 2 and adaptive:
        raise ContractError("adaptive session weights need at least 2 sets per batch")
    ratios = signal_ratios(batch, tau)
    if not adaptive:
        return -ratios.sum(), np.ones(len(batch))
    if raw_scores is None:
        raw_scores = weight_net_scores(params, "wnet.item" if level == "item" else "wnet.sess", batch)
    w = normalize_weights(raw_scores)
    return -(w * ratios).sum(), w.data.copy()


def total_contrastive(item_loss, sess_loss):
    return item_loss + sess_loss


def joint_loss(rec, con, lam: float = 0.01):
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    return rec + con * lam


@dataclass
class LossBreakdown:
    rec: float
    item_con: float
    sess_con: float
    total: float
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mean_alpha(self) -> float:
        return float(self.alpha.mean()) if self.alpha.size else float("nan")

    @property
    def mean_beta(self) -> float:
        return float(self.beta.mean()) if self.beta.size else float("nan")


# -- legacy ID-sequence augmentation (MACL_com ablation) ----------------------------
LEGACY_OPS = ("crop", "mask", "reorder")
LEGACY_RATIOS = {"crop": 0.7, "mask": 0.3, "reorder": 0.3}


def _portion(ratio: float, n: int) -> int:
    return int(ratio * n + 1e-9)


def legacy_augment(seq, op: str, rng: np.random.Generator, ratio: float | None = None) -> list[int]:
    """Crop / Mask / Reorder on an ID sequence (tokens, PAD used as the mask token)."""
    seq = list(seq)
    n = len(seq)
    if n < 2:
        raise DegenerateInputError("legacy augmentation needs a sequence of length >= 2")
    if op not in LEGACY_OPS:
        raise ConfigError(f"unknown legacy op {op!r}")
    ratio = LEGACY_RATIOS[op] if ratio is None else ratio
    if op == "crop":
        keep = max(1, _portion(ratio, n))
        start = int(rng.integers(0, n - keep + 1))
        return seq[start : start + keep]
    if op == "mask":
        k = _portion(ratio, n)
        for i in rng.choice(n, size=k, replace=False):
            seq[i] = PAD
        return seq
    k = max(2, _portion(ratio, n)) if n >= 2 else n
    start = int(rng.integers(0, n - k + 1))
    seg = seq[start : start + k]
    rng.shuffle(seg)
    return seq[:start] + seg + seq[start + k :]
