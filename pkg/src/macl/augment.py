"""Multi-modal augmentation pool and contrastive signal-set construction."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .autodiff import Tensor
from .data import MIN_IMAGE_SIDE, Catalog, Item, RasterImage, TokenText
from .errors import (
    AugmentationUnavailableError,
    ConfigError,
    DegenerateInputError,
    DomainError,
    SamplingError,
)


class Technique(enum.Enum):
    HFLIP = "Hflip"
    CROPPING = "Cropping"
    GAUSSIAN_NOISE = "GaussianNoise"
    GAUSSIAN_BLUR = "GaussianBlur"
    MAX_POOLING = "MaxPooling"
    SWAP = "Swap"
    DELETION = "Deletion"
    SUBSTITUTION = "Substitution"
    INSERTION = "Insertion"

    @property
    def modality(self) -> str:
        return "image" if self in IMAGE_TECHNIQUES else "text"

    @classmethod
    def parse(cls, name: str) -> "Technique":
        key = name.replace("_", "").replace(" ", "").lower()
        for t in cls:
            if t.value.lower() == key:
                return t
        raise DomainError(f"unknown technique {name!r}; expected one of {[t.value for t in cls]}")


IMAGE_TECHNIQUES = (
    Technique.HFLIP,
    Technique.CROPPING,
    Technique.GAUSSIAN_NOISE,
    Technique.GAUSSIAN_BLUR,
    Technique.MAX_POOLING,
)
TEXT_TECHNIQUES = (Technique.SWAP, Technique.DELETION, Technique.SUBSTITUTION, Technique.INSERTION)
POOL = IMAGE_TECHNIQUES + TEXT_TECHNIQUES


@dataclass(frozen=True)
class AugmentParams:
    crop_ratio: float = 0.2
    noise_ratio: float = 0.05
    blur_sigma: float = 1.0
    swap_ratio: float = 0.1
    delete_ratio: float = 0.1
    substitute_ratio: float = 0.1
    insert_ratio: float = 0.1
    neighbor_k: int = 5


def sample_technique(pool: Sequence[Technique], available_modalities, rng: np.random.Generator) -> Technique:
    """Uniform draw over the techniques whose modality is available."""
    ok = [t for t in pool if t.modality in available_modalities]
    if not ok:
        raise AugmentationUnavailableError(f"no technique in the pool applies to modalities {sorted(available_modalities)}")
    return ok[int(rng.integers(len(ok)))]


# -- images --------------------------------------------------------------------
def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def augment_image(
    img: RasterImage,
    t: Technique,
    rng: np.random.Generator,
    params: AugmentParams = AugmentParams(),
) -> RasterImage:
    if t.modality != "image":
        raise DomainError(f"{t.value} is not an image technique")
    h, w = img.height, img.width
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise DegenerateInputError(f"{t.value} needs at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {w}x{h}")
    px = img.pixels
    if t is Technique.HFLIP:
        return RasterImage(px[:, ::-1].copy())
    if t is Technique.CROPPING:
        top, bottom = _crop_sides(h, params.crop_ratio, rng)
        left, right = _crop_sides(w, params.crop_ratio, rng)
        return RasterImage(px[top : h - bottom, left : w - right].copy())
    if t is Technique.GAUSSIAN_NOISE:
        sigma = params.noise_ratio * 255.0
        if sigma == 0.0:
            return RasterImage(px.copy())
        return RasterImage(_to_uint8(px + rng.normal(0.0, sigma, size=px.shape)))
    if t is Technique.GAUSSIAN_BLUR:
        k = _kernels.gaussian_kernel3(params.blur_sigma)
        return RasterImage(_to_uint8(_kernels.blur3(np.ascontiguousarray(px, dtype=np.float64), k)))
    if t is Technique.MAX_POOLING:
        return RasterImage(_kernels.maxpool2(np.ascontiguousarray(px, dtype=np.float64)).astype(np.uint8))
    raise DomainError(f"unhandled technique {t}")


def _crop_sides(size: int, ratio: float, rng) -> tuple[int, int]:
    budget = min(int(math.floor(ratio * size + 1e-9)), size - MIN_IMAGE_SIDE)
    if budget <= 0:
        return 0, 0
    total = int(rng.integers(0, budget + 1))
    first = int(rng.integers(0, total + 1))
    return first, total - first


# -- text ------------------------------------------------------------------------
def _count(ratio: float, n: int) -> int:
    return int(math.ceil(ratio * n - 1e-9)) if ratio > 0 else 0


class NeighborIndex:
    """Top-k cosine neighbours of every vocabulary token under ``vector_fn``."""

    def __init__(self, vocabulary: Sequence[str], vector_fn: Callable[[str], np.ndarray], k: int = 5):
        vocab = sorted(set(vocabulary))
        self.vocabulary = vocab
        self.k = k
        self.neighbors: dict[str, tuple[str, ...]] = {}
        if not vocab:
            return
        mat = np.stack([vector_fn(t) for t in vocab])
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        mat = mat / np.where(norms == 0, 1.0, norms)
        sims = mat @ mat.T
        np.fill_diagonal(sims, -np.inf)
        kk = min(k, len(vocab) - 1)
        for i, tok in enumerate(vocab):
            # stable sort: ties resolved by vocabulary order
            order = np.argsort(-sims[i], kind="stable")[:kk]
            self.neighbors[tok] = tuple(vocab[j] for j in order)

    def __getitem__(self, token: str) -> tuple[str, ...]:
        return self.neighbors.get(token, ())

    def __contains__(self, token):
        return token in self.neighbors

    @classmethod
    def from_catalog(cls, catalog: Catalog, extractor, k: int = 5) -> "NeighborIndex":
        vocab = {tok for it in catalog if it.text is not None for tok in it.text.tokens}
        return cls(sorted(vocab), extractor.token_vector, k)


def augment_text(
    txt: TokenText,
    t: Technique,
    rng: np.random.Generator,
    neighbor_index: NeighborIndex | None = None,
    params: AugmentParams = AugmentParams(),
) -> TokenText:
    if t.modality != "text":
        raise DomainError(f"{t.value} is not a text technique")
    toks = list(txt.tokens)
    n = len(toks)
    if n == 0:
        raise DegenerateInputError("cannot augment empty text")
    if t is Technique.SWAP:
        if n >= 2:
            for _ in range(_count(params.swap_ratio, n)):
                i, j = rng.choice(n, size=2, replace=False)
                toks[i], toks[j] = toks[j], toks[i]
        return TokenText(toks)
    if t is Technique.DELETION:
        k = min(_count(params.delete_ratio, n), n - 1)
        if k <= 0:
            return TokenText(toks)
        drop = set(rng.choice(n, size=k, replace=False).tolist())
        return TokenText([tok for i, tok in enumerate(toks) if i not in drop])
    if neighbor_index is None:
        raise ConfigError(f"{t.value} needs a neighbour index")
    if t is Technique.SUBSTITUTION:
        k = min(_count(params.substitute_ratio, n), n)
        if k <= 0:
            return TokenText(toks)
        for i in rng.choice(n, size=k, replace=False):
            cands = neighbor_index[toks[i]][: params.neighbor_k]
            if cands:
                toks[i] = cands[int(rng.integers(len(cands)))]
        return TokenText(toks)
    if t is Technique.INSERTION:
        for _ in range(_count(params.insert_ratio, n)):
            src = toks[int(rng.integers(len(toks)))]
            cands = neighbor_index[src][: params.neighbor_k]
            if not cands:
                continue
            toks.insert(int(rng.integers(len(toks) + 1)), cands[int(rng.integers(len(cands)))])
        return TokenText(toks)
    raise DomainError(f"unhandled technique {t}")


def augment_item_asset(item: Item, t: Technique, rng, neighbor_index=None, params: AugmentParams = AugmentParams()):
    if t.modality == "image":
        if item.image is None:
            raise AugmentationUnavailableError(f"item {item.external_id!r} has no image")
        return augment_image(item.image, t, rng, params)
    if item.text is None:
        raise AugmentationUnavailableError(f"item {item.external_id!r} has no text")
    return augment_text(item.text, t, rng, neighbor_index, params)


def element_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (global seed, element keys)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]])


# -- augmentation bank ----------------------------------------------------------
class AugmentationBank:
    """Projected embeddings of ``views`` augmented copies per (technique, item).

    Training draws a random view per use, so positives and negatives still vary
    step to step while each asset is augmented and extracted only once.
    """

    def __init__(self, catalog: Catalog, embedders, neighbor_index, views: int = 4, seed: int = 0,
                 params: AugmentParams = AugmentParams(), pool: Sequence[Technique] = POOL):
        n, d = len(catalog), embedders.d
        self.views = views
        self.pool = tuple(pool)
        self.table = np.zeros((len(POOL), n, max(views, 1), d))
        self.available = np.zeros((len(POOL), n), dtype=bool)
        for ti, t in enumerate(POOL):
            if t not in self.pool:
                continue
            emb = embedders.image if t.modality == "image" else embedders.text
            if emb is None:
                continue
            for it in catalog:
                asset = it.image if t.modality == "image" else it.text
                if asset is None:
                    continue
                try:
                    for v in range(views):
                        rng = element_rng(seed, it.item_id, ti, v)
                        aug = augment_item_asset(it, t, rng, neighbor_index, params)
                        self.table[ti, it.item_id, v] = emb.embed_array(aug)
                except DegenerateInputError:
                    # e.g. pooling a small image below the extractor's grid
                    continue
                self.available[ti, it.item_id] = True

    def admissible(self, item_ids) -> list[Technique]:
        """Techniques usable for every item in ``item_ids``."""
        ok = self.available[:, np.asarray(item_ids, dtype=np.int64)].all(axis=1)
        return [t for ti, t in enumerate(POOL) if ok[ti] and t in self.pool]

    def lookup(self, t: Technique, item_ids, rng) -> np.ndarray:
        ti = POOL.index(t)
        item_ids = np.asarray(item_ids, dtype=np.int64)
        views = rng.integers(self.views, size=item_ids.shape)
        return self.table[ti, item_ids, views]


# -- signal sets ----------------------------------------------------------------
@dataclass
class ItemSignalSet:
    item_id: int
    technique: Technique
    anchor: Tensor | None
    positive: Tensor
    negatives: list[Tensor]
    negative_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class SessionSignalSet:
    index: int
    technique: Technique
    anchor: Tensor | None
    positive: Tensor
    negatives: list[Tensor]


def sample_negatives(anchor_id: int, eligible: np.ndarray, M: int, rng) -> np.ndarray:
    """M distinct eligible ids other than ``anchor_id``."""
    pool = np.flatnonzero(eligible)
    pool = pool[pool != anchor_id]
    if len(pool) < M:
        raise SamplingError(f"need {M} negatives for item {anchor_id}, only {len(pool)} eligible")
    return np.sort(rng.choice(pool, size=M, replace=False))


def item_signal_set(
    item: Item,
    catalog: Catalog,
    M: int,
    rng: np.random.Generator,
    embedders,
    neighbor_index=None,
    anchor: Tensor | None = None,
    params: AugmentParams = AugmentParams(),
    pool: Sequence[Technique] = POOL,
) -> ItemSignalSet:
    """Fresh-augmentation signal set for one item (anchor supplied by the caller)."""
    if len(catalog) <= M:
        raise SamplingError(f"catalog of {len(catalog)} items cannot supply {M} negatives")
    a = sample_technique(pool, item.modalities, rng)
    emb = embedders.image if a.modality == "image" else embedders.text
    positive = Tensor(emb.embed_array(augment_item_asset(item, a, rng, neighbor_index, params)))
    neg_ids = sample_negatives(item.item_id, catalog.modality_mask(a.modality), M, rng)
    negatives = [
        Tensor(emb.embed_array(augment_item_asset(catalog[j], a, rng, neighbor_index, params))) for j in neg_ids
    ]
    return ItemSignalSet(item.item_id, a, anchor, positive, negatives, neg_ids)


@dataclass
class SignalBatch:
    """Stacked signal sets: anchors (U, d), positives (U, d), negatives (U, K, d).

    ``neg_mask`` (U, K) marks real negatives; padded slots are ignored.
    """

    anchor: Tensor
    positive: Tensor
    negatives: Tensor
    neg_mask: np.ndarray | None = None
    techniques: list = field(default_factory=list)

    def __len__(self):
        return self.anchor.shape[0]


def item_signal_batch_plan(item_ids, bank: AugmentationBank, M: int, rng):
    """Draw technique, positive view and M negatives for each item id.

    Returns (kept_ids, techniques, positives (U, d), negatives (U, M, d)); items
    with no admissible technique are skipped.
    """
    keep, techs, pos, negs = [], [], [], []
    eligible_cache: dict[Technique, np.ndarray] = {}
    # a technique needs M other items with views to supply negatives
    roomy = {t for t in POOL if bank.available[POOL.index(t)].sum() > M}
    for iid in item_ids:
        ok = [t for t in bank.admissible([iid]) if t in roomy]
        if not ok:
            continue
        a = ok[int(rng.integers(len(ok)))]
        elig = eligible_cache.get(a)
        if elig is None:
            elig = eligible_cache[a] = bank.available[POOL.index(a)]
        neg_ids = sample_negatives(iid, elig, M, rng)
        keep.append(iid)
        techs.append(a)
        pos.append(bank.lookup(a, [iid], rng)[0])
        negs.append(bank.lookup(a, neg_ids, rng))
    d = bank.table.shape[-1]
    if not keep:
        return np.zeros(0, dtype=np.int64), [], np.zeros((0, d)), np.zeros((0, M, d))
    return np.array(keep, dtype=np.int64), techs, np.stack(pos), np.stack(negs)


def session_technique_plan(prefixes: Sequence[Sequence[int]], bank: AugmentationBank, rng, per_batch: bool = False):
    """Technique per session (None when no technique covers all its items)."""
    n = len(prefixes)
    if n < 2:
        raise ConfigError("session-level contrast needs at least 2 sessions per batch")
    if per_batch:
        ok = bank.admissible([i for p in prefixes for i in p])
        t = ok[int(rng.integers(len(ok)))] if ok else None
        return [t] * n
    out = []
    for p in prefixes:
        ok = bank.admissible(list(p))
        out.append(ok[int(rng.integers(len(ok)))] if ok else None)
    return out


def session_signal_set(
    batch_prefixes: Sequence[Sequence[int]],
    rng: np.random.Generator,
    encode_fn: Callable[[np.ndarray, np.ndarray], Tensor],
    bank: AugmentationBank,
    max_len: int,
    anchors: Tensor | None = None,
    per_batch: bool = False,
) -> list[SessionSignalSet]:
    """Per-session positive and in-batch negatives, all under the session's own technique.

    ``encode_fn`` maps left-padded (B, L, d) embeddings plus lengths to (B, d).
    """
    plan = session_technique_plan(batch_prefixes, bank, rng, per_batch)
    views, valid, used = augmented_session_views(batch_prefixes, plan, bank, max_len, rng)
    lengths = np.array([min(len(p), max_len) for p in batch_prefixes])
    encoded_by = [encode_fn(views[ti], lengths) for ti in range(len(used))]
    out = []
    for i, t in enumerate(plan):
        if t is None:
            continue
        ti = used.index(t)
        encoded = encoded_by[ti]
        others = [j for j in range(len(batch_prefixes)) if j != i and valid[ti, j]]
        if not others:
            continue
        out.append(
            SessionSignalSet(
                i, t, None if anchors is None else anchors[i], encoded[i], [encoded[j] for j in others]
            )
        )
    return out


def augmented_session_views(prefixes, plan, bank: AugmentationBank, max_len: int, rng):
    """Augmented embedding sequences of every prefix under every technique in ``plan``.

    Returns (views (T, B, L, d), valid (T, B), used techniques).
    """
    used = sorted({t for t in plan if t is not None}, key=POOL.index)
    b, d = len(prefixes), bank.table.shape[-1]
    views = np.zeros((len(used), b, max_len, d))
    valid = np.zeros((len(used), b), dtype=bool)
    for ti, t in enumerate(used):
        avail = bank.available[POOL.index(t)]
        for j, p in enumerate(prefixes):
            p = list(p)[-max_len:]
            if not p or not avail[p].all():
                continue
            views[ti, j, max_len - len(p) :] = bank.lookup(t, p, rng)
            valid[ti, j] = True
    return views, valid, used
