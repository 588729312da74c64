"""Per-item representations: an ID lookup table plus toy image/text extractors projected to d."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .autodiff import Tensor, embedding
from .data import Catalog, RasterImage, TokenText
from .errors import (
    DegenerateInputError,
    FitError,
    FormatError,
    ItemLookupError,
    ModalityAbsentError,
)

IMAGE_NATIVE_DIM = 1024
TEXT_NATIVE_DIM = 768


def id_embed(table: Tensor, item_id: int) -> Tensor:
    """Row ``item_id`` of the ID table; row 0 is the frozen padding row."""
    n = table.shape[0] - 1
    if not 0 <= item_id <= n:
        raise ItemLookupError(f"item index {item_id} outside [0, {n}]")
    return embedding(table, np.array([item_id]), padding_idx=0)[0]


def init_id_table(n_items: int, d: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / np.sqrt(d)
    table = rng.uniform(-bound, bound, size=(n_items + 1, d))
    table[0] = 0.0
    return table


# -- extractors ---------------------------------------------------------------
class ImageExtractor:
    """8x8 grid of per-channel intensity mean and std, intensities scaled to [0, 1]."""

    kind = "image"
    deterministic = True

    def __init__(self, grid: int = 8, channels: int = 3):
        self.grid = grid
        self.channels = channels
        self.native_dim = grid * grid * channels * 2

    def __call__(self, img: RasterImage) -> np.ndarray:
        if img.height < self.grid or img.width < self.grid:
            raise DegenerateInputError(f"image {img.width}x{img.height} smaller than the {self.grid}x{self.grid} grid")
        px = img.pixels.astype(np.float64) / 255.0
        if px.shape[2] != self.channels:
            px = np.repeat(px, self.channels, axis=2) if px.shape[2] == 1 else px.mean(axis=2, keepdims=True)
        return _kernels.grid_stats(np.ascontiguousarray(px), self.grid)


def stable_hash(token: str, seed: int) -> int:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=int(seed).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


class TextExtractor:
    """Hashed bag of tokens, L2-normalised.

    :meth:`token_vector` gives a per-token character n-gram profile used only
    for nearest-neighbour lookups (bucket one-hots carry no similarity).
    """

    kind = "text"
    deterministic = True

    def __init__(self, native_dim: int = TEXT_NATIVE_DIM, seed: int = 0, ngram: int = 3):
        self.native_dim = native_dim
        self.seed = seed
        self.ngram = ngram
        self._bucket: dict[str, int] = {}

    def bucket(self, token: str) -> int:
        b = self._bucket.get(token)
        if b is None:
            b = self._bucket[token] = stable_hash(token, self.seed) % self.native_dim
        return b

    def __call__(self, txt: TokenText) -> np.ndarray:
        if len(txt.tokens) == 0:
            raise DegenerateInputError("cannot extract features from empty text")
        v = np.zeros(self.native_dim)
        for t in txt.tokens:
            v[self.bucket(t)] += 1.0
        return v / np.linalg.norm(v)

    def token_vector(self, token: str) -> np.ndarray:
        padded = f"<{token}>"
        n = self.ngram
        grams = [padded[i : i + n] for i in range(max(1, len(padded) - n + 1))]
        v = np.zeros(self.native_dim)
        for g in grams:
            v[stable_hash("#" + g, self.seed) % self.native_dim] += 1.0
        return v / np.linalg.norm(v)


# -- projection ------------------------------------------------------------
@dataclass
class Projector:
    mode: str
    matrix: np.ndarray  # (d, native_dim), orthonormal rows in pca mode
    mean: np.ndarray  # (native_dim,), zeros in fixed_random mode
    explained_variance: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def native_dim(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.matrix.T


def fit_projector(vectors, mode: str = "pca", d: int = 100, seed: int = 0) -> Projector:
    """Fit a native_dim -> d projection.

    ``pca`` centres the data and keeps the top-d right singular vectors,
    sign-fixed so each row's largest-magnitude entry is positive.
    ``fixed_random`` draws a seeded Gaussian matrix scaled by 1/sqrt(native_dim).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise FitError(f"expected a 2-D sample matrix, got shape {x.shape}")
    n, native = x.shape
    if mode == "fixed_random":
        rng = np.random.default_rng(seed)
        return Projector(mode, rng.standard_normal((d, native)) / np.sqrt(native), np.zeros(native))
    if mode != "pca":
        raise FitError(f"unknown projector mode {mode!r}")
    if n < d:
        raise FitError(f"pca to d={d} needs at least {d} samples, got {n}")
    if native < d:
        raise FitError(f"cannot project {native}-dim features up to d={d}")
    mean = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:d].copy()
    idx = np.abs(comps).argmax(axis=1)
    signs = np.sign(comps[np.arange(d), idx])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    var = np.zeros(d)
    k = min(d, len(sv))
    var[:k] = sv[:k] ** 2 / max(n - 1, 1)
    return Projector(mode, comps, mean, var)


# -- precomputed features file -----------------------------------------------
FEATURE_MAGIC = b"MACLFEAT"
_KINDS = {"image": 0, "text": 1}


def write_features(path, kind: str, features: dict[int, np.ndarray]) -> None:
    """Little-endian: magic, u8 kind, u32 native_dim, u32 count, then (u32 id, f32[dim]) records."""
    if not features:
        raise FormatError("no feature vectors to write")
    dim = len(next(iter(features.values())))
    rec = np.dtype([("item_id", "<u4"), ("vec", "<f4", (dim,))])
    arr = np.zeros(len(features), dtype=rec)
    for r, (iid, v) in enumerate(sorted(features.items())):
        if len(v) != dim:
            raise FormatError("feature vectors of unequal length")
        arr[r] = (iid, v)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<BII", _KINDS[kind], dim, len(features)))
        fh.write(arr.tobytes())


def read_features(path) -> tuple[str, int, dict[int, np.ndarray]]:
    raw = Path(path).read_bytes()
    head = len(FEATURE_MAGIC) + 9
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC or len(raw) < head:
        raise FormatError(f"{path}: not a feature file")
    kind_code, dim, count = struct.unpack("<BII", raw[len(FEATURE_MAGIC) : head])
    kind = {v: k for k, v in _KINDS.items()}.get(kind_code)
    if kind is None:
        raise FormatError(f"{path}: unknown feature kind {kind_code}")
    rec = np.dtype([("item_id", "<u4"), ("vec", "<f4", (dim,))])
    if len(raw) - head != count * rec.itemsize:
        raise FormatError(f"{path}: truncated feature records")
    arr = np.frombuffer(raw[head:], dtype=rec)
    return kind, dim, {int(r["item_id"]): r["vec"].astype(np.float64) for r in arr}


# -- per-modality embedders ----------------------------------------------------
@dataclass
class ModalityEmbedder:
    """extract-then-project for one modality; precomputed vectors bypass the extractor."""

    extractor: object
    projector: Projector
    precomputed: dict[int, np.ndarray] = field(default_factory=dict)

    def features(self, asset) -> np.ndarray:
        return self.extractor(asset)

    def embed_array(self, asset=None, item_id: int | None = None) -> np.ndarray:
        if asset is None:
            if item_id is None or item_id not in self.precomputed:
                raise ModalityAbsentError(f"no {self.extractor.kind} asset for item {item_id}")
            return self.projector(self.precomputed[item_id])
        return self.projector(self.extractor(asset))

    def __call__(self, asset=None, item_id: int | None = None) -> Tensor:
        return Tensor(self.embed_array(asset, item_id))


@dataclass
class Embedders:
    image: ModalityEmbedder | None
    text: ModalityEmbedder | None
    d: int
    image_table: np.ndarray  # (n, d); zero rows where the item lacks an image
    text_table: np.ndarray
    has_image: np.ndarray  # (n,) bool
    has_text: np.ndarray
    meta: dict = field(default_factory=dict)

    def img_embed(self, img: RasterImage | None, item_id: int | None = None) -> Tensor:
        if self.image is None:
            raise ModalityAbsentError("catalog has no image modality")
        return self.image(img, item_id)

    def txt_embed(self, txt: TokenText | None, item_id: int | None = None) -> Tensor:
        if self.text is None:
            raise ModalityAbsentError("catalog has no text modality")
        return self.text(txt, item_id)

    def embed(self, modality: str, asset) -> np.ndarray:
        emb = self.image if modality == "image" else self.text
        if emb is None:
            raise ModalityAbsentError(f"catalog has no {modality} modality")
        return emb.embed_array(asset)


def build_embedders(
    catalog: Catalog,
    d: int,
    mode: str = "pca",
    seed: int = 0,
    image_features: dict[int, np.ndarray] | None = None,
    text_features: dict[int, np.ndarray] | None = None,
    image_extractor=None,
    text_extractor=None,
) -> Embedders:
    """Extract features for the whole catalog and fit one projector per modality.

    Projectors are fitted on every item carrying the modality (features are
    label-free, so there is no train/test leakage).
    """
    n = len(catalog)
    image_extractor = image_extractor or ImageExtractor()
    text_extractor = text_extractor or TextExtractor()
    out = {}
    tables = {}
    masks = {}
    for modality, extractor, pre in (
        ("image", image_extractor, image_features or {}),
        ("text", text_extractor, text_features or {}),
    ):
        raw: dict[int, np.ndarray] = {}
        for it in catalog:
            if it.item_id in pre:
                raw[it.item_id] = np.asarray(pre[it.item_id], dtype=np.float64)
            else:
                asset = it.image if modality == "image" else it.text
                if asset is not None:
                    raw[it.item_id] = extractor(asset)
        mask = np.zeros(n, dtype=bool)
        table = np.zeros((n, d))
        if raw:
            ids = sorted(raw)
            mat = np.stack([raw[i] for i in ids])
            proj = fit_projector(mat, mode, d, seed)
            table[ids] = proj(mat)
            mask[ids] = True
            out[modality] = ModalityEmbedder(extractor, proj, dict(pre))
        else:
            out[modality] = None
        tables[modality] = table
        masks[modality] = mask
    return Embedders(
        out["image"],
        out["text"],
        d,
        tables["image"],
        tables["text"],
        masks["image"],
        masks["text"],
        meta={"projector_mode": mode, "projector_fit": "full_catalog"},
    )
