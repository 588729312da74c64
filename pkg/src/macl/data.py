"""Catalog and session ingestion, corpus filtering, splitting and batching."""

from __future__ import annotations

import base64
import bisect
import csv
import hashlib
import io
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyCorpusError,
    IngestError,
    ItemLookupError,
    SplitError,
)

PAD = 0
MIN_IMAGE_SIDE = 4


# -- assets -----------------------------------------------------------------
class RasterImage:
    """8-bit image stored as an (height, width, channels) uint8 array."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        px = np.asarray(pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxW, HxWx1 or HxWx3, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image has an empty side")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise ValueError("pixel values outside [0, 255]")
            px = px.astype(np.uint8)
        px.setflags(write=False)
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        return isinstance(other, RasterImage) and self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"RasterImage({self.width}x{self.height}x{self.channels})"


def read_pnm(data: bytes) -> RasterImage:
    """Parse binary PGM (P5) or PPM (P6) with maxval <= 255."""
    buf = io.BytesIO(data)
    fields: list[bytes] = []
    while len(fields) < 4:
        line = buf.readline()
        if not line:
            raise ValueError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        fields.extend(line.split())
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"unsupported maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    raw = buf.read(w * h * c)
    if len(raw) != w * h * c:
        raise ValueError("PNM pixel data truncated")
    px = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c)
    if maxval != 255:
        px = np.round(px.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return RasterImage(px)


def write_pnm(img: RasterImage) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.tobytes()


_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, split on whitespace and punctuation."""
    return tuple(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class TokenText:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if any(not t for t in self.tokens):
            raise ValueError("empty token")

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_string(cls, text: str) -> "TokenText":
        return cls(tokenize(text))


@dataclass(frozen=True, eq=False)
class Item:
    item_id: int
    external_id: str
    image: RasterImage | None = None
    text: TokenText | None = None

    @property
    def id_only(self) -> bool:
        return self.image is None and self.text is None

    @property
    def modalities(self) -> frozenset[str]:
        m = set()
        if self.image is not None:
            m.add("image")
        if self.text is not None:
            m.add("text")
        return frozenset(m)


@dataclass
class Catalog:
    items: list[Item]
    source: str | None = None

    def __post_init__(self):
        self.id_map = {it.external_id: it.item_id for it in self.items}
        if len(self.id_map) != len(self.items):
            raise IngestError("duplicate external id in catalog")
        for i, it in enumerate(self.items):
            if it.item_id != i:
                raise IngestError(f"item {it.external_id!r} has dense id {it.item_id}, expected {i}")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, dense: int) -> Item:
        return self.items[dense]

    def __iter__(self):
        return iter(self.items)

    def dense(self, external_id: str) -> int:
        try:
            return self.id_map[external_id]
        except KeyError:
            raise ItemLookupError(f"unknown item id {external_id!r}") from None

    @property
    def external_ids(self) -> list[str]:
        return [it.external_id for it in self.items]

    def modality_mask(self, modality: str) -> np.ndarray:
        attr = "image" if modality == "image" else "text"
        return np.array([getattr(it, attr) is not None for it in self.items], dtype=bool)

    def subset(self, keep: Sequence[int]) -> tuple["Catalog", dict[int, int]]:
        """Re-indexed catalog of the dense ids in ``keep`` (order preserved)."""
        remap = {}
        items = []
        for new, old in enumerate(keep):
            it = self.items[old]
            remap[old] = new
            items.append(Item(new, it.external_id, it.image, it.text))
        return Catalog(items, self.source), remap


# -- id maps ------------------------------------------------------------------
def id_map_text(external_ids: Sequence[str]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["external_id", "dense_index"])
    for i, ext in enumerate(external_ids):
        w.writerow([ext, i])
    return out.getvalue()


def id_map_digest(external_ids: Sequence[str]) -> str:
    return hashlib.sha256(id_map_text(external_ids).encode()).hexdigest()


def save_id_map(external_ids: Sequence[str], path) -> None:
    Path(path).write_text(id_map_text(external_ids))


def load_id_map(path) -> list[str]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["external_id", "dense_index"]:
        raise IngestError(f"{path}: missing id_map header")
    ids: list[str] = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 2 or int(row[1]) != len(ids):
            raise IngestError(f"{path}:{n}: malformed or out-of-order row")
        ids.append(row[0])
    return ids


# -- loaders ------------------------------------------------------------------
def _iter_jsonl(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def load_catalog(path) -> Catalog:
    """Read catalog.jsonl; dense ids follow file order."""
    path = Path(path)
    base = path.parent
    items: list[Item] = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_jsonl(path):
        if "item_id" not in obj:
            raise IngestError(f"{path}:{lineno}: missing item_id")
        ext = str(obj["item_id"])
        if ext in seen:
            raise IngestError(f"{path}: duplicate item_id {ext!r} on lines {seen[ext]} and {lineno}")
        seen[ext] = lineno
        image = None
        try:
            if obj.get("image_path"):
                image = read_pnm((base / obj["image_path"]).read_bytes())
            elif obj.get("image_b64"):
                image = read_pnm(base64.b64decode(obj["image_b64"]))
        except (OSError, ValueError) as exc:
            raise IngestError(f"{path}:{lineno}: unreadable image for item {ext!r}: {exc}") from None
        if image is not None and min(image.width, image.height) < MIN_IMAGE_SIDE:
            raise IngestError(f"{path}:{lineno}: image smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
        text = None
        if obj.get("text"):
            toks = tokenize(obj["text"])
            text = TokenText(toks) if toks else None
        items.append(Item(len(items), ext, image, text))
    return Catalog(items, source=str(path))


@dataclass(frozen=True)
class Session:
    session_id: str
    item_ids: tuple[int, ...]
    timestamp: int = 0

    def __post_init__(self):
        object.__setattr__(self, "item_ids", tuple(int(i) for i in self.item_ids))

    def __len__(self):
        return len(self.item_ids)

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.item_ids[:-1]

    @property
    def label(self) -> int:
        return self.item_ids[-1]


def load_sessions(path, catalog: Catalog) -> list[Session]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            sid, items, ts = str(obj["session_id"]), obj["items"], int(obj["ts"])
        except (KeyError, TypeError, ValueError):
            raise IngestError(f"{path}:{lineno}: session needs session_id, items, ts") from None
        unknown = [str(x) for x in items if str(x) not in catalog.id_map]
        if unknown:
            raise ItemLookupError(f"{path}:{lineno}: unknown item ids {unknown}")
        out.append(Session(sid, tuple(catalog.id_map[str(x)] for x in items), ts))
    return out


def save_sessions(sessions: Iterable[Session], catalog: Catalog, path) -> None:
    with open(path, "w") as fh:
        for s in sessions:
            rec = {"session_id": s.session_id, "items": [catalog[i].external_id for i in s.item_ids], "ts": s.timestamp}
            fh.write(json.dumps(rec) + "\n")


# -- preprocessing -------------------------------------------------------------
def item_counts(sessions: Iterable[Session]) -> Counter:
    c: Counter = Counter()
    for s in sessions:
        c.update(s.item_ids)
    return c


def filter_corpus(
    sessions: Sequence[Session],
    catalog: Catalog,
    min_item_count: int = 5,
    keep_unpopular: bool = False,
) -> tuple[list[Session], Catalog]:
    """Drop rare items and length-1 sessions, repeating until nothing changes.

    The surviving catalog is re-indexed densely and sessions are remapped.
    """
    if min_item_count < 1:
        raise ConfigError("min_item_count must be >= 1")
    alive = set(range(len(catalog)))
    current = [s for s in sessions]
    while True:
        before = (len(alive), sum(len(s) for s in current), len(current))
        if not keep_unpopular:
            counts = item_counts(current)
            alive = {i for i in alive if counts[i] >= min_item_count}
            current = [Session(s.session_id, tuple(i for i in s.item_ids if i in alive), s.timestamp) for s in current]
        current = [s for s in current if len(s) >= 2]
        if (len(alive), sum(len(s) for s in current), len(current)) == before:
            break
    if not current or not alive:
        raise EmptyCorpusError("no sessions survive filtering")
    new_catalog, remap = catalog.subset(sorted(alive))
    out = [Session(s.session_id, tuple(remap[i] for i in s.item_ids), s.timestamp) for s in current]
    return out, new_catalog


@dataclass
class DatasetSplit:
    train: list[Session]
    validation: list[Session]
    test: list[Session]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def chronological_split(sessions: Sequence[Session]) -> DatasetSplit:
    """Sort by (timestamp, session_id) and cut at 70% and 90%."""
    n = len(sessions)
    if n < 10:
        raise SplitError(f"need at least 10 sessions for a 7:2:1 split, got {n}")
    ordered = sorted(sessions, key=lambda s: (s.timestamp, s.session_id))
    a = _round_half_up(0.7 * n)
    b = _round_half_up(0.9 * n)
    return DatasetSplit(ordered[:a], ordered[a:b], ordered[b:])


@dataclass
class Batch:
    inputs: np.ndarray  # (B, max_len) item tokens, dense id + 1, left-padded with PAD
    lengths: np.ndarray  # (B,) true prefix sizes after truncation
    labels: np.ndarray  # (B,) dense target ids
    session_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def encode_prefixes(prefixes: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-padded token matrix (dense id + 1) keeping the most recent items."""
    tokens = np.zeros((len(prefixes), max_len), dtype=np.int64)
    lengths = np.zeros(len(prefixes), dtype=np.int64)
    for r, p in enumerate(prefixes):
        p = list(p)[-max_len:]
        if p:
            tokens[r, max_len - len(p) :] = np.asarray(p, dtype=np.int64) + 1
        lengths[r] = len(p)
    return tokens, lengths


def make_batches(
    sessions: Sequence[Session],
    batch_size: int,
    max_len: int,
    seed: int | None = 0,
    training: bool = True,
) -> list[Batch]:
    """Split sessions into (prefix, label) batches.

    Training shuffles with ``seed`` and drops the final short batch;
    evaluation keeps input order and every session.
    """
    if batch_size < 2:
        raise ConfigError("batch size must be >= 2 (session contrast needs an in-batch negative)")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    order = np.arange(len(sessions))
    if training:
        order = np.random.default_rng(seed).permutation(len(sessions))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if training and len(idx) < batch_size:
            break
        chosen = [sessions[i] for i in idx]
        tokens, lengths = encode_prefixes([s.prefix for s in chosen], max_len)
        labels = np.array([s.label for s in chosen], dtype=np.int64)
        batches.append(Batch(tokens, lengths, labels, [s.session_id for s in chosen]))
    return batches


@dataclass
class Stratum:
    name: str
    lower: float | None  # exclusive
    upper: float | None  # inclusive
    indices: list[int]
    members: list

    @property
    def count(self) -> int:
        return len(self.indices)


def stratify(elements: Sequence, axis: str, boundaries: Sequence[float], popularity=None) -> list[Stratum]:
    """Partition by session length or item popularity.

    Group ``g`` holds values ``v`` with ``boundaries[g-1] < v <= boundaries[g]``.
    Sessions are measured by their length, or by their target's popularity on
    the popularity axis; bare numbers are used as-is unless ``popularity`` maps
    them (item ids) to counts.
    """
    if axis not in ("session_length", "item_popularity"):
        raise ConfigError(f"unknown stratification axis {axis!r}")
    bounds = list(boundaries)
    if not bounds:
        raise ConfigError("stratify needs at least one boundary")
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ConfigError("boundaries must be strictly increasing")

    def value(el):
        if isinstance(el, Session):
            if axis == "session_length":
                return len(el)
            return (popularity or {}).get(el.label, 0)
        if axis == "item_popularity" and popularity is not None:
            return popularity.get(el, 0)
        return el

    names = ["short", "long"] if axis == "session_length" else ["tail", "head"]
    if len(bounds) != 1:
        names = [f"g{g}" for g in range(len(bounds) + 1)]
    groups = [
        Stratum(names[g], bounds[g - 1] if g else None, bounds[g] if g < len(bounds) else None, [], [])
        for g in range(len(bounds) + 1)
    ]
    for i, el in enumerate(elements):
        g = bisect.bisect_left(bounds, value(el))
        groups[g].indices.append(i)
        groups[g].members.append(el)
    return groups
