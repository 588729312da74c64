"""Synthetic catalogs and sessions where item group drives both content and transitions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Catalog, Item, RasterImage, Session, TokenText, write_pnm
from .errors import ConfigError

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SyntheticSpec:
    n_items: int = 200
    n_groups: int = 10
    sessions: int = 5000
    min_length: int = 2
    max_length: int = 10
    mean_length: float = 5.0
    p_stay: float = 0.8
    p_local: float = 0.5  # within-group steps that move to a nearby item rather than a popular one
    popularity_exponent: float = 1.2
    image_size: int = 32
    image_noise: float = 30.0
    item_detail: float = 25.0
    text_length: int = 10
    group_tokens: int = 12
    noise_tokens: int = 30
    noise_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        if self.n_groups < 1 or self.n_items < self.n_groups or self.n_items % self.n_groups:
            raise ConfigError(f"n_items={self.n_items} must split evenly into n_groups={self.n_groups}")
        if not 0.0 <= self.p_stay <= 1.0 or not 0.0 <= self.p_local <= 1.0:
            raise ConfigError("p_stay and p_local must lie in [0, 1]")
        if self.min_length < 2 or self.max_length < self.min_length:
            raise ConfigError("session lengths need 2 <= min_length <= max_length")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if self.sessions < 1:
            raise ConfigError("sessions must be positive")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    catalog: Catalog
    sessions: list[Session]
    groups: np.ndarray  # (n_items,) group of each dense id
    popularity: np.ndarray  # (n_items,) sampling weight, sums to 1


def _word(rng, syllables: int) -> str:
    return "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syllables))


def _mirrored(rng, rows: int, cols: int, low, high, normal=False) -> np.ndarray:
    """Left-right symmetric coarse block pattern, so image statistics survive a horizontal flip."""
    half = rng.normal(low, high, size=(rows, cols // 2, 3)) if normal else rng.uniform(low, high, size=(rows, cols // 2, 3))
    return np.concatenate([half, half[:, ::-1]], axis=1)


def _group_pattern(rng, size: int) -> np.ndarray:
    return np.kron(_mirrored(rng, 4, 4, 30, 225), np.ones((size // 4, size // 4, 1)))


def generate_synthetic(spec: SyntheticSpec, out_dir=None) -> SyntheticData:
    """Build the corpus in memory; with ``out_dir`` also write catalog.jsonl, sessions.jsonl and images/."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 11])
    n, g_count = spec.n_items, spec.n_groups
    per_group = n // g_count
    groups = np.repeat(np.arange(g_count), per_group)
    size = spec.image_size - spec.image_size % 4

    # content
    patterns = [_group_pattern(rng, size) for _ in range(g_count)]
    stems = []
    while len(stems) < g_count:
        s = _word(rng, 1) + rng.choice(list(_CONSONANTS))
        if s not in stems:
            stems.append(s)
    pools = [[stems[g] + _word(rng, 1) for _ in range(spec.group_tokens)] for g in range(g_count)]
    noise_pool = [_word(rng, 3) for _ in range(spec.noise_tokens)]
    items = []
    for i in range(n):
        g = groups[i]
        detail = np.kron(_mirrored(rng, 2, 2, 0, spec.item_detail, normal=True), np.ones((size // 2, size // 2, 1)))
        px = patterns[g] + detail + rng.normal(0, spec.image_noise, size=(size, size, 3))
        img = RasterImage(np.clip(np.rint(px), 0, 255).astype(np.uint8))
        toks = []
        for _ in range(spec.text_length):
            pool = noise_pool if rng.random() < spec.noise_fraction else pools[g]
            toks.append(pool[int(rng.integers(len(pool)))])
        items.append(Item(i, f"item{i:04d}", img, TokenText(tuple(toks))))
    catalog = Catalog(items, source="synthetic")

    # popularity: power law over a random rank order
    ranks = rng.permutation(n) + 1
    weights = ranks.astype(np.float64) ** -spec.popularity_exponent
    popularity = weights / weights.sum()
    members = [np.flatnonzero(groups == g) for g in range(g_count)]
    in_group = [popularity[m] / popularity[m].sum() for m in members]

    def step(cur: int) -> int:
        g = groups[cur]
        if rng.random() >= spec.p_stay and g_count > 1:
            others = np.flatnonzero(groups != g)
            return int(rng.choice(others, p=popularity[others] / popularity[others].sum()))
        m = members[g]
        if rng.random() < spec.p_local:
            pos = int(np.searchsorted(m, cur))
            return int(m[(pos + int(rng.integers(1, 4))) % len(m)])
        return int(rng.choice(m, p=in_group[g]))

    sessions = []
    for s in range(spec.sessions):
        length = int(np.clip(spec.min_length + rng.geometric(1.0 / max(spec.mean_length - spec.min_length + 1, 1.0)) - 1,
                             spec.min_length, spec.max_length))
        cur = int(rng.choice(n, p=popularity))
        seq = [cur]
        for _ in range(length - 1):
            cur = step(cur)
            seq.append(cur)
        sessions.append(Session(f"s{s:06d}", tuple(seq), timestamp=1_000_000 + 60 * s))
    data = SyntheticData(spec, catalog, sessions, groups, popularity)
    if out_dir is not None:
        write_synthetic(data, out_dir)
    return data


def write_synthetic(data: SyntheticData, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cat_path, sess_path = out / "catalog.jsonl", out / "sessions.jsonl"
    with open(cat_path, "w") as fh:
        for it in data.catalog:
            rel = f"images/{it.external_id}.ppm"
            (out / rel).write_bytes(write_pnm(it.image))
            rec = {"item_id": it.external_id, "image_path": rel, "text": " ".join(it.text.tokens), "group": int(data.groups[it.item_id])}
            fh.write(json.dumps(rec) + "\n")
    with open(sess_path, "w") as fh:
        for s in data.sessions:
            rec = {"session_id": s.session_id, "items": [data.catalog[i].external_id for i in s.item_ids], "ts": s.timestamp}
            fh.write(json.dumps(rec) + "\n")
    return cat_path, sess_path
