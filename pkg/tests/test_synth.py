import json

import numpy as np
import pytest

from macl.embedders import ImageExtractor, TextExtractor
from macl.errors import ConfigError
from macl.synth import SyntheticSpec, generate_synthetic


def test_indivisible_groups_is_config_error():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSpec(n_items=25, n_groups=10))


def test_p_stay_one_gives_single_group_sessions():
    data = generate_synthetic(SyntheticSpec(n_items=40, n_groups=4, sessions=300, p_stay=1.0, image_size=8))
    for s in data.sessions:
        assert len({int(data.groups[i]) for i in s.item_ids}) == 1


def test_deterministic_per_seed():
    spec = SyntheticSpec(n_items=20, n_groups=2, sessions=50, image_size=8, seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert [s.item_ids for s in a.sessions] == [s.item_ids for s in b.sessions]
    assert all(np.array_equal(x.image.pixels, y.image.pixels) for x, y in zip(a.catalog, b.catalog))


def _cos(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


@pytest.mark.parametrize("modality", ["image", "text"])
def test_same_group_features_are_closer(modality):
    data = generate_synthetic(SyntheticSpec(sessions=10, seed=1))
    extract = ImageExtractor() if modality == "image" else TextExtractor()
    feats = [extract(it.image if modality == "image" else it.text) for it in data.catalog]
    rng = np.random.default_rng(0)
    same, cross = [], []
    while len(same) < 100 or len(cross) < 100:
        i, j = rng.choice(len(feats), 2, replace=False)
        bucket = same if data.groups[i] == data.groups[j] else cross
        if len(bucket) < 100:
            bucket.append(_cos(feats[i], feats[j]))
    assert np.mean(same) > np.mean(cross)


def test_power_law_long_tail():
    data = generate_synthetic(SyntheticSpec(n_items=200, sessions=5000, popularity_exponent=1.2, image_size=8))
    counts = np.zeros(200)
    for s in data.sessions:
        np.add.at(counts, list(s.item_ids), 1)
    share = np.sort(counts)[:100].sum() / counts.sum()
    assert share < 0.2


def test_written_files(tmp_path):
    data = generate_synthetic(SyntheticSpec(n_items=10, n_groups=2, sessions=20, image_size=8), tmp_path)
    rows = [json.loads(line) for line in (tmp_path / "catalog.jsonl").read_text().splitlines()]
    assert len(rows) == 10 and all((tmp_path / r["image_path"]).exists() for r in rows)
    sess = [json.loads(line) for line in (tmp_path / "sessions.jsonl").read_text().splitlines()]
    assert len(sess) == len(data.sessions) and all(len(r["items"]) >= 2 for r in sess)
