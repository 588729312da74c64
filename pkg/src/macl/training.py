"""Training loop, inference, ranking metrics and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import (
    AugmentationBank,
    AugmentParams,
    NeighborIndex,
    SignalBatch,
    augmented_session_views,
    item_signal_batch_plan,
    sample_negatives,
    session_technique_plan,
)
from .autodiff import AdamState, Tensor, adam_step, embedding, zero_grad
from .data import Batch, Catalog, DatasetSplit, Session, encode_prefixes, id_map_digest, item_counts, make_batches, stratify
from .embedders import Embedders, build_embedders
from .errors import (
    ConfigError,
    EmptySetError,
    FormatError,
    IncompatibleCheckpointError,
    ItemLookupError,
    TrainingDivergenceError,
)
from .model import ModelConfig, encode_sessions, fused_item_table, init_params
from .objectives import (
    LEGACY_OPS,
    LossBreakdown,
    adaptive_contrastive,
    joint_loss,
    legacy_augment,
    rec_loss,
    rec_probabilities,
    total_contrastive,
)

log = logging.getLogger(__name__)

STREAMS = {"data": 1, "init": 2, "augmentation": 3, "sampling": 4, "dropout": 5}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *extra])


@dataclass
class TrainConfig:
    d: int = 100
    lam: float = 0.01
    M: int = 100
    N: int = 100
    lr: float = 0.001
    epochs: int = 30
    seed: int = 0
    max_len: int = 50
    tau: float = 1.0
    k_list: tuple = (10, 20)
    no_item_cl: bool = False
    no_sess_cl: bool = False
    no_adaptive: bool = False
    legacy_aug: bool = False
    n_heads: int = 2
    n_layers: int = 1
    dropout: float = 0.0
    ce_mode: str = "binary"
    projector: str = "pca"
    crop_ratio: float = 0.2
    noise_ratio: float = 0.05
    blur_sigma: float = 1.0
    swap_ratio: float = 0.1
    delete_ratio: float = 0.1
    substitute_ratio: float = 0.1
    insert_ratio: float = 0.1
    neighbor_k: int = 5
    aug_views: int = 4
    session_technique: str = "per_session"
    legacy_dropout: float = 0.2
    patience: int = 10
    exclude_seen: bool = False
    min_item_count: int = 5
    keep_unpopular: bool = False

    def __post_init__(self):
        if isinstance(self.k_list, str):
            self.k_list = tuple(int(k) for k in self.k_list.split(",") if k.strip())
        self.k_list = tuple(int(k) for k in self.k_list)
        self.validate()

    def validate(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.N < 2:
            raise ConfigError("batch size N must be >= 2")
        if self.d < 1 or self.M < 1 or self.max_len < 1 or self.epochs < 0:
            raise ConfigError("d, M, max_len must be positive and epochs non-negative")
        if self.lr <= 0 or self.tau <= 0:
            raise ConfigError("lr and tau must be positive")
        if self.d % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d={self.d}")
        if self.session_technique not in ("per_session", "per_batch"):
            raise ConfigError("session_technique must be per_session or per_batch")
        if self.ce_mode not in ("binary", "standard"):
            raise ConfigError("ce_mode must be binary or standard")
        if not self.k_list or min(self.k_list) < 1:
            raise ConfigError("k_list must hold positive integers")

    @property
    def augment_params(self) -> AugmentParams:
        return AugmentParams(
            self.crop_ratio,
            self.noise_ratio,
            self.blur_sigma,
            self.swap_ratio,
            self.delete_ratio,
            self.substitute_ratio,
            self.insert_ratio,
            self.neighbor_k,
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["k_list"] = list(self.k_list)
        return out

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse flat ``key=value`` lines; unknown keys are errors."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        defaults = cls.__new__(cls)
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val, types[key])
        del defaults
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_value(key, val, typ):
    typ = str(typ)
    try:
        if typ == "bool":
            low = val.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "tuple":
            return tuple(int(k) for k in val.split(",") if k.strip())
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None


# -- model ---------------------------------------------------------------------
@dataclass
class MACLModel:
    config: TrainConfig
    model_cfg: ModelConfig
    params: dict[str, Tensor]
    image_table: np.ndarray
    text_table: np.ndarray
    has_image: np.ndarray
    has_text: np.ndarray
    external_ids: list[str]
    epoch: int = 0

    @property
    def n_items(self) -> int:
        return self.model_cfg.n_items

    @property
    def id_digest(self) -> str:
        return id_map_digest(self.external_ids)

    def item_table(self) -> Tensor:
        return fused_item_table(self.params, self.image_table, self.text_table, self.has_image, self.has_text)

    def encode_tokens(self, table: Tensor, tokens: np.ndarray, lengths, rng=None) -> Tensor:
        tokens, lengths = trim_padding(tokens, lengths)
        seq = embedding(table, tokens, padding_idx=None)
        return encode_sessions(self.params, seq, lengths, self.model_cfg, rng=rng)

    def scores(self, tokens: np.ndarray, lengths) -> np.ndarray:
        """(B, n) inner-product logits, no graph recorded."""
        table = Tensor(self.item_table().data)
        s = self.encode_tokens(table, tokens, lengths)
        return s.data @ table.data[1:].T

    def parameter_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()


def trim_padding(tokens: np.ndarray, lengths) -> tuple[np.ndarray, np.ndarray]:
    """Drop leading all-padding columns (positions are anchored at the right edge)."""
    lengths = np.asarray(lengths)
    width = max(int(lengths.max()) if lengths.size else 1, 1)
    return tokens[..., tokens.shape[-1] - width :], lengths


def build_model(config: TrainConfig, catalog: Catalog, embedders: Embedders) -> MACLModel:
    mcfg = ModelConfig(len(catalog), config.d, config.max_len, config.n_heads, config.n_layers, dropout=config.dropout)
    params = init_params(mcfg, stream(config.seed, "init"))
    return MACLModel(
        config,
        mcfg,
        params,
        embedders.image_table,
        embedders.text_table,
        embedders.has_image.astype(np.float64),
        embedders.has_text.astype(np.float64),
        catalog.external_ids,
    )


# -- one training step -----------------------------------------------------------
@dataclass
class StepInputs:
    """Everything random about one step, frozen so the loss is a pure function of the parameters."""

    tokens: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    item_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    item_pos: np.ndarray | None = None  # (U, d) constants, or (U, d) dropout mask in legacy mode
    item_neg: np.ndarray | None = None  # (U, M, d) constants, or dropout masks in legacy mode
    item_neg_ids: np.ndarray | None = None  # legacy mode only
    sess_views: np.ndarray | None = None  # (T, B, L, d) embeddings, or (T, B, L) tokens in legacy mode
    sess_lengths: np.ndarray | None = None  # (T, B)
    sess_valid: np.ndarray | None = None  # (T, B)
    sess_plan: np.ndarray | None = None  # (B,) technique row per session, -1 for none
    dropout_seed: int | None = None


def batch_items(batch: Batch) -> np.ndarray:
    toks = np.concatenate([batch.inputs[batch.inputs > 0] - 1, batch.labels])
    return np.unique(toks)


def make_step_inputs(model: MACLModel, batch: Batch, bank: AugmentationBank | None, rng: np.random.Generator, sampler: np.random.Generator) -> StepInputs:
    cfg = model.config
    tokens, lengths = trim_padding(batch.inputs, batch.lengths)
    si = StepInputs(tokens, lengths.copy(), batch.labels.copy())
    if cfg.dropout > 0:
        si.dropout_seed = int(rng.integers(2**31))
    prefixes = [list(row[row > 0] - 1) for row in tokens]
    b, width = tokens.shape
    d = cfg.d
    if not cfg.no_item_cl:
        items = batch_items(batch)
        if cfg.legacy_aug:
            n = model.n_items
            if n - 1 < cfg.M:
                raise ConfigError(f"M={cfg.M} negatives need more than {n} items")
            keep = 1.0 - cfg.legacy_dropout
            everything = np.ones(n, dtype=bool)
            si.item_ids = items
            si.item_neg_ids = np.stack([sample_negatives(i, everything, cfg.M, sampler) for i in items]) if len(items) else np.zeros((0, cfg.M), dtype=np.int64)
            si.item_pos = (rng.random((len(items), d)) < keep) / keep
            si.item_neg = (rng.random((len(items), cfg.M, d)) < keep) / keep
        else:
            ids, _, pos, neg = item_signal_batch_plan(items, bank, cfg.M, sampler)
            si.item_ids, si.item_pos, si.item_neg = ids, pos, neg
    if not cfg.no_sess_cl:
        if cfg.legacy_aug:
            ops = [LEGACY_OPS[int(rng.integers(len(LEGACY_OPS)))] for _ in range(b)]
            used = sorted(set(ops), key=LEGACY_OPS.index)
            views = np.zeros((len(used), b, width), dtype=np.int64)
            lens = np.zeros((len(used), b), dtype=np.int64)
            valid = np.zeros((len(used), b), dtype=bool)
            for ti, op in enumerate(used):
                for j, p in enumerate(prefixes):
                    aug = [x + 1 for x in p]
                    if len(p) >= 2:
                        aug = legacy_augment(aug, op, rng)
                        valid[ti, j] = True
                    views[ti, j, width - len(aug) :] = aug
                    lens[ti, j] = len(aug)
            plan = np.array([used.index(op) if len(p) >= 2 else -1 for op, p in zip(ops, prefixes)])
        else:
            techs = session_technique_plan(prefixes, bank, rng, per_batch=cfg.session_technique == "per_batch")
            views, valid, used = augmented_session_views(prefixes, techs, bank, width, sampler)
            lens = np.tile(lengths, (len(used), 1))
            plan = np.array([used.index(t) if t is not None else -1 for t in techs])
        si.sess_views, si.sess_lengths, si.sess_valid, si.sess_plan = views, lens, valid, plan
    return si


def forward_loss(model: MACLModel, si: StepInputs) -> tuple[Tensor, LossBreakdown]:
    """Joint loss of one step; deterministic given ``si``."""
    cfg = model.config
    params = model.params
    drop_rng = np.random.default_rng(si.dropout_seed) if si.dropout_seed is not None else None
    table = model.item_table()
    s = model.encode_tokens(table, si.tokens, si.lengths, rng=drop_rng)
    y = rec_probabilities(table[1:], s)
    rec = rec_loss(y, si.labels, cfg.ce_mode)
    item_con: Tensor | float = 0.0
    sess_con: Tensor | float = 0.0
    alpha = beta = np.zeros(0)
    adaptive = not cfg.no_adaptive
    if not cfg.no_item_cl and len(si.item_ids):
        anchors = embedding(table, si.item_ids + 1, padding_idx=None)
        if cfg.legacy_aug:
            pos = anchors * Tensor(si.item_pos)
            neg = embedding(table, si.item_neg_ids + 1, padding_idx=None) * Tensor(si.item_neg)
        else:
            pos, neg = Tensor(si.item_pos), Tensor(si.item_neg)
        item_con, alpha = adaptive_contrastive(SignalBatch(anchors, pos, neg), params, "item", cfg.tau, adaptive)
    if not cfg.no_sess_cl and si.sess_plan is not None:
        sets = _session_sets(model, table, s, si, drop_rng)
        if sets is not None and (len(sets) >= 2 or not adaptive):
            sess_con, beta = adaptive_contrastive(sets, params, "session", cfg.tau, adaptive)
    con = total_contrastive(item_con, sess_con)
    total = joint_loss(rec, con, cfg.lam)
    if not isinstance(total, Tensor):
        total = Tensor(total)
    br = LossBreakdown(
        float(rec.data),
        float(_value(item_con)),
        float(_value(sess_con)),
        float(total.data),
        alpha,
        beta,
    )
    return total, br


def _value(x):
    return x.data if isinstance(x, Tensor) else x


def _session_sets(model, table, s, si: StepInputs, drop_rng) -> SignalBatch | None:
    t_count, b = si.sess_valid.shape
    if t_count == 0:
        return None
    if model.config.legacy_aug:
        flat_tokens = si.sess_views.reshape(t_count * b, -1)
        enc = model.encode_tokens(table, flat_tokens, si.sess_lengths.reshape(-1), rng=drop_rng)
    else:
        width = si.sess_views.shape[2]
        flat = Tensor(si.sess_views.reshape(t_count * b, width, -1))
        enc = encode_sessions(model.params, flat, si.sess_lengths.reshape(-1), model.model_cfg, rng=drop_rng)
    anchors, pos_idx, neg_idx, masks = [], [], [], []
    for i in range(b):
        t = si.sess_plan[i]
        if t < 0 or not si.sess_valid[t, i]:
            continue
        others = [j for j in range(b) if j != i]
        mask = si.sess_valid[t, others]
        if not mask.any():
            continue
        anchors.append(i)
        pos_idx.append(t * b + i)
        neg_idx.append([t * b + j for j in others])
        masks.append(mask)
    if not anchors:
        return None
    a = s[np.array(anchors)]
    pos = enc[np.array(pos_idx)]
    neg = enc[np.array(neg_idx)]
    return SignalBatch(a, pos, neg, np.array(masks))


# -- training loop ---------------------------------------------------------------
LOSS_LOG_COLUMNS = ("epoch", "step", "rec", "item_con", "sess_con", "total", "mean_alpha", "mean_beta")


@dataclass
class TrainResult:
    model: MACLModel
    loss_log: list[dict]
    history: list[dict]
    best_epoch: int
    embedders: Embedders | None = None


def prepare_augmentation(config: TrainConfig, catalog: Catalog, embedders: Embedders):
    """Neighbour index and augmentation bank, or (None, None) when no multi-modal contrast is active."""
    if config.legacy_aug or (config.no_item_cl and config.no_sess_cl):
        return None, None
    neighbors = None
    if embedders.text is not None:
        neighbors = NeighborIndex.from_catalog(catalog, embedders.text.extractor, config.neighbor_k)
    bank = AugmentationBank(
        catalog, embedders, neighbors, config.aug_views, seed=config.seed * 1000 + STREAMS["augmentation"], params=config.augment_params
    )
    return neighbors, bank


def train(
    config: TrainConfig,
    splits: DatasetSplit,
    catalog: Catalog,
    embedders: Embedders | None = None,
    evaluate_every_epoch: bool = True,
) -> TrainResult:
    """Minimise rec + lam * (item_con + sess_con) with Adam; keep the best validation Prec@20."""
    if embedders is None:
        embedders = build_embedders(catalog, config.d, config.projector, config.seed)
    _, bank = prepare_augmentation(config, catalog, embedders)
    model = build_model(config, catalog, embedders)
    state = AdamState(learning_rate=config.lr)
    aug_rng = stream(config.seed, "augmentation")
    sampler = stream(config.seed, "sampling")
    loss_log: list[dict] = []
    history: list[dict] = []
    best = (-1.0, 0, model.parameter_snapshot())
    bad_epochs = 0
    for epoch in range(1, config.epochs + 1):
        batches = make_batches(splits.train, config.N, config.max_len, seed=int(stream(config.seed, "data", epoch).integers(2**31)))
        for step, batch in enumerate(batches):
            si = make_step_inputs(model, batch, bank, aug_rng, sampler)
            zero_grad(model.params.values())
            total, br = forward_loss(model, si)
            if not math.isfinite(br.total):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            total.backward()
            try:
                adam_step(model.params, state)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"epoch {epoch}, step {step}: {exc}") from None
            loss_log.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "rec": br.rec,
                    "item_con": br.item_con,
                    "sess_con": br.sess_con,
                    "total": br.total,
                    "mean_alpha": br.mean_alpha,
                    "mean_beta": br.mean_beta,
                }
            )
        model.epoch = epoch
        if not evaluate_every_epoch or not splits.validation:
            best = (0.0, epoch, model.parameter_snapshot())
            continue
        val = evaluate(model, splits.validation, sorted(set(config.k_list) | {20}))
        history.append({"epoch": epoch, "val_prec20": val.precision[20], "val_mrr20": val.mrr[20]})
        log.info("epoch %d  val Prec@20 %.4f", epoch, val.precision[20])
        if val.precision[20] > best[0]:
            best = (val.precision[20], epoch, model.parameter_snapshot())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    model.load_snapshot(best[2])
    model.epoch = best[1]
    return TrainResult(model, loss_log, history, best[1], embedders)


# -- inference and metrics -----------------------------------------------------------
def target_ranks(model: MACLModel, sessions: Sequence[Session], batch_size: int = 256) -> np.ndarray:
    """1-based rank of each session's label; ties go to the lower dense id."""
    ranks = np.zeros(len(sessions), dtype=np.int64)
    for start in range(0, len(sessions), batch_size):
        chunk = sessions[start : start + batch_size]
        tokens, lengths = encode_prefixes([s.prefix for s in chunk], model.config.max_len)
        sc = model.scores(tokens, lengths)
        if model.config.exclude_seen:
            sc = _mask_seen(sc, [s.prefix for s in chunk])
        labels = np.array([s.label for s in chunk])
        ranks[start : start + len(chunk)] = ranks_from_scores(sc, labels)
    return ranks


def _mask_seen(sc, prefixes):
    sc = sc.copy()
    for r, p in enumerate(prefixes):
        sc[r, list(p)] = -np.inf
    return sc


def ranks_from_scores(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    rows = np.arange(len(labels))
    st = scores[rows, labels][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    better = (scores > st) | ((scores == st) & (ids < labels[:, None]))
    return 1 + better.sum(axis=1)


@dataclass
class MetricsReport:
    precision: dict[int, float]
    mrr: dict[int, float]
    count: int
    strata: list = field(default_factory=list)

    def rows(self, split: str = "test", group: str = "all") -> list[dict]:
        return [
            {"split": split, "group": group, "k": k, "precision": self.precision[k], "mrr": self.mrr[k], "count": self.count}
            for k in sorted(self.precision)
        ]


def metrics_from_ranks(ranks: np.ndarray, k_list: Sequence[int]) -> MetricsReport:
    if len(ranks) == 0:
        raise EmptySetError("cannot evaluate an empty session set")
    n = len(ranks)
    by_rank = np.bincount(ranks)
    prec, mrr = {}, {}
    for k in k_list:
        top = by_rank[1 : k + 1]
        prec[int(k)] = int(top.sum()) / n
        # exact rational sum, rounded once, so results do not depend on summation order
        mrr[int(k)] = float(sum(Fraction(int(c), r) for r, c in enumerate(top, 1)) / n)
    return MetricsReport(prec, mrr, n)


def evaluate(model: MACLModel, sessions: Sequence[Session], k_list: Sequence[int] = (10, 20)) -> MetricsReport:
    """Prec@k and MRR@k of the last-item label given the prefix."""
    if not sessions:
        raise EmptySetError("cannot evaluate an empty session set")
    return metrics_from_ranks(target_ranks(model, sessions), k_list)


def training_popularity(train_sessions: Sequence[Session]) -> dict[int, int]:
    return dict(item_counts(train_sessions))


def stratified_evaluate(
    model: MACLModel,
    sessions: Sequence[Session],
    axis: str,
    boundaries: Sequence[float],
    k_list: Sequence[int] = (10, 20),
    popularity: dict[int, int] | None = None,
) -> list[tuple]:
    """Per-stratum reports; empty strata get ``None`` metrics."""
    if axis == "item_popularity" and popularity is None:
        raise ConfigError("popularity stratification needs training-set item counts")
    groups = stratify(list(sessions), axis, boundaries, popularity)
    ranks = target_ranks(model, sessions) if sessions else np.zeros(0, dtype=np.int64)
    out = []
    for g in groups:
        rep = metrics_from_ranks(ranks[g.indices], k_list) if g.count else None
        out.append((g, rep))
    return out


def recommend(model: MACLModel, session_prefix: Sequence[str], k: int, exclude_seen: bool | None = None) -> list[tuple[str, float]]:
    """Top-k (external id, probability) for a prefix of external ids."""
    index = {ext: i for i, ext in enumerate(model.external_ids)}
    unknown = [x for x in session_prefix if x not in index]
    if unknown:
        raise ItemLookupError(f"unknown item ids in session: {unknown}")
    dense = [index[x] for x in session_prefix]
    if not dense:
        raise ItemLookupError("empty session prefix")
    tokens, lengths = encode_prefixes([dense], model.config.max_len)
    logits = model.scores(tokens, lengths)[0]
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    if model.config.exclude_seen if exclude_seen is None else exclude_seen:
        probs[dense] = -np.inf
    order = np.lexsort((np.arange(len(probs)), -probs))
    top = order[: min(k, len(probs))]
    return [(model.external_ids[i], float(probs[i])) for i in top if np.isfinite(probs[i])]


# -- checkpoints ------------------------------------------------------------------
CKPT_MAGIC = b"MACLCKPT"
CKPT_VERSION = 1


def checkpoint_save(model: MACLModel, path) -> None:
    """Little-endian: magic, u32 version, u32 header length, JSON header, then named float64 records."""
    header = {
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "epoch": model.epoch,
        "n_items": model.n_items,
        "id_map_digest": model.id_digest,
        "external_ids": model.external_ids,
    }
    arrays = {f"param.{k}": v.data for k, v in model.params.items()}
    arrays.update(
        {
            "const.image_table": model.image_table,
            "const.text_table": model.text_table,
            "const.has_image": model.has_image,
            "const.has_text": model.has_text,
        }
    )
    buf = io.BytesIO()
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hdr)) + hdr)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def checkpoint_load(path, config: TrainConfig | None = None, id_map_digest_expected: str | None = None) -> MACLModel:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        off = len(CKPT_MAGIC)
        version, hlen = struct.unpack_from("<II", raw, off)
        off += 8
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[off : off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nl].decode()
            off += nl
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(raw):
                raise FormatError(f"{path}: truncated record {name!r}")
            arrays[name] = np.frombuffer(raw[off : off + size], dtype="<f8").reshape(shape).astype(np.float64)
            off += size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if id_map_digest_expected is not None and header["id_map_digest"] != id_map_digest_expected:
        raise IncompatibleCheckpointError("checkpoint was trained on a different id_map")
    cfg_dict = dict(header["config"])
    saved_cfg = TrainConfig(**{**cfg_dict, "k_list": tuple(cfg_dict["k_list"])})
    if config is not None:
        for key in ("d", "max_len", "n_heads", "n_layers"):
            if getattr(config, key) != getattr(saved_cfg, key):
                raise IncompatibleCheckpointError(
                    f"checkpoint {key}={getattr(saved_cfg, key)} does not match config {key}={getattr(config, key)}"
                )
    mcfg = ModelConfig(header["n_items"], saved_cfg.d, saved_cfg.max_len, saved_cfg.n_heads, saved_cfg.n_layers, dropout=saved_cfg.dropout)
    expected = init_params(mcfg, np.random.default_rng(0))
    params = {}
    for name, t in expected.items():
        arr = arrays.get(f"param.{name}")
        if arr is None or arr.shape != t.shape:
            raise IncompatibleCheckpointError(f"parameter {name!r} missing or mis-shaped")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return MACLModel(
        saved_cfg,
        mcfg,
        params,
        arrays["const.image_table"],
        arrays["const.text_table"],
        arrays["const.has_image"],
        arrays["const.has_text"],
        list(header["external_ids"]),
        header["epoch"],
    )


def write_loss_log(rows: Sequence[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOSS_LOG_COLUMNS})


METRICS_COLUMNS = ("split", "group", "k", "precision", "mrr", "count")


def write_metrics(rows: Sequence[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRICS_COLUMNS})
