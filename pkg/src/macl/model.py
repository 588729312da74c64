"""Gated multi-modal item fusion and the causal self-attention session encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, embedding, layer_norm, softmax
from .embedders import init_id_table
from .errors import ConfigError, ContractError, DimensionError

MASK_VALUE = -1e30


@dataclass(frozen=True)
class ModelConfig:
    n_items: int
    d: int = 100
    max_len: int = 50
    n_heads: int = 2
    n_layers: int = 1
    d_ff: int | None = None
    ln_eps: float = 1e-8
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d={self.d}")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d)


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, f = cfg.d, cfg.d_ff
    p: dict[str, np.ndarray] = {}
    p["id_table"] = init_id_table(cfg.n_items, d, rng)
    # fusion weights act on column vectors: m = W [e_id; e_img; e_txt]
    p["fusion.W"] = _xavier(rng, 3 * d, d, (d, 3 * d))
    for k in ("W1", "W2", "W3", "W4"):
        p[f"fusion.{k}"] = _xavier(rng, d, d)
    p["enc.pos"] = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(cfg.max_len, d))
    for layer in range(cfg.n_layers):
        pre = f"enc.{layer}."
        for k in ("q", "k", "v", "o"):
            p[pre + f"W{k}"] = _xavier(rng, d, d)
            p[pre + f"b{k}"] = np.zeros(d)
        p[pre + "ln1_g"] = np.ones(d)
        p[pre + "ln1_b"] = np.zeros(d)
        p[pre + "ff1_W"] = _xavier(rng, d, f)
        p[pre + "ff1_b"] = np.zeros(f)
        p[pre + "ff2_W"] = _xavier(rng, f, d)
        p[pre + "ff2_b"] = np.zeros(d)
        p[pre + "ln2_g"] = np.ones(d)
        p[pre + "ln2_b"] = np.zeros(d)
    for net in ("wnet.item", "wnet.sess"):
        p[f"{net}.W1"] = _xavier(rng, 3 * d, d)
        p[f"{net}.b1"] = np.zeros(d)
        p[f"{net}.W2"] = _xavier(rng, d, d)
        p[f"{net}.b2"] = np.zeros(d)
        p[f"{net}.W3"] = _xavier(rng, d, 1)
        p[f"{net}.b3"] = np.zeros(1)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


# -- fusion -------------------------------------------------------------------
def fuse_items(params, e_id: Tensor, e_img: Tensor, e_txt: Tensor, img_present=None, txt_present=None) -> Tensor:
    """Row-wise gated fusion of (B, d) ID, image and text embeddings.

    ``*_present`` are optional (B,) 0/1 masks; an absent modality's gated term
    is multiplied by exactly zero.
    """
    e_id, e_img, e_txt = (x if isinstance(x, Tensor) else Tensor(x) for x in (e_id, e_img, e_txt))
    if not (e_id.shape == e_img.shape == e_txt.shape):
        raise DimensionError(f"fusion inputs disagree: {e_id.shape}, {e_img.shape}, {e_txt.shape}")
    d = params["fusion.W1"].shape[0]
    if e_id.shape[-1] != d:
        raise DimensionError(f"fusion expects width {d}, got {e_id.shape[-1]}")
    m = concat([e_id, e_img, e_txt], axis=-1) @ params["fusion.W"].T
    g1 = (m @ params["fusion.W1"].T + e_img @ params["fusion.W2"].T).tanh()
    g2 = (m @ params["fusion.W3"].T + e_txt @ params["fusion.W4"].T).tanh()
    img_term = g1 * e_img
    txt_term = g2 * e_txt
    if img_present is not None:
        img_term = img_term * Tensor(np.asarray(img_present, dtype=np.float64)[..., None])
    if txt_present is not None:
        txt_term = txt_term * Tensor(np.asarray(txt_present, dtype=np.float64)[..., None])
    return e_id + img_term + txt_term


def fuse_item(params, e_id, e_img, e_txt, img_missing: bool = False, txt_missing: bool = False) -> Tensor:
    """Single-item form of :func:`fuse_items` on d-vectors."""
    out = fuse_items(
        params,
        _row(e_id),
        _row(e_img),
        _row(e_txt),
        np.array([0.0 if img_missing else 1.0]),
        np.array([0.0 if txt_missing else 1.0]),
    )
    return out[0]


def _row(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x.reshape(1, -1)


def fused_item_table(params, image_table, text_table, has_image, has_text) -> Tensor:
    """(n + 1, d) fused embeddings; row 0 is the all-zero padding row."""
    n = image_table.shape[0]
    ids = embedding(params["id_table"], np.arange(1, n + 1))
    fused = fuse_items(params, ids, Tensor(image_table), Tensor(text_table), has_image, has_text)
    pad = Tensor(np.zeros((1, fused.shape[1])))
    return concat([pad, fused], axis=0)


# -- encoder ------------------------------------------------------------------
def attention_bias(lengths: np.ndarray, seq_len: int) -> np.ndarray:
    """(B, 1, L, L) additive mask: causal, padded keys hidden, self always visible."""
    lengths = np.asarray(lengths)
    pos = np.arange(seq_len)
    key_ok = pos[None, :] >= (seq_len - lengths)[:, None]  # (B, L)
    causal = pos[None, :] <= pos[:, None]  # (L, L) [query, key]
    allowed = causal[None] & key_ok[:, None, :]
    allowed |= np.eye(seq_len, dtype=bool)[None]
    return np.where(allowed, 0.0, MASK_VALUE)[:, None]


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def encode_sessions(
    params,
    seq: Tensor,
    lengths,
    cfg: ModelConfig,
    return_all: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode left-padded (B, L, d) item embeddings; returns (B, d) last-position states.

    ``rng`` enables dropout (training only); ``return_all`` yields (B, L, d).
    """
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    b, L, d = seq.shape
    if L > cfg.max_len:
        raise ContractError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    lengths = np.asarray(lengths)
    if lengths.shape != (b,) or (lengths > L).any():
        raise ContractError("lengths must be (B,) and no longer than the padded width")
    h_n = cfg.n_heads
    dh = d // h_n
    x = seq + params["enc.pos"][cfg.max_len - L :]
    x = _dropout(x, cfg.dropout, rng)
    bias = Tensor(attention_bias(lengths, L))
    scale = 1.0 / np.sqrt(dh)
    for layer in range(cfg.n_layers):
        pre = f"enc.{layer}."

        def heads(t):
            return t.reshape(b, L, h_n, dh).transpose(0, 2, 1, 3)

        q = heads(x @ params[pre + "Wq"] + params[pre + "bq"])
        k = heads(x @ params[pre + "Wk"] + params[pre + "bk"])
        v = heads(x @ params[pre + "Wv"] + params[pre + "bv"])
        att = softmax((q @ k.swapaxes(-1, -2)) * scale + bias, axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, L, d)
        o = o @ params[pre + "Wo"] + params[pre + "bo"]
        h = layer_norm(x + _dropout(o, cfg.dropout, rng), params[pre + "ln1_g"], params[pre + "ln1_b"], cfg.ln_eps)
        f = (h @ params[pre + "ff1_W"] + params[pre + "ff1_b"]).relu()
        f = f @ params[pre + "ff2_W"] + params[pre + "ff2_b"]
        x = layer_norm(h + _dropout(f, cfg.dropout, rng), params[pre + "ln2_g"], params[pre + "ln2_b"], cfg.ln_eps)
    if return_all:
        return x
    return x[:, L - 1, :]


def session_embeddings(params, item_table: Tensor, tokens: np.ndarray, lengths, cfg: ModelConfig, rng=None) -> Tensor:
    """Look up (B, L) tokens in the fused table and encode them."""
    seq = embedding(item_table, tokens, padding_idx=None)
    return encode_sessions(params, seq, lengths, cfg, rng=rng)
