"""Source-sentence encoder.

Stack of post-LN self-attention layers: H_bar = LN(Att(x) + x),
H = LN(FFN(H_bar) + H_bar). Attention is multi-head with per-head
query/key/value maps and sqrt(head_dim) score scaling; head outputs are
concatenated (no extra output projection). A whole-sentence slot token is
prepended at position 0; its final column is the sentence embedding s and the
remaining columns (the word embeddings w) exclude it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .tensor import Tensor
from .vocab import SENT, TokenSeq


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed positional table, (n, d): sin on even dims, cos on odd dims."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def attention_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                   pad_mask=None) -> Tensor:
    """Single-head self-attention for one sequence: (L,d) -> (L,dh)."""
    q = T.matmul(x, wq)
    k = T.matmul(x, wk)
    v = T.matmul(x, wv)
    dh = wq.shape[-1]
    scores = T.scale(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(dh))
    mask = None if pad_mask is None else np.broadcast_to(
        np.asarray(pad_mask, bool)[None, :], scores.shape)
    attn = T.softmax(scores, axis=-1, mask=mask)
    return T.matmul(attn, v)


def multi_head_attention(q_src: Tensor, kv_src: Tensor, wq: Tensor, wk: Tensor,
                         wv: Tensor, key_mask=None, causal: bool = False) -> Tensor:
    """Batched multi-head attention, heads concatenated.

    q_src (B,T,d), kv_src (B,S,d); wq/wk/wv (h,d,dh); key_mask (B,S) bool.
    Returns (B,T,h*dh)."""
    b, t, d = q_src.shape
    s = kv_src.shape[1]
    h, _, dh = wq.shape
    q = T.matmul(T.reshape(q_src, (b, 1, t, d)), wq)   # (B,h,T,dh)
    k = T.matmul(T.reshape(kv_src, (b, 1, s, d)), wk)  # (B,h,S,dh)
    v = T.matmul(T.reshape(kv_src, (b, 1, s, d)), wv)
    scores = T.scale(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(dh))  # (B,h,T,S)
    mask = np.ones((b, 1, t, s), dtype=bool)
    if key_mask is not None:
        mask = mask & np.asarray(key_mask, bool)[:, None, None, :]
    if causal:
        mask = mask & np.tril(np.ones((t, s), dtype=bool))[None, None]
    attn = T.softmax(scores, axis=-1, mask=np.broadcast_to(mask, (b, h, t, s)))
    out = T.matmul(attn, v)                            # (B,h,T,dh)
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, h * dh))


def feed_forward(x: Tensor, p: dict) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, p["ffn_w1"]), p["ffn_b1"]))
    return T.add(T.matmul(hidden, p["ffn_w2"]), p["ffn_b2"])


def encoder_layer(x: Tensor, p: dict, key_mask=None, dropout: float = 0.0,
                  rng=None, training: bool = False) -> Tensor:
    """One post-LN block over (B,L,d)."""
    att = multi_head_attention(x, x, p["wq"], p["wk"], p["wv"], key_mask=key_mask)
    att = T.dropout(att, dropout, rng, training)
    h_bar = T.layer_norm(T.add(att, x), p["ln1_g"], p["ln1_b"])
    ffn = T.dropout(feed_forward(h_bar, p), dropout, rng, training)
    return T.layer_norm(T.add(ffn, h_bar), p["ln2_g"], p["ln2_b"])


def embed_sequence(ids: np.ndarray, table: Tensor, d: int, dropout: float = 0.0,
                   rng=None, training: bool = False) -> Tensor:
    """(B,L) ids -> (B,L,d): scaled embeddings plus fixed positional table."""
    emb = T.scale(T.embedding_lookup(table, ids), np.sqrt(d))
    pos = T.constant(sinusoidal_positions(ids.shape[1], d)[None])
    return T.dropout(T.add(emb, pos), dropout, rng, training)


def encode_batch(ids: np.ndarray, pad_mask: np.ndarray, params: dict,
                 cfg: RunConfig, rng=None, training: bool = False):
    """ids (B,L) WITHOUT the sentence slot; prepends it at position 0.

    Returns (w, s, full_mask): w (B,L,d) word columns, s (B,d) sentence
    embedding, full_mask (B,L+1) including the always-real slot position."""
    b, length = ids.shape
    if length == 0:
        raise T.ShapeMismatch("encode: empty source sequence")
    with_sent = np.concatenate(
        [np.full((b, 1), SENT, dtype=np.int64), ids.astype(np.int64)], axis=1)
    full_mask = np.concatenate([np.ones((b, 1), dtype=bool),
                                np.asarray(pad_mask, bool)], axis=1)
    h = embed_sequence(with_sent, params["embed"], cfg.d_model,
                       cfg.dropout, rng, training)
    for i in range(cfg.layers):
        h = encoder_layer(h, params[f"l{i}"], key_mask=full_mask,
                          dropout=cfg.dropout, rng=rng, training=training)
    w = T.slice_tensor(h, (slice(None), slice(1, None), slice(None)))
    s = T.slice_tensor(h, (slice(None), 0, slice(None)))
    return w, s, full_mask


@dataclass
class EncodedSource:
    """Single-sequence view: w (d, L) word columns, s (d,) sentence vector."""
    w: Tensor
    s: Tensor
    pad_mask: np.ndarray


def encode(seq: TokenSeq, params: dict, cfg: RunConfig) -> EncodedSource:
    """Deterministic single-example encode (no dropout)."""
    w, s, _ = encode_batch(seq.ids[None], seq.pad_mask[None], params, cfg)
    w_single = T.slice_tensor(w, (0, slice(None), slice(None)))  # (Lp, d)
    w_real = T.slice_tensor(w_single, seq.pad_mask)              # drop pad rows
    return EncodedSource(w=T.swap_last2(w_real),
                         s=T.slice_tensor(s, (0, slice(None))),
                         pad_mask=np.ones(int(seq.pad_mask.sum()), dtype=bool))
