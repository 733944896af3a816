"""Fusion of imagined visual features with the source text, and the decoder.

The refined grid's columns are projected to model width and appended after
the word rows (text first, no positional encoding on visual rows). A single
attention block then queries with every row but keys and values come from
the TEXT rows only, so each visual pseudo-token is re-expressed as a mixture
of word representations before the decoder cross-attends over the result.
With zero visual rows this degenerates exactly to a standard self-attention
block over the words, which is the text-only baseline.

The decoder is a post-LN Transformer stack: causal self-attention, then
cross-attention over the fused memory, then the feed-forward block."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import RunConfig
from .encoder import embed_sequence, feed_forward, multi_head_attention
from .tensor import Tensor
from .vocab import BOS, EOS


def project_visual_batch(refined: Tensor, params: dict) -> Tensor:
    """(B,C1,r,r) grid -> (B, r*r, d) rows, a plain linear map per column."""
    b, c, r, _ = refined.shape
    cols = T.swap_last2(T.reshape(refined, (b, c, r * r)))   # (B,N,C1)
    return T.add(T.matmul(cols, params["vis_w"]), params["vis_b"])


def aggregate_batch(w: Tensor, w_mask: np.ndarray, visual_rows: Tensor | None,
                    params: dict, cfg: RunConfig, rng=None,
                    training: bool = False):
    """Returns (memory (B, L+M, d), memory_mask (B, L+M)).

    Queries are all rows in text-first order; keys/values are the word rows
    alone. visual_rows None or zero-width means text-only."""
    b, length, _ = w.shape
    if visual_rows is not None and visual_rows.shape[1] > 0:
        x = T.concat([w, visual_rows], axis=1)
        mem_mask = np.concatenate(
            [w_mask, np.ones((b, visual_rows.shape[1]), dtype=bool)], axis=1)
    else:
        x = w
        mem_mask = np.asarray(w_mask, dtype=bool)
    att = multi_head_attention(x, w, params["wq"], params["wk"], params["wv"],
                               key_mask=w_mask)
    att = T.dropout(att, cfg.dropout, rng, training)
    h_bar = T.layer_norm(T.add(att, x), params["ln1_g"], params["ln1_b"])
    ffn = T.dropout(feed_forward(h_bar, params), cfg.dropout, rng, training)
    out = T.layer_norm(T.add(ffn, h_bar), params["ln2_g"], params["ln2_b"])
    return out, mem_mask


def decoder_layer(x: Tensor, memory: Tensor, p: dict, self_mask: np.ndarray,
                  mem_mask: np.ndarray, dropout: float = 0.0, rng=None,
                  training: bool = False) -> Tensor:
    att = multi_head_attention(x, x, p["self_wq"], p["self_wk"], p["self_wv"],
                               key_mask=self_mask, causal=True)
    att = T.dropout(att, dropout, rng, training)
    h1 = T.layer_norm(T.add(att, x), p["ln1_g"], p["ln1_b"])
    cross = multi_head_attention(h1, memory, p["cross_wq"], p["cross_wk"],
                                 p["cross_wv"], key_mask=mem_mask)
    cross = T.dropout(cross, dropout, rng, training)
    h2 = T.layer_norm(T.add(cross, h1), p["ln2_g"], p["ln2_b"])
    ffn = T.dropout(feed_forward(h2, p), dropout, rng, training)
    return T.layer_norm(T.add(ffn, h2), p["ln3_g"], p["ln3_b"])


def decode_batch(memory: Tensor, mem_mask: np.ndarray, tgt_in: np.ndarray,
                 tgt_in_mask: np.ndarray, params: dict, cfg: RunConfig,
                 rng=None, training: bool = False) -> Tensor:
    """Teacher-forced decoder logits (B, T, V) for shifted input tgt_in."""
    x = embed_sequence(tgt_in, params["embed"], cfg.d_model, cfg.dropout,
                       rng, training)
    for i in range(cfg.layers):
        x = decoder_layer(x, memory, params[f"l{i}"], tgt_in_mask, mem_mask,
                          cfg.dropout, rng, training)
    return T.add(T.matmul(x, params["out_w"]), params["out_b"])


def translation_nll_batch(logits: Tensor, labels: np.ndarray,
                          label_mask: np.ndarray, smoothing: float = 0.0):
    """Summed label NLL over real positions; also token and greedy-hit counts."""
    per_pos = T.cross_entropy_with_logits(logits, labels, smoothing=smoothing)
    mask_f = np.asarray(label_mask, np.float64)
    total = T.tsum(T.mul(per_pos, T.constant(mask_f)))
    n_tokens = int(mask_f.sum())
    hits = int(((np.argmax(logits.values, axis=-1) == labels) & label_mask).sum())
    return total, n_tokens, hits


def shifted_pairs(tgt_ids: np.ndarray, tgt_mask: np.ndarray):
    """Teacher-forcing views: input [<bos>, y_1..y_T], labels [y_1..y_T, <eos>].

    Pads keep their position; the appended <eos> label sits right after the
    last real token of each row."""
    b, length = tgt_ids.shape
    tgt_in = np.concatenate(
        [np.full((b, 1), BOS, np.int64), tgt_ids], axis=1)
    in_mask = np.concatenate([np.ones((b, 1), bool), tgt_mask], axis=1)
    labels = np.concatenate([tgt_ids, np.zeros((b, 1), np.int64)], axis=1)
    label_mask = np.concatenate([tgt_mask, np.zeros((b, 1), bool)], axis=1)
    for row in range(b):
        n = int(tgt_mask[row].sum())
        labels[row, n] = EOS
        label_mask[row, n] = True
    return tgt_in, in_mask, labels, label_mask


def greedy_decode(memory: Tensor, mem_mask: np.ndarray, params: dict,
                  cfg: RunConfig, max_len: int):
    """Greedy token ids per batch row, stopping each row at <eos>.

    Returns (list of id lists without <eos>, truncated flags)."""
    b = memory.shape[0]
    ids = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len):
        mask = np.ones_like(ids, dtype=bool)
        logits = decode_batch(memory, mem_mask, ids, mask, params, cfg)
        nxt = np.argmax(logits.values[:, -1, :], axis=-1)
        nxt = np.where(done, EOS, nxt)
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out, truncated = [], []
    for row in range(b):
        seq = ids[row, 1:].tolist()
        if EOS in seq:
            out.append(seq[:seq.index(EOS)])
            truncated.append(False)
        else:
            out.append(seq)
            truncated.append(True)
    return out, truncated


def beam_decode(memory: Tensor, mem_mask: np.ndarray, params: dict,
                cfg: RunConfig, max_len: int, beam: int):
    """Per-example beam search by summed log-probability, no length norm.

    Ties between equal scores keep the lower-token-id expansion (argsort is
    stable over -scores)."""
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    b = memory.shape[0]
    results, truncated = [], []
    for row in range(b):
        mem_row = T.slice_tensor(memory, (slice(row, row + 1),))
        mask_row = mem_mask[row:row + 1]
        beams = [(0.0, [BOS], False)]   # (neg score asc by sort), ids, done
        for _ in range(max_len):
            if all(d for _, _, d in beams):
                break
            alive = [bm for bm in beams if not bm[2]]
            ids = np.asarray([bm[1] for bm in alive], dtype=np.int64)
            k = ids.shape[0]
            mem_k = T.concat([mem_row] * k, axis=0) if k > 1 else mem_row
            logits = decode_batch(mem_k, np.repeat(mask_row, k, axis=0), ids,
                                  np.ones_like(ids, dtype=bool), params, cfg)
            logp = logits.values[:, -1, :]
            logp = logp - np.log(np.exp(logp - logp.max(-1, keepdims=True)).sum(
                -1, keepdims=True)) - logp.max(-1, keepdims=True)
            cand = [bm for bm in beams if bm[2]]
            for j, (score, seq, _) in enumerate(alive):
                order = np.argsort(-logp[j], kind="stable")[:beam]
                for tok in order:
                    tok = int(tok)
                    cand.append((score + float(logp[j, tok]), seq + [tok],
                                 tok == EOS))
            cand.sort(key=lambda bm: (-bm[0], bm[1]))
            beams = cand[:beam]
        best = max(beams, key=lambda bm: bm[0])
        seq = best[1][1:]
        if seq and seq[-1] == EOS:
            results.append(seq[:-1])
            truncated.append(False)
        else:
            results.append(seq)
            truncated.append(True)
    return results, truncated
