"""Image-to-text consistency scorer.

A small attention GRU captioner is pretrained to reproduce the source
sentence from the rendered scene, then frozen. During adversarial training
its teacher-forced NLL on the refined feature grid (which bypasses the image
encoder) is the consistency loss that keeps imagined features describable by
the source words.

The decoder emits exactly L tokens for a length-L source sentence: it is
seeded with <bos> and never asked to produce <eos>, so the loss is a sum of
L cross-entropy terms per example."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import RunConfig
from .rng import RngStreams
from .tensor import Tensor
from .vocab import BOS


def image_encoder_downsamples(cfg: RunConfig) -> int:
    n = int(round(math.log2(cfg.image_size / cfg.refined_grid)))
    if cfg.refined_grid * (2 ** n) != cfg.image_size:
        raise ValueError(
            f"image_size {cfg.image_size} is not refined_grid {cfg.refined_grid} * 2^k")
    return n


def encode_image_batch(images: Tensor, params: dict, cfg: RunConfig) -> Tensor:
    """(B,3,R,R) image in [-1,1] -> (B, C1, N1) feature columns."""
    h = T.relu(T.conv2d(images, params["conv0_w"], params["conv0_b"],
                        stride=1, padding=1))
    for i in range(image_encoder_downsamples(cfg)):
        h = T.relu(T.conv2d(h, params[f"down{i}_w"], params[f"down{i}_b"],
                            stride=2, padding=1))
    b, c, r, _ = h.shape
    return T.reshape(h, (b, c, r * r))


def _caption_steps(grid: Tensor, src_ids: np.ndarray, params: dict):
    """Teacher-forced decoder steps; yields (t, logits) for each position."""
    b, _, _ = grid.shape
    cols = T.swap_last2(grid)                       # (B,N,C1)
    proj_f = T.matmul(cols, params["att_f"])        # (B,N,A)
    h = T.tanh(T.add(T.matmul(T.mean_pool(grid, axis=-1), params["init_w"]),
                     params["init_b"]))             # (B,H)
    prev = np.full((b,), BOS, dtype=np.int64)
    for t in range(src_ids.shape[1]):
        emb = T.embedding_lookup(params["embed"], prev)           # (B,E)
        query = T.reshape(T.matmul(h, params["att_h"]), (b, 1, -1))
        scores = T.matmul(T.tanh(T.add(query, proj_f)), params["att_v"])
        alpha = T.softmax(T.reshape(scores, (b, -1)), axis=-1)    # (B,N)
        ctx = T.reshape(T.matmul(T.reshape(alpha, (b, 1, -1)), cols), (b, -1))
        x = T.concat([emb, ctx], axis=-1)
        u = T.sigmoid(T.add(T.add(T.matmul(x, params["wz"]),
                                  T.matmul(h, params["uz"])), params["bz"]))
        r = T.sigmoid(T.add(T.add(T.matmul(x, params["wr"]),
                                  T.matmul(h, params["ur"])), params["br"]))
        c = T.tanh(T.add(T.add(T.matmul(x, params["wc"]),
                               T.matmul(T.mul(r, h), params["uc"])), params["bc"]))
        h = T.add(h, T.mul(u, T.sub(c, h)))
        logits = T.add(T.matmul(T.concat([h, ctx], axis=-1), params["out_w"]),
                       params["out_b"])                           # (B,V)
        prev = src_ids[:, t]
        yield t, logits


def caption_nll_batch(grid: Tensor, src_ids: np.ndarray, src_mask: np.ndarray,
                      params: dict):
    """Teacher-forced NLL of the source sentence given feature columns.

    grid (B,C1,N); src_ids (B,L) int64; src_mask (B,L) bool. Returns
    (summed NLL over real tokens, token count, greedy-correct count)."""
    mask_f = np.asarray(src_mask, np.float64)
    total = T.constant(np.zeros(()))
    n_tokens = int(mask_f.sum())
    n_correct = 0
    for t, logits in _caption_steps(grid, src_ids, params):
        nll_t = T.cross_entropy_with_logits(logits, src_ids[:, t])
        total = T.add(total, T.tsum(T.mul(nll_t, T.constant(mask_f[:, t]))))
        n_correct += int(((np.argmax(logits.values, axis=-1) == src_ids[:, t])
                          & src_mask[:, t]).sum())
    return total, n_tokens, n_correct


def caption_nll_rows(grid: Tensor, src_ids: np.ndarray, src_mask: np.ndarray,
                     params: dict) -> np.ndarray:
    """Per-example mean NLL (B,), no gradients retained; scoring helper."""
    mask_f = np.asarray(src_mask, np.float64)
    rows = np.zeros(grid.shape[0])
    for t, logits in _caption_steps(grid, src_ids, params):
        nll_t = T.cross_entropy_with_logits(logits, src_ids[:, t])
        rows += nll_t.values * mask_f[:, t]
    return rows / np.maximum(1.0, mask_f.sum(axis=1))


def caption_loss(grid: Tensor, src_ids: np.ndarray, src_mask: np.ndarray,
                 params: dict) -> Tensor:
    """Per-token mean NLL (the consistency loss as logged)."""
    total, n_tokens, _ = caption_nll_batch(grid, src_ids, src_mask, params)
    return T.scale(total, 1.0 / max(1, n_tokens))


def _batches(n: int, size: int, order: np.ndarray):
    for lo in range(0, n, size):
        yield order[lo:lo + size]


def pretrain_captioner(params: dict, images: np.ndarray, src_ids: np.ndarray,
                       src_mask: np.ndarray, dev_images: np.ndarray,
                       dev_src: np.ndarray, dev_mask: np.ndarray,
                       cfg: RunConfig, rngs: RngStreams, log=None):
    """Adam training with dev-loss early stopping; keeps the best weights.

    `params` maps relative names to Tensors that are updated in place.
    Returns a stats dict with per-epoch losses and final train accuracy."""
    from .optim import Adam, ParameterStore

    store = ParameterStore()
    for name, tens in params.items():
        tens.requires_grad = True
        p = store.add(name, tens.values)
        p.tensor = tens            # keep caller's Tensor objects live
    opt = Adam(store, betas=(0.9, 0.999), eps=1e-8)
    data_rng = rngs.get("data")
    n = images.shape[0]
    best = {"loss": float("inf"), "values": None, "epoch": 0}
    history = []

    def dev_loss() -> float:
        total, count = 0.0, 0
        for idx in _batches(dev_images.shape[0], cfg.cap_batch,
                            np.arange(dev_images.shape[0])):
            grid = encode_image_batch(T.constant(dev_images[idx]), params, cfg)
            s, k, _ = caption_nll_batch(grid, dev_src[idx], dev_mask[idx], params)
            total += s.item()
            count += k
        return total / max(1, count)

    for epoch in range(1, cfg.cap_max_epochs + 1):
        order = data_rng.permutation(n)
        train_total, train_count = 0.0, 0
        for idx in _batches(n, cfg.cap_batch, order):
            store.zero_grad()
            grid = encode_image_batch(T.constant(images[idx]), params, cfg)
            s, k, _ = caption_nll_batch(grid, src_ids[idx], src_mask[idx], params)
            loss = T.scale(s, 1.0 / max(1, k))
            loss.backward()
            opt.step(store.grads(), cfg.cap_lr)
            train_total += s.item()
            train_count += k
        d = dev_loss()
        history.append({"epoch": epoch, "train_loss": train_total / max(1, train_count),
                        "dev_loss": d})
        if log:
            log(history[-1])
        if d < best["loss"] - 1e-9:
            best = {"loss": d, "epoch": epoch,
                    "values": {nm: p.tensor.values.copy() for nm, p in store.items()}}
        elif epoch - best["epoch"] >= cfg.cap_patience:
            break
    if best["values"] is not None:
        for nm, p in store.items():
            p.tensor.values[...] = best["values"][nm]

    correct, count = 0, 0
    for idx in _batches(n, cfg.cap_batch, np.arange(n)):
        grid = encode_image_batch(T.constant(images[idx]), params, cfg)
        _, k, good = caption_nll_batch(grid, src_ids[idx], src_mask[idx], params)
        count += k
        correct += good
    return {"history": history, "best_epoch": best["epoch"],
            "best_dev_loss": best["loss"],
            "train_token_accuracy": correct / max(1, count)}
