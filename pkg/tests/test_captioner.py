"""Attention-GRU captioner: losses, freezing, image encoder, pretraining."""

import numpy as np
import pytest

import imagit.tensor as T
from imagit.captioner import (caption_loss, caption_nll_batch,
                              encode_image_batch, image_encoder_downsamples,
                              pretrain_captioner)
from imagit.config import tiny_preset
from imagit.model import build_captioner_parameters, nested_view
from imagit.rng import RngStreams

from helpers import SRC_VOCAB, scene_batch, tiny_model


def cap_params(cfg, seed=9):
    store = build_captioner_parameters(cfg, len(SRC_VOCAB), RngStreams(seed))
    return nested_view(store, "captioner.")


def test_image_encoder_grid_shape(rng):
    cfg = tiny_preset()
    assert image_encoder_downsamples(cfg) == 2   # 16 -> 8 -> 4
    p = cap_params(cfg)
    grid = encode_image_batch(T.constant(rng.uniform(-1, 1, (3, 3, 16, 16))),
                              p, cfg)
    assert grid.shape == (3, cfg.refined_channels,
                          cfg.refined_grid * cfg.refined_grid)


def test_uniform_logits_give_log_vocab_per_token(rng):
    cfg = tiny_preset()
    p = cap_params(cfg)
    p["out_w"].values[...] = 0.0
    p["out_b"].values[...] = 0.0
    batch = scene_batch(3)
    grid = T.constant(rng.normal(size=(3, cfg.refined_channels, 16)))
    total, n_tokens, _ = caption_nll_batch(grid, batch["src"],
                                           batch["src_mask"], p)
    assert n_tokens == 3 * 7
    assert total.item() == pytest.approx(n_tokens * np.log(len(SRC_VOCAB)),
                                         rel=1e-12)
    mean = caption_loss(grid, batch["src"], batch["src_mask"], p)
    assert mean.item() == pytest.approx(np.log(len(SRC_VOCAB)), rel=1e-12)


def test_padded_tokens_do_not_contribute(rng):
    cfg = tiny_preset()
    p = cap_params(cfg)
    batch = scene_batch(2)
    grid = T.constant(rng.normal(size=(2, cfg.refined_channels, 16)))
    full, n_full, _ = caption_nll_batch(grid, batch["src"], batch["src_mask"], p)
    mask = batch["src_mask"].copy()
    mask[:, -2:] = False
    ids = batch["src"].copy()
    part, n_part, _ = caption_nll_batch(grid, ids, mask, p)
    assert n_full - n_part == 4
    assert part.item() < full.item()


def test_frozen_captioner_passes_gradient_to_features():
    model = tiny_model()
    batch = scene_batch(2)
    w, s, _ = model.encode(batch["src"], batch["src_mask"])
    z, eps = model.noise(2, deterministic=True)
    out = model.imagine_batch(w, s, batch["src_mask"], z, eps)
    total, n, _ = model.caption_nll(out["f1"], batch["src"], batch["src_mask"])
    T.scale(total, 1.0 / n).backward()
    for name, p in model.store.subset("captioner.").items():
        assert not p.trainable, name
        assert p.tensor.grad is None, name
    assert model.store["imagine.up.w"].tensor.grad is not None
    assert np.any(model.store["imagine.fc_w"].tensor.grad != 0.0)


def test_caption_gradients_numeric(rng):
    cfg = tiny_preset()
    p = cap_params(cfg)
    batch = scene_batch(1)
    grid = T.Tensor(rng.normal(size=(1, cfg.refined_channels, 16)),
                    requires_grad=True)

    def fn(inputs):
        total, n, _ = caption_nll_batch(inputs[0], batch["src"],
                                        batch["src_mask"], p)
        return T.scale(total, 1.0 / n)

    assert T.grad_check(fn, [grid]) <= 1e-5


def test_pretraining_fits_a_small_set():
    cfg = tiny_preset(cap_lr=5e-3, cap_max_epochs=40, cap_patience=40,
                      cap_batch=8)
    p = cap_params(cfg, seed=3)
    train = scene_batch(16)
    dev = scene_batch(8, offset=16)
    stats = pretrain_captioner(p, train["images"], train["src"],
                               train["src_mask"], dev["images"], dev["src"],
                               dev["src_mask"], cfg, RngStreams(3))
    first = stats["history"][0]["dev_loss"]
    assert stats["best_dev_loss"] < first
    assert stats["train_token_accuracy"] > 0.5


def test_nll_rows_recompose_batch_total(rng):
    from imagit.captioner import caption_nll_rows

    cfg = tiny_preset()
    p = cap_params(cfg)
    batch = scene_batch(3)
    mask = batch["src_mask"].copy()
    mask[1, -3:] = False                         # ragged lengths
    grid = T.constant(rng.normal(size=(3, cfg.refined_channels, 16)))
    rows = caption_nll_rows(grid, batch["src"], mask, p)
    total, n_tokens, _ = caption_nll_batch(grid, batch["src"], mask, p)
    per_example = mask.sum(axis=1).astype(float)
    assert rows.shape == (3,)
    assert float((rows * per_example).sum()) == pytest.approx(total.item(),
                                                              abs=1e-12)
    assert n_tokens == int(per_example.sum())
