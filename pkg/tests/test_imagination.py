"""Conditioning augmentation, feature synthesis, and word-context attention."""

import numpy as np
import pytest

import imagit.tensor as T
from imagit.config import desk_preset, tiny_preset
from imagit.imagination import (condition_augment_batch, generator_block_plan,
                                kl_regularizer, synthesize_base_batch,
                                synthesize_refined_batch, to_rgb_batch,
                                word_context_batch)
from imagit.model import build_parameters, nested_view
from imagit.rng import RngStreams

from helpers import SRC_VOCAB, TGT_VOCAB, scene_batch, tiny_model


def imagine_params(cfg, seed=5):
    store = build_parameters(cfg, len(SRC_VOCAB), len(TGT_VOCAB),
                             RngStreams(seed), "imagit")
    return nested_view(store, "imagine.")


def test_condition_augment_is_reparameterized_gaussian(rng):
    cfg = tiny_preset()
    p = imagine_params(cfg)
    s = T.Tensor(rng.normal(size=(3, cfg.d_model)))
    eps = rng.normal(size=(3, cfg.d_ca))
    ca = condition_augment_batch(s, p, eps)
    want = ca.mu.values + np.exp(ca.logvar.values / 2.0) * eps
    np.testing.assert_allclose(ca.s_ca.values, want, rtol=0, atol=0)
    assert ca.mu.shape == (3, cfg.d_ca)


def test_condition_augment_monte_carlo_mean(rng):
    cfg = tiny_preset()
    p = imagine_params(cfg)
    s_row = rng.normal(size=cfg.d_model)
    n = 10000
    s = T.constant(np.tile(s_row, (n, 1)))
    eps = rng.standard_normal((n, cfg.d_ca))
    ca = condition_augment_batch(s, p, eps)
    sigma = np.exp(ca.logvar.values[0] / 2.0)
    err = np.abs(ca.s_ca.values.mean(axis=0) - ca.mu.values[0])
    assert np.all(err <= 4.0 * sigma / np.sqrt(n))


def test_kl_regularizer_frozen_value():
    mu = T.Tensor(np.array([[0.5, -0.3]]))
    logvar = T.Tensor(np.array([[0.2, -0.1]]))
    from imagit.imagination import CAResult
    ca = CAResult(mu=mu, logvar=logvar, s_ca=mu)
    assert kl_regularizer(ca).item() == pytest.approx(0.18312008809806468,
                                                      abs=1e-15)


def test_kl_batch_mean_of_identical_rows():
    mu = T.Tensor(np.array([[0.5, -0.3], [0.5, -0.3]]))
    logvar = T.Tensor(np.array([[0.2, -0.1], [0.2, -0.1]]))
    from imagit.imagination import CAResult
    ca = CAResult(mu=mu, logvar=logvar, s_ca=mu)
    assert kl_regularizer(ca).item() == pytest.approx(0.18312008809806468,
                                                      abs=1e-15)


def test_word_context_matches_double_loop(rng):
    b, length, d, c0, r = 2, 5, 6, 3, 2
    base = T.Tensor(rng.normal(size=(b, c0, r, r)))
    w = T.Tensor(rng.normal(size=(b, length, d)))
    u0 = T.Tensor(rng.normal(size=(d, c0)))
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    got = word_context_batch(base, w, u0, mask).values

    n0 = r * r
    want = np.zeros((b, c0, n0))
    for bi in range(b):
        flat = base.values[bi].reshape(c0, n0)
        for l in range(length):
            uw = w.values[bi, l] @ u0.values          # (c0,)
            scores = uw @ flat                        # (n0,)
            alpha = np.exp(scores - scores.max())
            alpha /= alpha.sum()
            if mask[bi, l]:
                want[bi] += np.outer(uw, alpha)
    np.testing.assert_allclose(got.reshape(b, c0, n0), want, atol=1e-12)


def test_word_context_gradients(rng):
    base = T.Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
    u0 = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)

    def fn(inputs):
        return T.tsum(word_context_batch(inputs[0], inputs[1], inputs[2]))

    assert T.grad_check(fn, [base, w, u0]) <= 1e-5


def test_generator_block_plan_grids():
    desk = desk_preset()
    seed_ch, plan = generator_block_plan(desk)
    assert seed_ch == 8 * desk.base_channels
    assert [p[1] for p in plan] == [128, 64, 32, 32]
    assert [p[3] for p in plan] == [2, 2, 2, 1]   # 1 -> 8 spatial
    tiny = tiny_preset()
    _, plan_t = generator_block_plan(tiny)
    assert [p[3] for p in plan_t] == [2, 1, 1, 1]  # 1 -> 2 spatial


def test_synthesis_shapes_desk(rng):
    cfg = desk_preset()
    p = imagine_params(cfg)
    s = T.Tensor(rng.normal(size=(1, cfg.d_model)))
    ca = condition_augment_batch(s, p, np.zeros((1, cfg.d_ca)))
    f0 = synthesize_base_batch(np.zeros((1, cfg.noise_dim)), ca.s_ca, p, cfg)
    assert f0.shape == (1, 32, 8, 8)
    w = T.Tensor(rng.normal(size=(1, 7, cfg.d_model)))
    ctx = word_context_batch(f0, w, p["u0"])
    assert ctx.shape == f0.shape
    f1 = synthesize_refined_batch(f0, ctx, p)
    assert f1.shape == (1, 16, 16, 16)
    # refined grid has 4x the subregions of the base grid
    assert f1.shape[2] * f1.shape[3] == 4 * f0.shape[2] * f0.shape[3]
    img = to_rgb_batch(f1, p, cfg)
    assert img.shape == (1, 3, cfg.image_size, cfg.image_size)
    assert np.all(np.abs(img.values) <= 1.0)


def test_refined_feature_depends_on_words():
    model = tiny_model(with_captioner=False)
    batch = scene_batch(2)
    src = batch["src"].copy()
    # rows 0 and 1 of all_scenes differ in the second object's relation/color
    w, s, _ = model.encode(src, batch["src_mask"])
    z = np.zeros((2, model.cfg.noise_dim))
    eps = np.zeros((2, model.cfg.d_ca))
    out = model.imagine_batch(w, s, batch["src_mask"], z, eps)
    a = out["f1"].values[0]
    b = out["f1"].values[1]
    assert not np.allclose(a, b)


def test_imagination_gradients_reach_all_parameters():
    model = tiny_model(with_captioner=False)
    batch = scene_batch(2)
    w, s, _ = model.encode(batch["src"], batch["src_mask"])
    z, eps = model.noise(2, deterministic=False)
    out = model.imagine_batch(w, s, batch["src_mask"], z, eps)
    loss = T.add(T.tsum(out["image"]), T.tsum(kl_regularizer(out["ca"])))
    loss.backward()
    for name, p in model.store.subset("imagine.").items():
        assert p.tensor.grad is not None, name
        assert np.any(p.tensor.grad != 0.0), name
    assert model.store["encoder.embed"].tensor.grad is not None
