"""Imagined visual representation synthesized from the encoded sentence.

Pipeline: condition_augment draws a smoothed sentence condition
s_ca = mu + exp(logvar/2) * eps; synthesize_base maps [z, s_ca] through a
fully connected layer and four deconvolution blocks to a coarse feature grid;
word_context redistributes word embeddings over subregions
(context = sum_l (U0 w_l) softmax_subregions(base^T U0 w_l)^T); and
synthesize_refined fuses base + context through residual and upsampling
blocks into a grid with 4x the subregions. to_rgb renders the refined grid to
an RGB image in [-1, 1] for the discriminator.

Blocks use instance normalization (per-sample, so train and inference agree)
with ReLU; stride-2 deconvolutions are kernel 4 / padding 1, the retained
stride-1 blocks are kernel 3 / padding 1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .tensor import Tensor


@dataclass
class CAResult:
    mu: Tensor
    logvar: Tensor
    s_ca: Tensor


@dataclass
class VisualFeature:
    """Grid feature as (channels, subregions) columns."""
    channels: int
    grid: int
    values: Tensor  # (C, grid*grid)

    @property
    def subregions(self) -> int:
        return self.grid * self.grid


def generator_block_plan(cfg: RunConfig):
    """(in_ch, out_ch, kernel, stride, padding) for the four base blocks."""
    c = cfg.base_channels
    seed_ch = 8 * c
    outs = [4 * c, 2 * c, c, c]
    plan = []
    prev = seed_ch
    for i, out in enumerate(outs):
        if i < cfg.n_stride2_blocks:
            plan.append((prev, out, 4, 2, 1))
        else:
            plan.append((prev, out, 3, 1, 1))
        prev = out
    return seed_ch, plan


def condition_augment_batch(s: Tensor, params: dict, eps: np.ndarray) -> CAResult:
    """s (B,d) -> mu/logvar/s_ca (B,d_ca); eps is fixed noise (no gradient)."""
    aff = T.add(T.matmul(s, params["ca_w"]), params["ca_b"])  # (B, 2*d_ca)
    d_ca = aff.shape[-1] // 2
    mu = T.slice_tensor(aff, (slice(None), slice(0, d_ca)))
    logvar = T.slice_tensor(aff, (slice(None), slice(d_ca, None)))
    return CAResult(mu=mu, logvar=logvar, s_ca=T.reparameterize(mu, logvar, eps))


def kl_regularizer(ca: CAResult) -> Tensor:
    """Batch-mean KL(N(mu, sigma^2) || N(0, I))."""
    lv, mu = ca.logvar, ca.mu
    terms = T.add_scalar(T.sub(T.sub(lv, T.mul(mu, mu)), T.exp(lv)), 1.0)
    return T.scale(T.tmean(T.tsum(terms, axis=-1)), -0.5)


def synthesize_base_batch(z: np.ndarray, s_ca: Tensor, params: dict,
                          cfg: RunConfig) -> Tensor:
    """[z | s_ca] -> FC -> four deconv blocks -> (B, C0, r0, r0)."""
    if z.shape != (s_ca.shape[0], cfg.noise_dim):
        raise T.ShapeMismatch(
            f"synthesize_base: z {z.shape} vs (batch, {cfg.noise_dim})")
    seed_ch, plan = generator_block_plan(cfg)
    joint = T.concat([T.constant(z), s_ca], axis=-1)
    h = T.add(T.matmul(joint, params["fc_w"]), params["fc_b"])
    h = T.reshape(h, (-1, seed_ch, cfg.seed_spatial, cfg.seed_spatial))
    for i, (_, _, k, stride, pad) in enumerate(plan):
        blk = params[f"block{i}"]
        h = T.transpose_conv2d(h, blk["w"], blk["b"], stride=stride, padding=pad)
        h = T.relu(T.instance_norm(h, blk["g"], blk["bb"]))
    return h


def word_context_batch(base: Tensor, w: Tensor, u0: Tensor,
                       word_mask: np.ndarray | None = None) -> Tensor:
    """Word-to-subregion attention context, same shape as base.

    base (B,C0,r,r); w (B,L,d); u0 (d,C0). Softmax runs over the subregions
    of each word; padded words contribute nothing to the sum."""
    b, c0, r, _ = base.shape
    uw = T.matmul(w, u0)                                   # (B,L,C0)
    flat = T.reshape(base, (b, c0, r * r))                 # (B,C0,N0)
    scores = T.matmul(uw, flat)                            # (B,L,N0)
    alpha = T.softmax(scores, axis=-1)
    if word_mask is not None:
        uw = T.mul(uw, T.constant(np.asarray(word_mask, np.float64)[:, :, None]))
    ctx = T.matmul(T.swap_last2(uw), alpha)                # (B,C0,N0)
    return T.reshape(ctx, (b, c0, r, r))


def synthesize_refined_batch(base: Tensor, context: Tensor, params: dict) -> Tensor:
    """Fuse base and context, one residual block, upsample x2 -> (B,C1,2r,2r)."""
    if base.shape != context.shape:
        raise T.ShapeMismatch(
            f"synthesize_refined: base {base.shape} vs context {context.shape}")
    x = T.concat([base, context], axis=1)
    j = params["join"]
    x = T.relu(T.instance_norm(T.conv2d(x, j["w"], j["b"], stride=1, padding=1),
                               j["g"], j["bb"]))
    r1, r2 = params["res1"], params["res2"]
    y = T.relu(T.instance_norm(T.conv2d(x, r1["w"], r1["b"], stride=1, padding=1),
                               r1["g"], r1["bb"]))
    y = T.instance_norm(T.conv2d(y, r2["w"], r2["b"], stride=1, padding=1),
                        r2["g"], r2["bb"])
    x = T.relu(T.add(x, y))
    up = params["up"]
    x = T.nearest_upsample(x, 2)
    return T.relu(T.instance_norm(T.conv2d(x, up["w"], up["b"], stride=1, padding=1),
                                  up["g"], up["bb"]))


def to_rgb_batch(refined: Tensor, params: dict, cfg: RunConfig) -> Tensor:
    """1x1 conv + tanh -> (B,3,R,R), nearest-upsampled when the grid is smaller."""
    img = T.tanh(T.conv2d(refined, params["rgb_w"], params["rgb_b"]))
    return T.nearest_upsample(img, cfg.rgb_upsample)


def as_feature(grid_tensor: Tensor, index: int = 0) -> VisualFeature:
    """Single-example (C, N) column view of one batch entry."""
    _, c, r, _ = grid_tensor.shape
    one = T.slice_tensor(grid_tensor, (index,))
    return VisualFeature(channels=c, grid=r, values=T.reshape(one, (c, r * r)))


# -- single-example surfaces -------------------------------------------------

def condition_augment(s: Tensor, params: dict, eps: np.ndarray) -> CAResult:
    res = condition_augment_batch(T.reshape(s, (1, -1)), params, eps[None])
    return CAResult(mu=T.reshape(res.mu, (-1,)),
                    logvar=T.reshape(res.logvar, (-1,)),
                    s_ca=T.reshape(res.s_ca, (-1,)))


def synthesize_base(z: np.ndarray, s_ca: Tensor, params: dict,
                    cfg: RunConfig) -> VisualFeature:
    grid = synthesize_base_batch(z[None], T.reshape(s_ca, (1, -1)), params, cfg)
    return as_feature(grid)


def word_context(base: VisualFeature, w: Tensor, u0: Tensor) -> VisualFeature:
    """base as columns, w (d, L) word columns -> context columns."""
    grid = T.reshape(base.values, (1, base.channels, base.grid, base.grid))
    ctx = word_context_batch(grid, T.reshape(T.swap_last2(w), (1, w.shape[1], -1)), u0)
    return as_feature(ctx)


def synthesize_refined(base: VisualFeature, context: VisualFeature,
                       params: dict) -> VisualFeature:
    g = lambda f: T.reshape(f.values, (1, f.channels, f.grid, f.grid))
    return as_feature(synthesize_refined_batch(g(base), g(context), params))


def to_rgb(refined: VisualFeature, params: dict, cfg: RunConfig) -> Tensor:
    grid = T.reshape(refined.values, (1, refined.channels, refined.grid, refined.grid))
    return T.slice_tensor(to_rgb_batch(grid, params, cfg), (0,))
