"""Parameter construction and full-model wiring.

All weights live in one ParameterStore under dotted prefixes that name the
component: encoder., imagine., aggregate., decoder., disc., captioner.
Forward code receives nested dict views over the same Tensor objects, so an
optimizer step through the store is immediately visible to every view.

Initialization draws only from the "init" stream: Glorot uniform for linear
maps and embeddings, He normal for convolutions feeding ReLUs. Discriminator
heads start at zero so both heads output exactly 0.5 everywhere before the
first update."""

from __future__ import annotations

import numpy as np

from . import aggregation as agg
from . import captioner as cap
from . import imagination as imag
from . import tensor as T
from .config import RunConfig
from .encoder import encode_batch
from .optim import ParameterStore
from .rng import RngStreams
from .tensor import Tensor

MODES = ("imagit", "text_only")


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _attention_weights(rng, out: dict, base: str, heads: int, d: int, dh: int):
    for tag in ("wq", "wk", "wv"):
        out[f"{base}{tag}"] = glorot(rng, (heads, d, dh), d, dh)


def _ffn_weights(rng, out: dict, base: str, d: int, f: int):
    out[f"{base}ffn_w1"] = glorot(rng, (d, f), d, f)
    out[f"{base}ffn_b1"] = np.zeros(f)
    out[f"{base}ffn_w2"] = glorot(rng, (f, d), f, d)
    out[f"{base}ffn_b2"] = np.zeros(d)


def _norm_pair(out: dict, base: str, d: int):
    out[f"{base}_g"] = np.ones(d)
    out[f"{base}_b"] = np.zeros(d)


def init_encoder(rng, cfg: RunConfig, vocab_size: int) -> dict:
    d, dh = cfg.d_model, cfg.head_dim
    out = {"embed": glorot(rng, (vocab_size, d), vocab_size, d)}
    for i in range(cfg.layers):
        base = f"l{i}."
        _attention_weights(rng, out, base, cfg.heads, d, dh)
        _norm_pair(out, base + "ln1", d)
        _norm_pair(out, base + "ln2", d)
        _ffn_weights(rng, out, base, d, cfg.ffn_dim)
    return out


def _conv_block(rng, out: dict, base: str, w_shape, fan_in: int, out_ch: int):
    out[base + "w"] = he_normal(rng, w_shape, fan_in)
    out[base + "b"] = np.zeros(out_ch)
    out[base + "g"] = np.ones(out_ch)
    out[base + "bb"] = np.zeros(out_ch)


def init_imagination(rng, cfg: RunConfig) -> dict:
    d, dca, dz = cfg.d_model, cfg.d_ca, cfg.noise_dim
    c0, c1 = cfg.base_channels, cfg.refined_channels
    seed_ch, plan = imag.generator_block_plan(cfg)
    seed_n = seed_ch * cfg.seed_spatial ** 2
    out = {
        "ca_w": glorot(rng, (d, 2 * dca), d, 2 * dca),
        "ca_b": np.zeros(2 * dca),
        "fc_w": glorot(rng, (dz + dca, seed_n), dz + dca, seed_n),
        "fc_b": np.zeros(seed_n),
        "u0": glorot(rng, (d, c0), d, c0),
        "rgb_w": glorot(rng, (3, c1, 1, 1), c1, 3),
        "rgb_b": np.zeros(3),
    }
    for i, (cin, cout, k, _, _) in enumerate(plan):
        # transpose conv layout (Cin, Cout, k, k)
        _conv_block(rng, out, f"block{i}.", (cin, cout, k, k), cin * k * k, cout)
    _conv_block(rng, out, "join.", (c0, 2 * c0, 3, 3), 2 * c0 * 9, c0)
    _conv_block(rng, out, "res1.", (c0, c0, 3, 3), c0 * 9, c0)
    _conv_block(rng, out, "res2.", (c0, c0, 3, 3), c0 * 9, c0)
    _conv_block(rng, out, "up.", (c1, c0, 3, 3), c0 * 9, c1)
    return out


def init_aggregation(rng, cfg: RunConfig, with_visual: bool) -> dict:
    d, dh = cfg.d_model, cfg.head_dim
    out = {}
    if with_visual:
        out["vis_w"] = glorot(rng, (cfg.refined_channels, d),
                              cfg.refined_channels, d)
        out["vis_b"] = np.zeros(d)
    _attention_weights(rng, out, "", cfg.heads, d, dh)
    _norm_pair(out, "ln1", d)
    _norm_pair(out, "ln2", d)
    _ffn_weights(rng, out, "", d, cfg.ffn_dim)
    return out


def init_decoder(rng, cfg: RunConfig, vocab_size: int) -> dict:
    d, dh = cfg.d_model, cfg.head_dim
    out = {"embed": glorot(rng, (vocab_size, d), vocab_size, d)}
    for i in range(cfg.layers):
        base = f"l{i}."
        _attention_weights(rng, out, base + "self_", cfg.heads, d, dh)
        _attention_weights(rng, out, base + "cross_", cfg.heads, d, dh)
        for ln in ("ln1", "ln2", "ln3"):
            _norm_pair(out, base + ln, d)
        _ffn_weights(rng, out, base, d, cfg.ffn_dim)
    out["out_w"] = glorot(rng, (d, vocab_size), d, vocab_size)
    out["out_b"] = np.zeros(vocab_size)
    return out


def discriminator_channels(cfg: RunConfig):
    ndf = cfg.refined_channels
    return [ndf, 2 * ndf, 4 * ndf]


def discriminator_feature_size(cfg: RunConfig) -> int:
    if cfg.image_size % 8 != 0:
        raise ValueError(f"image_size {cfg.image_size} must be divisible by 8")
    spatial = cfg.image_size // 8
    return discriminator_channels(cfg)[-1] * spatial * spatial


def init_discriminator(rng, cfg: RunConfig) -> dict:
    chans = discriminator_channels(cfg)
    feat = discriminator_feature_size(cfg)
    out = {}
    prev = 3
    for i, ch in enumerate(chans):
        out[f"conv{i}_w"] = he_normal(rng, (ch, prev, 4, 4), prev * 16)
        out[f"conv{i}_b"] = np.zeros(ch)
        prev = ch
    out["uncond_w"] = np.zeros((feat, 1))
    out["uncond_b"] = np.zeros(1)
    out["cond_w"] = np.zeros((feat + cfg.d_model, 1))
    out["cond_b"] = np.zeros(1)
    return out


def init_captioner(rng, cfg: RunConfig, src_vocab_size: int) -> dict:
    c1, hid, att = cfg.refined_channels, cfg.cap_hidden, cfg.cap_attn_dim
    emb = cfg.cap_hidden
    out = {
        "conv0_w": he_normal(rng, (c1, 3, 3, 3), 27),
        "conv0_b": np.zeros(c1),
        "embed": glorot(rng, (src_vocab_size, emb), src_vocab_size, emb),
        "att_h": glorot(rng, (hid, att), hid, att),
        "att_f": glorot(rng, (c1, att), c1, att),
        "att_v": glorot(rng, (att, 1), att, 1),
        "init_w": glorot(rng, (c1, hid), c1, hid),
        "init_b": np.zeros(hid),
        "out_w": glorot(rng, (hid + c1, src_vocab_size), hid + c1, src_vocab_size),
        "out_b": np.zeros(src_vocab_size),
    }
    for i in range(cap.image_encoder_downsamples(cfg)):
        out[f"down{i}_w"] = he_normal(rng, (c1, c1, 4, 4), c1 * 16)
        out[f"down{i}_b"] = np.zeros(c1)
    x_dim = emb + c1
    for gate in ("z", "r", "c"):
        out[f"w{gate}"] = glorot(rng, (x_dim, hid), x_dim, hid)
        out[f"u{gate}"] = glorot(rng, (hid, hid), hid, hid)
        out[f"b{gate}"] = np.zeros(hid)
    return out


def _add_all(store: ParameterStore, prefix: str, flat: dict) -> None:
    for name, values in flat.items():
        store.add(prefix + name, values)


def build_parameters(cfg: RunConfig, src_vocab_size: int, tgt_vocab_size: int,
                     rngs: RngStreams, mode: str = "imagit") -> ParameterStore:
    """Model weights for one mode. Captioner weights are adopted separately."""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}' (expected one of {MODES})")
    rng = rngs.get("init")
    store = ParameterStore()
    _add_all(store, "encoder.", init_encoder(rng, cfg, src_vocab_size))
    if mode == "imagit":
        _add_all(store, "imagine.", init_imagination(rng, cfg))
    _add_all(store, "aggregate.",
             init_aggregation(rng, cfg, with_visual=mode == "imagit"))
    _add_all(store, "decoder.", init_decoder(rng, cfg, tgt_vocab_size))
    if mode == "imagit":
        _add_all(store, "disc.", init_discriminator(rng, cfg))
    return store


def build_captioner_parameters(cfg: RunConfig, src_vocab_size: int,
                               rngs: RngStreams) -> ParameterStore:
    store = ParameterStore()
    _add_all(store, "captioner.", init_captioner(rngs.get("init"), cfg,
                                                 src_vocab_size))
    return store


def adopt_captioner(store: ParameterStore, cap_store: ParameterStore) -> None:
    """Attach pretrained captioner weights, frozen."""
    for _, p in cap_store.items():
        p.set_trainable(False)
        store.adopt(p)


def nested_view(store: ParameterStore, prefix: str) -> dict:
    """Dict tree of the Tensors under prefix, split on remaining dots."""
    out: dict = {}
    for name, p in store.items():
        if not name.startswith(prefix):
            continue
        node = out
        parts = name[len(prefix):].split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = p.tensor
    if not out:
        raise KeyError(f"no parameters under prefix '{prefix}'")
    return out


def discriminate(images: Tensor, s: Tensor | None, params: dict,
                 cfg: RunConfig):
    """(B,3,R,R) in [-1,1] -> (unconditional, conditional) probabilities (B,).

    s is the sentence embedding for the conditional head; None skips it."""
    h = images
    for i in range(len(discriminator_channels(cfg))):
        h = T.leaky_relu(T.conv2d(h, params[f"conv{i}_w"], params[f"conv{i}_b"],
                                  stride=2, padding=1), 0.2)
    b = h.shape[0]
    flat = T.reshape(h, (b, -1))
    p_unc = T.sigmoid(T.add(T.matmul(flat, params["uncond_w"]),
                            params["uncond_b"]))
    p_unc = T.reshape(p_unc, (b,))
    if s is None:
        return p_unc, None
    joint = T.concat([flat, s], axis=-1)
    p_cond = T.sigmoid(T.add(T.matmul(joint, params["cond_w"]),
                             params["cond_b"]))
    return p_unc, T.reshape(p_cond, (b,))


class ImagitModel:
    """Bundles config, mode, and parameter views; exposes batched forwards."""

    def __init__(self, cfg: RunConfig, store: ParameterStore, mode: str,
                 seed: int | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode '{mode}' (expected one of {MODES})")
        self.cfg = cfg
        self.store = store
        self.mode = mode
        self.rngs = RngStreams(cfg.seed if seed is None else seed)
        self.enc = nested_view(store, "encoder.")
        self.agg = nested_view(store, "aggregate.")
        self.dec = nested_view(store, "decoder.")
        self.imagine = nested_view(store, "imagine.") if mode == "imagit" else None
        self.disc = nested_view(store, "disc.") if mode == "imagit" else None
        self.cap = (nested_view(store, "captioner.")
                    if "captioner." + "embed" in store else None)

    # -- forwards ------------------------------------------------------------

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray,
               training: bool = False):
        rng = self.rngs.get("dropout") if training else None
        return encode_batch(src_ids, src_mask, self.enc, self.cfg,
                            rng=rng, training=training)

    def noise(self, batch: int, deterministic: bool):
        """(z, eps) draws for one forward; zeros in deterministic mode."""
        cfg = self.cfg
        if deterministic:
            return (np.zeros((batch, cfg.noise_dim)),
                    np.zeros((batch, cfg.d_ca)))
        return (self.rngs.get("noise-z").standard_normal((batch, cfg.noise_dim)),
                self.rngs.get("ca-epsilon").standard_normal((batch, cfg.d_ca)))

    def imagine_batch(self, w: Tensor, s: Tensor, w_mask: np.ndarray,
                      z: np.ndarray, eps: np.ndarray) -> dict:
        """Full imagination pass; returns ca, f0, context, f1, image."""
        if self.imagine is None:
            raise RuntimeError("text_only model has no imagination parameters")
        p = self.imagine
        ca = imag.condition_augment_batch(s, p, eps)
        f0 = imag.synthesize_base_batch(z, ca.s_ca, p, self.cfg)
        ctx = imag.word_context_batch(f0, w, p["u0"], w_mask)
        f1 = imag.synthesize_refined_batch(f0, ctx, p)
        image = imag.to_rgb_batch(f1, p, self.cfg)
        return {"ca": ca, "f0": f0, "context": ctx, "f1": f1, "image": image}

    def memory(self, w: Tensor, w_mask: np.ndarray, f1: Tensor | None,
               training: bool = False):
        rows = None
        if f1 is not None:
            rows = agg.project_visual_batch(f1, self.agg)
        rng = self.rngs.get("dropout") if training else None
        return agg.aggregate_batch(w, w_mask, rows, self.agg, self.cfg,
                                   rng=rng, training=training)

    def decode_logits(self, memory: Tensor, mem_mask: np.ndarray,
                      tgt_in: np.ndarray, tgt_in_mask: np.ndarray,
                      training: bool = False) -> Tensor:
        rng = self.rngs.get("dropout") if training else None
        return agg.decode_batch(memory, mem_mask, tgt_in, tgt_in_mask,
                                self.dec, self.cfg, rng=rng, training=training)

    def caption_nll(self, f1: Tensor, src_ids: np.ndarray, src_mask: np.ndarray):
        """Consistency NLL on refined columns (image encoder bypassed)."""
        if self.cap is None:
            raise RuntimeError("captioner parameters are not attached")
        b, c, r, _ = f1.shape
        grid = T.reshape(f1, (b, c, r * r))
        return cap.caption_nll_batch(grid, src_ids, src_mask, self.cap)

    def discriminate(self, images: Tensor, s: Tensor | None):
        if self.disc is None:
            raise RuntimeError("text_only model has no discriminator")
        return discriminate(images, s, self.disc, self.cfg)

    def translate_batch(self, src_ids: np.ndarray, src_mask: np.ndarray,
                        deterministic: bool = True, beam: int = 1,
                        max_len: int | None = None):
        """Decoded id lists and truncation flags, no gradients retained."""
        if max_len is None:
            max_len = src_ids.shape[1] + 3
        w, s, _ = self.encode(src_ids, src_mask)
        f1 = None
        if self.mode == "imagit":
            z, eps = self.noise(src_ids.shape[0], deterministic)
            f1 = self.imagine_batch(w, s, src_mask, z, eps)["f1"]
        mem, mem_mask = self.memory(w, src_mask, f1)
        mem = mem.detach()
        if beam == 1:
            return agg.greedy_decode(mem, mem_mask, self.dec, self.cfg, max_len)
        return agg.beam_decode(mem, mem_mask, self.dec, self.cfg, max_len, beam)
