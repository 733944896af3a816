"""Shared fixtures-in-spirit: tiny models and in-memory batches."""

import numpy as np

from imagit.config import tiny_preset
from imagit.data import all_scenes, render, source_vocabulary, target_vocabulary, translate_oracle
from imagit.model import (ImagitModel, adopt_captioner, build_captioner_parameters,
                          build_parameters)
from imagit.rng import RngStreams

SRC_VOCAB = source_vocabulary()
TGT_VOCAB = target_vocabulary()


def tiny_model(mode="imagit", with_captioner=True, seed=None, **overrides):
    cfg = tiny_preset(**overrides)
    rngs = RngStreams(cfg.seed if seed is None else seed)
    store = build_parameters(cfg, len(SRC_VOCAB), len(TGT_VOCAB), rngs, mode)
    if mode == "imagit" and with_captioner:
        adopt_captioner(store, build_captioner_parameters(cfg, len(SRC_VOCAB),
                                                          rngs))
    return ImagitModel(cfg, store, mode, seed=seed)


def scene_batch(n=4, image_size=16, offset=0):
    """Aligned arrays for the first n scenes: src, masks, tgt, images."""
    scenes = all_scenes()[offset:offset + n]
    src = np.stack([SRC_VOCAB.encode(s.sentence()) for s in scenes])
    tgt = np.stack([TGT_VOCAB.encode(translate_oracle(s.sentence()))
                    for s in scenes])
    images = np.stack([render(s, image_size) for s in scenes])
    return {"src": src, "src_mask": np.ones_like(src, bool),
            "tgt": tgt, "tgt_mask": np.ones_like(tgt, bool),
            "images": images}
