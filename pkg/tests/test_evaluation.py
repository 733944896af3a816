"""BLEU, retrieval recall, and degradation machinery."""

import numpy as np
import pytest

from imagit.data import COLORS, SHAPES, all_scenes
from imagit.evaluation import (REPORT_HEADER, bleu, cosine_similarities,
                               degradation_report, degrade, retrieval_recall,
                               write_degradation_report)
from imagit.vocab import MASK_TOKEN

from helpers import tiny_model


def test_bleu_frozen_oracle():
    got = bleu([["a", "a", "a", "a"]], [["a", "b", "c", "d"]])
    assert got == pytest.approx(31.94715521231363, abs=1e-10)


def test_bleu_perfect_match():
    refs = [["ein", "rot", "kreis", "ein", "blau", "quadrat", "linksvon"]]
    assert bleu(refs, refs) == pytest.approx(100.0, abs=1e-9)


def test_bleu_brevity_penalty():
    cand = [["a", "b", "c", "d"]]
    ref = [["a", "b", "c", "d", "e"]]
    # precisions are exact (4/4, 3/3, 2/2, 1/1); only BP remains
    assert bleu(cand, ref) == pytest.approx(100.0 * np.exp(1 - 5 / 4), rel=1e-12)


def test_bleu_empty_candidate_is_zero():
    assert bleu([[]], [["a"]]) == 0.0
    assert bleu([["x"]], [["a"]]) == 0.0


def test_bleu_length_mismatch_rejected():
    with pytest.raises(ValueError):
        bleu([["a"]], [["a"], ["b"]])


def test_retrieval_self_match_is_perfect(rng):
    feats = rng.normal(size=(16, 8))
    assert retrieval_recall(feats, feats, 1) == 1.0


def test_retrieval_monotone_in_k(rng):
    gen = rng.normal(size=(32, 8))
    true = rng.normal(size=(32, 8))
    scores = [retrieval_recall(gen, true, k) for k in (1, 5, 10, 32)]
    assert scores == sorted(scores)
    assert scores[-1] == 1.0


def test_retrieval_random_rate_near_chance():
    hits = []
    for seed in range(50):
        r = np.random.default_rng(seed)
        gen = r.normal(size=(64, 6))
        true = r.normal(size=(64, 6))
        hits.append(retrieval_recall(gen, true, 1))
    assert abs(np.mean(hits) - 1.0 / 64.0) <= 0.0066


def test_retrieval_ties_prefer_lower_index():
    true = np.array([[1.0, 0.0], [1.0, 0.0]])
    gen = np.array([[1.0, 0.0], [1.0, 0.0]])
    # row 1 ties with key 0; stable order ranks index 0 first, so row 1 misses
    assert retrieval_recall(gen, true, 1) == 0.5
    assert retrieval_recall(gen, true, 2) == 1.0


def test_cosine_handles_zero_vectors():
    sims = cosine_similarities(np.zeros((1, 3)), np.ones((2, 3)))
    assert np.all(sims == 0.0)


def test_degrade_color_deprivation_masks_every_color():
    sents = [s.sentence() for s in all_scenes()[:20]]
    masked = degrade(sents, "color_deprivation", 1.0, seed=1)
    for sent in masked:
        assert not set(sent) & set(COLORS)
        assert sent.count(MASK_TOKEN) == 2
    untouched = degrade(sents, "color_deprivation", 0.0, seed=1)
    assert untouched == [list(s) for s in sents]


def test_degrade_entity_fraction_and_determinism():
    sents = [s.sentence() for s in all_scenes()[:500]]
    a = degrade(sents, "entity_masking", 0.5, seed=7)
    b = degrade(sents, "entity_masking", 0.5, seed=7)
    assert a == b
    total = sum(s.count(MASK_TOKEN) for s in a)
    share = total / (2 * len(sents))
    assert 0.4 <= share <= 0.6
    # only shape words are replaced
    for orig, got in zip(sents, a):
        for x, y in zip(orig, got):
            if x != y:
                assert x in SHAPES and y == MASK_TOKEN
    none = degrade(sents, "entity_masking", 0.0, seed=7)
    assert none == [list(s) for s in sents]
    everything = degrade(sents, "entity_masking", 1.0, seed=7)
    assert all(s.count(MASK_TOKEN) == 2 for s in everything)


def test_degrade_rejects_bad_inputs():
    with pytest.raises(ValueError):
        degrade([["a"]], "word_dropout", 0.5, seed=1)
    with pytest.raises(ValueError):
        degrade([["a"]], "entity_masking", 1.5, seed=1)


def test_degradation_report_layout(tmp_path):
    from imagit.data import source_vocabulary, target_vocabulary, translate_oracle
    model = tiny_model(with_captioner=False)
    scenes = all_scenes()[:6]
    src = [s.sentence() for s in scenes]
    refs = [translate_oracle(s) for s in src]
    rows = degradation_report({"imagit": model}, source_vocabulary(),
                              target_vocabulary(), src, refs, seed=3,
                              entity_fractions=(0.0, 1.0))
    kinds = [(r[1], r[2]) for r in rows]
    assert kinds == [("color_deprivation", 0.0), ("color_deprivation", 1.0),
                     ("entity_masking", 0.0), ("entity_masking", 1.0)]
    assert all(r[0] == "imagit" and 0.0 <= r[3] <= 100.0 for r in rows)
    out = tmp_path / "report.csv"
    write_degradation_report(out, rows)
    lines = out.read_text().splitlines()
    assert lines[0] == REPORT_HEADER
    assert len(lines) == 5
    assert lines[1].startswith("imagit,color_deprivation,0.0,")


def test_likelihood_profile_scores_probes_per_grid(rng):
    from imagit.captioner import caption_nll_rows
    from imagit.evaluation import likelihood_profile
    import imagit.tensor as T
    from helpers import scene_batch

    model = tiny_model()
    batch = scene_batch(4)
    c = model.cfg.refined_channels
    grids = rng.normal(size=(4, c, 16))
    profile = likelihood_profile(grids, batch["src"][:3],
                                 batch["src_mask"][:3], model.cap)
    assert profile.shape == (4, 3)
    # column j is -caption_nll_rows of probe j broadcast over the grids
    ids = np.repeat(batch["src"][1:2], 4, axis=0)
    mask = np.repeat(batch["src_mask"][1:2], 4, axis=0)
    want = -caption_nll_rows(T.constant(grids), ids, mask, model.cap)
    assert np.array_equal(profile[:, 1], want)
    # duplicated grids produce identical profile rows
    twin = likelihood_profile(np.concatenate([grids[:1], grids[:1]]),
                              batch["src"][:3], batch["src_mask"][:3],
                              model.cap)
    assert np.array_equal(twin[0], twin[1])


def test_feature_grids_shapes_and_determinism():
    from imagit.evaluation import image_feature_grids, imagined_feature_grids
    from helpers import scene_batch

    model = tiny_model()
    batch = scene_batch(5, image_size=model.cfg.image_size)
    cells = model.cfg.refined_grid ** 2
    gen = imagined_feature_grids(model, batch["src"], batch["src_mask"],
                                 batch=2)
    again = imagined_feature_grids(model, batch["src"], batch["src_mask"],
                                   batch=2)
    true = image_feature_grids(model.cap, batch["images"], model.cfg, batch=3)
    assert gen.shape == (5, model.cfg.refined_channels, cells)
    assert true.shape == (5, model.cfg.refined_channels, cells)
    # noise is deterministic, so repeated extraction is bit-identical
    assert np.array_equal(gen, again)
