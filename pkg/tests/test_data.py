"""Corpus grammar, oracle translation, rendering, PPM io, manifests."""

import numpy as np
import pytest

from imagit import data as D
from imagit.vocab import MASK, PAD, RESERVED, TokenSeq, VocabError, Vocabulary


def test_scene_count():
    scenes = D.all_scenes()
    assert len(scenes) == 6 * 4 * 6 * 4 * 4 - 6 * 4 * 4  # minus same-object cases
    assert len(scenes) == 2208
    assert len(set(scenes)) == 2208


def test_same_object_rejected():
    with pytest.raises(D.DataError):
        D.ShapeScene("red", "circle", "red", "circle", "leftof")


def test_oracle_translation_example():
    src = "a red circle leftof a blue square".split()
    assert D.translate_oracle(src) == "ein rot kreis ein blau quadrat linksvon".split()


def test_oracle_bijection_all_scenes():
    for scene in D.all_scenes():
        src = scene.sentence()
        tgt = D.translate_oracle(src)
        assert D.invert_oracle(tgt) == src


def test_oracle_rejects_bad_sentence():
    with pytest.raises(D.DataError):
        D.translate_oracle("a red circle near a blue square".split())
    with pytest.raises(D.DataError):
        D.invert_oracle("ein rot kreis ein blau quadrat".split())


def test_vocab_reserved_and_roundtrip(tmp_path):
    v = D.source_vocabulary()
    assert v.tokens[:5] == list(RESERVED)
    assert v.id_of("<pad>") == 0 and v.id_of("[M]") == MASK
    assert len(v) == 5 + 1 + 6 + 4 + 4
    v.save(tmp_path / "v.txt")
    loaded = Vocabulary.load(tmp_path / "v.txt")
    assert loaded.tokens == v.tokens


def test_vocab_rejects_bad_reserved():
    with pytest.raises(VocabError):
        Vocabulary(["<pad>", "<bos>", "x", "<sent>", "[M]", "a"])


def test_tokenseq_pad_mask():
    seq = TokenSeq(np.array([5, 6, PAD, PAD]))
    assert len(seq) == 2
    assert list(seq.content) == [5, 6]
    with pytest.raises(VocabError):
        TokenSeq(np.array([5, PAD]), pad_mask=np.array([False, True]))


def test_render_colors_classifiable():
    # every color identifiable from its exact palette RGB in the rendering
    for color in D.COLORS:
        scene = D.ShapeScene(color, "circle", "red" if color != "red" else "green",
                             "square", "leftof")
        u8 = D.render_u8(scene, 32)
        flat = u8.reshape(-1, 3)
        assert (flat == np.array(D.PALETTE[color])).all(axis=1).any()


def test_render_normalized_range():
    img = D.render(D.ShapeScene("red", "star", "blue", "triangle", "above"), 32)
    assert img.shape == (3, 32, 32)
    assert img.min() >= -1.0 and img.max() <= 1.0
    assert img.max() == 1.0  # white background present


def test_render_injective_on_sample(rng):
    scenes = D.all_scenes()
    idx = rng.permutation(len(scenes))[:60]
    seen = {}
    for i in idx:
        key = D.render_u8(scenes[i], 32).tobytes()
        assert key not in seen
        seen[key] = i


def test_relations_move_centers():
    a = D.render_u8(D.ShapeScene("red", "circle", "blue", "square", "leftof"), 32)
    b = D.render_u8(D.ShapeScene("red", "circle", "blue", "square", "rightof"), 32)
    assert (a != b).any()


def test_ppm_roundtrip(tmp_path):
    u8 = D.render_u8(D.ShapeScene("cyan", "star", "purple", "circle", "below"), 32)
    D.write_ppm(tmp_path / "x.ppm", u8)
    back = D.read_ppm(tmp_path / "x.ppm")
    assert np.array_equal(u8, back)


def test_gen_corpus_layout_and_determinism(tmp_path):
    m1 = D.gen_corpus(tmp_path / "c1", seed=3, n_train=20, n_dev=5, n_test=5)
    D.gen_corpus(tmp_path / "c2", seed=3, n_train=20, n_dev=5, n_test=5)
    t1 = (tmp_path / "c1" / "manifest.tsv").read_bytes()
    t2 = (tmp_path / "c2" / "manifest.tsv").read_bytes()
    assert t1 == t2
    img1 = (tmp_path / "c1" / "images" / "00000.ppm").read_bytes()
    img2 = (tmp_path / "c2" / "images" / "00000.ppm").read_bytes()
    assert img1 == img2
    assert len(m1.split("train")) == 20 and len(m1.split("dev")) == 5

    different = D.gen_corpus(tmp_path / "c3", seed=4, n_train=20, n_dev=5, n_test=5)
    assert [r.src for r in different.rows] != [r.src for r in m1.rows]


def test_gen_corpus_scene_disjoint_splits(tmp_path):
    m = D.gen_corpus(tmp_path / "c", seed=11, n_train=100, n_dev=30, n_test=30)
    per_split = {s: {r.src for r in m.split(s)} for s in ("train", "dev", "test")}
    assert not (per_split["train"] & per_split["dev"])
    assert not (per_split["train"] & per_split["test"])
    assert not (per_split["dev"] & per_split["test"])


def test_gen_corpus_size_limit(tmp_path):
    with pytest.raises(D.DataError, match="distinct scenes"):
        D.gen_corpus(tmp_path / "c", seed=0, n_train=2200, n_dev=64, n_test=64)


def test_manifest_roundtrip_and_image_loading(tmp_path):
    m = D.gen_corpus(tmp_path / "c", seed=5, n_train=8, n_dev=4, n_test=4)
    loaded = D.Manifest.load(tmp_path / "c" / "manifest.tsv")
    assert [r.src for r in loaded.rows] == [r.src for r in m.rows]
    img = loaded.image(loaded.rows[0])
    assert img.shape == (3, 32, 32)
    src, tgt, imgs = D.load_split_arrays(loaded, "train",
                                         D.source_vocabulary(), D.target_vocabulary())
    assert src.shape == (8, 7) and tgt.shape == (8, 7)
    assert imgs.shape == (8, 3, 32, 32)


def test_manifest_bad_header_rejected(tmp_path):
    p = tmp_path / "manifest.tsv"
    p.write_text("src\ttgt\n", encoding="utf-8")
    with pytest.raises(D.DataError, match="header"):
        D.Manifest.load(p)


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("IMAGIT_THREADS", raising=False)
    assert D.worker_count() == 1
    monkeypatch.setenv("IMAGIT_THREADS", "4")
    assert D.worker_count() == 4
    monkeypatch.setenv("IMAGIT_THREADS", "zero")
    with pytest.raises(D.DataError):
        D.worker_count()


def test_map_ordered_parallel_matches_serial(monkeypatch):
    items = list(range(40))
    monkeypatch.setenv("IMAGIT_THREADS", "1")
    serial = D.map_ordered(lambda x: x * x, items)
    monkeypatch.setenv("IMAGIT_THREADS", "4")
    parallel = D.map_ordered(lambda x: x * x, items)
    assert serial == parallel
