"""Corpus BLEU, image-text retrieval, and input-degradation studies."""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import captioner as cap
from . import tensor as T
from .config import RunConfig
from .data import COLORS, SHAPES
from .rng import RngStreams
from .vocab import MASK_TOKEN


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4) -> float:
    """Corpus BLEU in percent, one reference per candidate.

    Modified n-gram precisions up to max_n with brevity penalty
    min(1, e^(1 - r/c)). A zero match count for n >= 2 falls back to
    add-one smoothing, (0+1)/(total+1); unigram precision is never smoothed."""
    if len(candidates) != len(references):
        raise ValueError(
            f"bleu: {len(candidates)} candidates vs {len(references)} references")
    matched = np.zeros(max_n)
    total = np.zeros(max_n)
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            got = _ngrams(cand, n)
            want = _ngrams(ref, n)
            matched[n - 1] += sum(min(k, want[g]) for g, k in got.items())
            total[n - 1] += max(0, len(cand) - n + 1)
    if c_len == 0 or matched[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        if matched[n] > 0:
            log_p += np.log(matched[n] / total[n])
        elif n == 0:
            return 0.0
        else:
            log_p += np.log(1.0 / (total[n] + 1.0))
    bp = 1.0 if c_len > r_len else np.exp(1.0 - r_len / c_len)
    return float(100.0 * bp * np.exp(log_p / max_n))


# ---------------------------------------------------------------------------
# retrieval

def cosine_similarities(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """(N,D) x (M,D) -> (N,M) cosine similarity; zero vectors score zero."""
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    kn = np.linalg.norm(keys, axis=1, keepdims=True)
    qn[qn == 0] = 1.0
    kn[kn == 0] = 1.0
    return (queries / qn) @ (keys / kn).T


def retrieval_recall(gen_features: np.ndarray, true_features: np.ndarray,
                     k: int) -> float:
    """Recall@k matching each generated feature against every true feature.

    Row i is a hit when index i appears among the k most similar true
    features; equal similarities rank lower indices first."""
    if gen_features.shape != true_features.shape:
        raise ValueError(
            f"retrieval: {gen_features.shape} vs {true_features.shape}")
    sims = cosine_similarities(gen_features, true_features)
    hits = 0
    for i in range(sims.shape[0]):
        order = np.argsort(-sims[i], kind="stable")[:k]
        hits += int(i in order)
    return hits / sims.shape[0]


def imagined_feature_grids(model, src_ids: np.ndarray, src_mask: np.ndarray,
                           batch: int = 64) -> np.ndarray:
    """Refined feature columns (B,C,N) imagined from each sentence with
    deterministic noise; the array the consistency loss scores."""
    outs = []
    for lo in range(0, src_ids.shape[0], batch):
        ids = src_ids[lo:lo + batch]
        mask = src_mask[lo:lo + batch]
        w, s, _ = model.encode(ids, mask)
        z, eps = model.noise(ids.shape[0], deterministic=True)
        f1 = model.imagine_batch(w, s, mask, z, eps)["f1"]
        b, c, r, _ = f1.shape
        outs.append(f1.values.reshape(b, c, r * r))
    return np.concatenate(outs, axis=0)


def image_feature_grids(cap_params: dict, images: np.ndarray, cfg: RunConfig,
                        batch: int = 64) -> np.ndarray:
    """Frozen caption-encoder columns (B,C,N) for real rendered images."""
    outs = []
    for lo in range(0, images.shape[0], batch):
        grid = cap.encode_image_batch(T.constant(images[lo:lo + batch]),
                                      cap_params, cfg)
        outs.append(grid.values)
    return np.concatenate(outs, axis=0)


def likelihood_profile(grids: np.ndarray, probe_ids: np.ndarray,
                       probe_mask: np.ndarray, cap_params: dict) -> np.ndarray:
    """Per-token caption log-likelihood (B,K) of K probe sentences under each
    feature grid, the retrieval embedding for imagined and real features.

    Plain pooling is blind on the imagined side: refined columns are
    instance normalized, so their per-channel spatial means barely move
    across scenes, while the frozen captioner's attention reads the same
    columns fine. Scoring both kinds of grid against one shared probe list
    puts them in a common space where cosine similarity is meaningful."""
    cols = []
    for j in range(probe_ids.shape[0]):
        ids = np.repeat(probe_ids[j:j + 1], grids.shape[0], axis=0)
        mask = np.repeat(probe_mask[j:j + 1], grids.shape[0], axis=0)
        cols.append(-cap.caption_nll_rows(T.constant(grids), ids, mask,
                                          cap_params))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# degradation

DEGRADE_KINDS = ("color_deprivation", "entity_masking")


def degrade(sentences, kind: str, fraction: float, seed: int):
    """Masked copies of token-list sentences.

    color_deprivation replaces every color word with the mask token (the
    fraction is ignored beyond choosing whether to run: 0 disables).
    entity_masking replaces each shape word with the mask token
    independently with probability `fraction`."""
    if kind not in DEGRADE_KINDS:
        raise ValueError(f"unknown degradation kind '{kind}'")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"degradation fraction must be in [0,1], got {fraction}")
    rng = RngStreams(seed).get(f"degrade-{kind}-{fraction}")
    colors, shapes = set(COLORS), set(SHAPES)
    out = []
    for sent in sentences:
        row = []
        for tok in sent:
            if kind == "color_deprivation" and tok in colors and fraction > 0.0:
                row.append(MASK_TOKEN)
            elif (kind == "entity_masking" and tok in shapes
                    and rng.random() < fraction):
                row.append(MASK_TOKEN)
            else:
                row.append(tok)
        out.append(row)
    return out


def translate_sentences(model, src_vocab, tgt_vocab, sentences, batch: int = 64,
                        deterministic: bool = True, beam: int = 1):
    """Token-list translations of token-list source sentences."""
    outs = []
    for lo in range(0, len(sentences), batch):
        chunk = sentences[lo:lo + batch]
        length = max(len(s) for s in chunk)
        ids = np.zeros((len(chunk), length), dtype=np.int64)
        mask = np.zeros((len(chunk), length), dtype=bool)
        for i, sent in enumerate(chunk):
            ids[i, :len(sent)] = [src_vocab.id_of(t) for t in sent]
            mask[i, :len(sent)] = True
        hyp, _ = model.translate_batch(ids, mask, deterministic=deterministic,
                                       beam=beam)
        outs.extend([tgt_vocab.token_of(t) for t in row] for row in hyp)
    return outs


def degraded_bleu(model, src_vocab, tgt_vocab, src_sentences, references,
                  kind: str, fraction: float, seed: int) -> float:
    masked = degrade(src_sentences, kind, fraction, seed)
    hyp = translate_sentences(model, src_vocab, tgt_vocab, masked)
    return bleu(hyp, references)


def degradation_report(models: dict, src_vocab, tgt_vocab, src_sentences,
                       references, seed: int,
                       entity_fractions=(0.0, 0.25, 0.5, 0.75, 1.0)):
    """Rows (model, kind, fraction, bleu) for every model and degradation.

    color_deprivation is all-or-nothing so it contributes fractions 0 and 1;
    entity_masking sweeps `entity_fractions`."""
    rows = []
    for name, model in sorted(models.items()):
        for fraction in (0.0, 1.0):
            score = degraded_bleu(model, src_vocab, tgt_vocab, src_sentences,
                                  references, "color_deprivation", fraction, seed)
            rows.append((name, "color_deprivation", fraction, score))
        for fraction in entity_fractions:
            score = degraded_bleu(model, src_vocab, tgt_vocab, src_sentences,
                                  references, "entity_masking", fraction, seed)
            rows.append((name, "entity_masking", fraction, score))
    return rows


REPORT_HEADER = "model,kind,fraction,bleu"


def write_degradation_report(path, rows) -> None:
    lines = [REPORT_HEADER]
    for name, kind, fraction, score in rows:
        lines.append(f"{name},{kind},{repr(float(fraction))},{repr(float(score))}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
