"""Vocabulary and token-sequence types shared by both languages.

The first five ids are reserved in this exact order: PAD=0, BOS=1, EOS=2,
SENT=3 (whole-sentence slot prepended by the encoder), MASK=4 (the "[M]"
degradation token). Vocabulary files are UTF-8, one token per line, line
number = id, reserved tokens on the first five lines."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, SENT, MASK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<sent>", "[M]")
MASK_TOKEN = RESERVED[MASK]


class VocabError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:5] != list(RESERVED):
            raise VocabError(f"first five tokens must be {RESERVED}, got {tokens[:5]}")
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate token in vocabulary")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        return cls(list(RESERVED) + list(words))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def id_of(self, token: str) -> int:
        if token not in self._ids:
            raise VocabError(f"unknown token '{token}'")
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabError(f"id {idx} out of range")
        return self.tokens[idx]

    def encode(self, words) -> np.ndarray:
        return np.array([self.id_of(w) for w in words], dtype=np.int64)

    def decode(self, ids, skip_special: bool = True):
        out = []
        for i in ids:
            i = int(i)
            if skip_special and i in (PAD, BOS, EOS, SENT):
                continue
            out.append(self.token_of(i))
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass
class TokenSeq:
    """Integer token ids plus a same-length boolean pad mask (True = real)."""
    ids: np.ndarray
    pad_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise VocabError(f"TokenSeq ids must be 1-d, got shape {self.ids.shape}")
        if self.pad_mask is None:
            self.pad_mask = self.ids != PAD
        else:
            self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
            if self.pad_mask.shape != self.ids.shape:
                raise VocabError("pad_mask shape differs from ids")
        if np.any(self.ids[~self.pad_mask] != PAD):
            raise VocabError("masked-out positions must hold PAD")

    def __len__(self):
        return int(self.pad_mask.sum())

    @property
    def content(self) -> np.ndarray:
        return self.ids[self.pad_mask]
