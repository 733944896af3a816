"""Synthetic grounded-translation corpus: two colored shapes in a spatial
relation, a source sentence describing the scene, a deterministic lexicon
translation, and a rendered image.

Grammar (source): a COLOR SHAPE RELATION a COLOR SHAPE
Target: lexicon-mapped words with the relation token moved sentence-final.

Render palette (RGB on white 255,255,255):
    red (220,40,40)  green (40,180,70)  blue (45,80,220)
    yellow (235,200,40)  purple (150,60,200)  cyan (60,200,210)
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStreams
from .vocab import RESERVED, Vocabulary

COLORS = ("red", "green", "blue", "yellow", "purple", "cyan")
SHAPES = ("circle", "square", "triangle", "star")
RELATIONS = ("leftof", "rightof", "above", "below")

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (45, 80, 220),
    "yellow": (235, 200, 40),
    "purple": (150, 60, 200),
    "cyan": (60, 200, 210),
}

LEXICON = {
    "a": "ein", "red": "rot", "green": "gruen", "blue": "blau",
    "yellow": "gelb", "purple": "lila", "cyan": "zyan",
    "circle": "kreis", "square": "quadrat", "triangle": "dreieck", "star": "stern",
    "leftof": "linksvon", "rightof": "rechtsvon", "above": "ueber", "below": "unter",
}
_INVERSE_LEXICON = {v: k for k, v in LEXICON.items()}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeScene:
    color1: str
    shape1: str
    color2: str
    shape2: str
    relation: str

    def __post_init__(self):
        if self.color1 not in COLORS or self.color2 not in COLORS:
            raise DataError(f"unknown color in {self}")
        if self.shape1 not in SHAPES or self.shape2 not in SHAPES:
            raise DataError(f"unknown shape in {self}")
        if self.relation not in RELATIONS:
            raise DataError(f"unknown relation '{self.relation}'")
        if (self.color1, self.shape1) == (self.color2, self.shape2):
            raise DataError("the two objects must differ in color or shape")

    def sentence(self):
        return ["a", self.color1, self.shape1, self.relation,
                "a", self.color2, self.shape2]


def all_scenes():
    """Every valid scene in a fixed deterministic order (2208 of them)."""
    out = []
    for c1 in COLORS:
        for s1 in SHAPES:
            for c2 in COLORS:
                for s2 in SHAPES:
                    if (c1, s1) == (c2, s2):
                        continue
                    for rel in RELATIONS:
                        out.append(ShapeScene(c1, s1, c2, s2, rel))
    return out


def translate_oracle(src_tokens):
    """Lexicon translation with the relation token moved to sentence-final."""
    toks = list(src_tokens)
    if (len(toks) != 7 or toks[0] != "a" or toks[4] != "a"
            or toks[1] not in COLORS or toks[5] not in COLORS
            or toks[2] not in SHAPES or toks[6] not in SHAPES
            or toks[3] not in RELATIONS):
        raise DataError(f"not a valid source sentence: {' '.join(toks)}")
    return [LEXICON[toks[0]], LEXICON[toks[1]], LEXICON[toks[2]],
            LEXICON[toks[4]], LEXICON[toks[5]], LEXICON[toks[6]],
            LEXICON[toks[3]]]


def invert_oracle(tgt_tokens):
    """Inverse of translate_oracle on valid targets."""
    toks = list(tgt_tokens)
    if len(toks) != 7:
        raise DataError(f"not a valid target sentence: {' '.join(toks)}")
    try:
        back = [_INVERSE_LEXICON[t] for t in toks]
    except KeyError as e:
        raise DataError(f"unknown target token {e}")
    if back[0] != "a" or back[3] != "a" or back[6] not in RELATIONS:
        raise DataError(f"not a valid target sentence: {' '.join(toks)}")
    return [back[0], back[1], back[2], back[6], back[3], back[4], back[5]]


def source_vocabulary() -> Vocabulary:
    return Vocabulary.from_words(("a",) + COLORS + SHAPES + RELATIONS)


def target_vocabulary() -> Vocabulary:
    words = (LEXICON["a"],) + tuple(LEXICON[c] for c in COLORS) \
        + tuple(LEXICON[s] for s in SHAPES) + tuple(LEXICON[r] for r in RELATIONS)
    return Vocabulary.from_words(words)


# ---------------------------------------------------------------------------
# rendering

def _polygon_mask(xx, yy, verts):
    # even-odd crossing rule; handles the concave star
    inside = np.zeros(xx.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        straddles = (y1 > yy) != (y2 > yy)
        denom = np.where(straddles, y2 - y1, 1.0)
        xint = x1 + (yy - y1) * (x2 - x1) / denom
        inside ^= straddles & (xx < xint)
    return inside


def _shape_mask(shape, cx, cy, r, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= 0.9 * r
    if shape == "triangle":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= (yy - cy + r) / 2.0)
    if shape == "star":
        verts = []
        for k in range(10):
            ang = -np.pi / 2 + k * np.pi / 5
            rad = 1.2 * r if k % 2 == 0 else 0.5 * r
            verts.append((cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
        return _polygon_mask(xx, yy, verts)
    raise DataError(f"unknown shape '{shape}'")


def _centers(relation, size):
    lo, hi, mid = size / 4.0, 3.0 * size / 4.0, size / 2.0
    if relation == "leftof":
        return (lo, mid), (hi, mid)
    if relation == "rightof":
        return (hi, mid), (lo, mid)
    if relation == "above":
        return (mid, lo), (mid, hi)  # smaller row = higher up
    return (mid, hi), (mid, lo)


def render_u8(scene: ShapeScene, size: int = 32) -> np.ndarray:
    """(size, size, 3) uint8 image, white background, two filled shapes."""
    if size < 16:
        raise DataError(f"image size {size} too small to render (min 16)")
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    r = size * 3.0 / 16.0
    (x1, y1), (x2, y2) = _centers(scene.relation, size)
    for shape, color, cx, cy in ((scene.shape1, scene.color1, x1, y1),
                                 (scene.shape2, scene.color2, x2, y2)):
        mask = _shape_mask(shape, cx, cy, r, size)
        img[mask] = PALETTE[color]
    return img


def render(scene: ShapeScene, size: int = 32) -> np.ndarray:
    """(3, size, size) float64 image with pixels normalized to [-1, 1]."""
    u8 = render_u8(scene, size)
    return (u8.astype(np.float64) / 127.5 - 1.0).transpose(2, 0, 1)


def image_to_unit(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float64) / 127.5 - 1.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# PPM io (binary P6, maxval 255)

def write_ppm(path, u8: np.ndarray) -> None:
    if u8.ndim != 3 or u8.shape[2] != 3 or u8.dtype != np.uint8:
        raise DataError(f"write_ppm expects (H,W,3) uint8, got {u8.shape} {u8.dtype}")
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raw = parts[4][:w * h * 3]
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# corpus

SPLITS = ("train", "dev", "test")


@dataclass
class ManifestRow:
    split: str
    src: str
    tgt: str
    image_path: str


class Manifest:
    """UTF-8 TSV, header 'split\\tsrc\\ttgt\\timage_path', one row per example."""

    HEADER = "split\tsrc\ttgt\timage_path"

    def __init__(self, rows, root=None):
        self.rows = list(rows)
        self.root = Path(root) if root is not None else None

    def split(self, name: str):
        if name not in SPLITS:
            raise DataError(f"unknown split '{name}'")
        return [r for r in self.rows if r.split == name]

    def save(self, path) -> None:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r.split}\t{r.src}\t{r.tgt}\t{r.image_path}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != cls.HEADER:
            raise DataError(f"{path}: bad or missing manifest header")
        rows = []
        for k, line in enumerate(lines[1:], start=2):
            cols = line.split("\t")
            if len(cols) != 4:
                raise DataError(f"{path}:{k}: expected 4 tab-separated columns")
            if cols[0] not in SPLITS:
                raise DataError(f"{path}:{k}: unknown split '{cols[0]}'")
            rows.append(ManifestRow(*cols))
        return cls(rows, root=path.parent)

    def image(self, row: ManifestRow) -> np.ndarray:
        base = self.root if self.root is not None else Path(".")
        return image_to_unit(read_ppm(base / row.image_path))


def worker_count() -> int:
    """Parallelism cap from IMAGIT_THREADS (default 1)."""
    raw = os.environ.get("IMAGIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"IMAGIT_THREADS must be an integer, got '{raw}'")
    return max(1, n)


def map_ordered(fn, items):
    """fn over items preserving order, threaded when IMAGIT_THREADS > 1."""
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def gen_corpus(out_dir, seed: int, n_train: int = 512, n_dev: int = 64,
               n_test: int = 64, image_size: int = 32) -> Manifest:
    """Scene-disjoint splits sampled without replacement; byte-stable output."""
    scenes = all_scenes()
    total = n_train + n_dev + n_test
    if total > len(scenes):
        raise DataError(
            f"requested {total} examples but only {len(scenes)} distinct scenes exist")
    order = RngStreams(seed).get("data").permutation(len(scenes))[:total]
    picked = [scenes[i] for i in order]

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    source_vocabulary().save(out_dir / "src_vocab.txt")
    target_vocabulary().save(out_dir / "tgt_vocab.txt")

    images = map_ordered(lambda sc: render_u8(sc, image_size), picked)
    rows = []
    for idx, (scene, u8) in enumerate(zip(picked, images)):
        rel_path = f"images/{idx:05d}.ppm"
        write_ppm(out_dir / rel_path, u8)
        if idx < n_train:
            part = "train"
        elif idx < n_train + n_dev:
            part = "dev"
        else:
            part = "test"
        src = " ".join(scene.sentence())
        tgt = " ".join(translate_oracle(scene.sentence()))
        rows.append(ManifestRow(part, src, tgt, rel_path))
    manifest = Manifest(rows, root=out_dir)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def load_split_arrays(manifest: Manifest, split: str, src_vocab: Vocabulary,
                      tgt_vocab: Vocabulary, with_images: bool = True):
    """Stacked (N, L) id arrays plus optionally (N, 3, R, R) images."""
    rows = manifest.split(split)
    if not rows:
        raise DataError(f"split '{split}' is empty")
    src = np.stack([src_vocab.encode(r.src.split()) for r in rows])
    tgt = np.stack([tgt_vocab.encode(r.tgt.split()) for r in rows])
    imgs = None
    if with_images:
        imgs = np.stack(map_ordered(manifest.image, rows))
    return src, tgt, imgs
