"""Run configuration: flat dataclass, desk/full presets, sectioned text format.

The file format is TOML-style sections of `key = value` lines; values are
ints, floats, booleans (true/false), or double-quoted strings. Serialization
is canonical (fixed section/key order), so equal configs produce identical
bytes and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.0
    label_smoothing: float = 0.0
    # imagination
    noise_dim: int = 16
    d_ca: int = 32
    base_channels: int = 32
    refined_channels: int = 16
    base_grid: int = 8
    kl_weight: float = 1.0
    # images
    image_size: int = 32
    # loss
    lambda1: float = 20.0
    lambda2: float = 40.0
    # train
    batch_size: int = 32
    max_steps: int = 3000
    max_epochs: int = 2000
    warmup_steps: int = 400
    gan_base_lr: float = 2e-4
    gan_half_every: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    gan_adam_beta1: float = 0.5
    gan_adam_beta2: float = 0.999
    gan_adam_eps: float = 1e-8
    eval_every: int = 100
    patience: int = 10
    stop_train_bleu: float = 0.0
    seed: int = 17
    # captioner
    cap_hidden: int = 64
    cap_attn_dim: int = 32
    cap_lr: float = 2e-3
    cap_batch: int = 32
    cap_max_epochs: int = 200
    cap_patience: int = 10
    # io
    data_dir: str = ""
    out_dir: str = ""

    # ---- derived quantities -------------------------------------------------
    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def refined_grid(self) -> int:
        return 2 * self.base_grid

    @property
    def seed_spatial(self) -> int:
        return max(1, self.base_grid // 16)

    @property
    def n_stride2_blocks(self) -> int:
        ratio = self.base_grid // self.seed_spatial
        return int(ratio).bit_length() - 1

    @property
    def rgb_upsample(self) -> int:
        return self.image_size // self.refined_grid

    def validate(self) -> "RunConfig":
        if self.d_model < 2 or self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.layers < 1 or self.heads < 1 or self.ffn_dim < 1:
            raise ConfigError("layers, heads, ffn_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing {self.label_smoothing} outside [0, 1)")
        g = self.base_grid
        if g < 2 or (g & (g - 1)) != 0:
            raise ConfigError(f"base_grid {g} must be a power of two >= 2")
        if self.seed_spatial * 2 ** self.n_stride2_blocks != g or self.n_stride2_blocks > 4:
            raise ConfigError(f"base_grid {g} unreachable with four generator blocks")
        if self.image_size % self.refined_grid != 0:
            raise ConfigError(
                f"image_size {self.image_size} not a multiple of refined grid {self.refined_grid}")
        f = self.rgb_upsample
        if f & (f - 1):
            raise ConfigError(f"image_size / refined_grid = {f} must be a power of two")
        if self.image_size < 16:
            raise ConfigError(f"image_size {self.image_size} below the renderer minimum 16")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.kl_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if min(self.batch_size, self.max_steps, self.warmup_steps, self.gan_half_every,
               self.eval_every, self.patience, self.noise_dim, self.d_ca,
               self.cap_hidden, self.cap_attn_dim, self.cap_batch) < 1:
            raise ConfigError("counts and dims must be >= 1")
        return self


_SECTIONS = (
    ("model", ("d_model", "layers", "heads", "ffn_dim", "dropout", "label_smoothing")),
    ("imagination", ("noise_dim", "d_ca", "base_channels", "refined_channels",
                     "base_grid", "kl_weight")),
    ("images", ("image_size",)),
    ("loss", ("lambda1", "lambda2")),
    ("train", ("batch_size", "max_steps", "max_epochs", "warmup_steps", "gan_base_lr",
               "gan_half_every", "adam_beta1", "adam_beta2", "adam_eps",
               "gan_adam_beta1", "gan_adam_beta2", "gan_adam_eps", "eval_every",
               "patience", "stop_train_bleu", "seed")),
    ("captioner", ("cap_hidden", "cap_attn_dim", "cap_lr", "cap_batch",
                   "cap_max_epochs", "cap_patience")),
    ("io", ("data_dir", "out_dir")),
)

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for section, keys in _SECTIONS:
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
        lines.append("")
    return "\n".join(lines)


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind in ("str", str):
            if not (raw.startswith('"') and raw.endswith('"')):
                raise ValueError("strings must be double-quoted")
            return json.loads(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {raw} ({e})")
    raise ConfigError(f"unhandled field type for '{key}'")


def config_from_text(text: str) -> RunConfig:
    section = None
    valid = {s: set(keys) for s, keys in _SECTIONS}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1]
            if section not in valid:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if section is None:
            raise ConfigError(f"line {lineno}: key '{key}' outside any section")
        if key not in valid[section]:
            raise ConfigError(f"line {lineno}: unknown key '{key}' in [{section}]")
        values[key] = _parse_value(key, raw)
    return replace(RunConfig(), **values).validate()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()[:16]


def desk_preset(**overrides) -> RunConfig:
    return replace(RunConfig(), **overrides).validate()


def full_preset(**overrides) -> RunConfig:
    base = RunConfig(
        d_model=512, layers=6, heads=8, ffn_dim=2048, dropout=0.1, label_smoothing=0.1,
        noise_dim=100, d_ca=256, base_channels=64, refined_channels=32, base_grid=64,
        image_size=128, batch_size=64, max_steps=200000, max_epochs=10000,
        warmup_steps=8000, eval_every=1000, seed=1,
        cap_hidden=512, cap_attn_dim=256, cap_lr=2e-4, cap_batch=64, cap_max_epochs=100,
    )
    return replace(base, **overrides).validate()


PRESETS = {"desk": desk_preset, "full": full_preset}


def tiny_preset(**overrides) -> RunConfig:
    """Minimal dims for fast tests and whole-model finite-difference checks."""
    base = RunConfig(
        d_model=8, layers=1, heads=2, ffn_dim=16, noise_dim=4, d_ca=4,
        base_channels=4, refined_channels=4, base_grid=2, image_size=16,
        batch_size=4, max_steps=50, warmup_steps=20, eval_every=10,
        cap_hidden=8, cap_attn_dim=6, cap_batch=4, cap_max_epochs=30,
    )
    return replace(base, **overrides).validate()
