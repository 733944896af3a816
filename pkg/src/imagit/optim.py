"""Named parameters, Adam, and the two learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class Parameter:
    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, values: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.asarray(values, dtype=np.float64),
                             requires_grad=trainable)
        self.trainable = trainable

    def set_trainable(self, trainable: bool) -> None:
        self.trainable = trainable
        self.tensor.requires_grad = trainable

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape}, trainable={self.trainable})"


class ParameterStore:
    """Insertion-ordered unique-name parameter registry."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, values, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        p = Parameter(name, values, trainable)
        self._params[name] = p
        return p

    def adopt(self, param: Parameter) -> None:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name '{param.name}'")
        self._params[param.name] = param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def parameters(self):
        return self._params.values()

    def subset(self, prefix: str) -> "ParameterStore":
        """View (shared Parameter objects) of every name starting with prefix."""
        sub = ParameterStore()
        for name, p in self._params.items():
            if name.startswith(prefix):
                sub._params[name] = p
        return sub

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def grads(self) -> dict:
        """Collected grads of trainable params; missing one is an error."""
        out = {}
        for name, p in self._params.items():
            if not p.trainable:
                continue
            if p.tensor.grad is None:
                raise ValueError(f"missing grad for trainable parameter '{name}'")
            out[name] = p.tensor.grad
        return out

    def freeze(self, prefix: str = "") -> None:
        for name, p in self._params.items():
            if name.startswith(prefix):
                p.set_trainable(False)


class Adam:
    """Standard Adam with bias correction. State is keyed by parameter name."""

    def __init__(self, store: ParameterStore, betas=(0.9, 0.98), eps: float = 1e-9):
        self.store = store
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.store.items():
            if not p.trainable:
                continue
            if name not in grads:
                raise ValueError(f"missing grad for trainable parameter '{name}'")
            g = grads[name]
            if g.shape != p.tensor.shape:
                raise ValueError(
                    f"grad shape {g.shape} != parameter shape {p.tensor.shape} for '{name}'")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.tensor.values)
                self.m[name] = m
                self.v[name] = np.zeros_like(p.tensor.values)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.tensor.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(store: ParameterStore, grads: dict, lr: float,
              betas=(0.9, 0.98), eps: float = 1e-9, state: Adam | None = None) -> Adam:
    """One functional Adam step; returns the (possibly fresh) optimizer state."""
    if state is None:
        state = Adam(store, betas=betas, eps=eps)
    state.step(grads, lr)
    return state


@dataclass(frozen=True)
class Schedule:
    """kind 'transformer_warmup': lr = d_model^-0.5 * min(s^-0.5, s * warmup^-1.5).
    kind 'halving': lr = base_lr * 0.5^floor(s / half_every), s counted in epochs."""
    kind: str
    d_model: int = 0
    warmup_steps: int = 0
    base_lr: float = 0.0
    half_every: int = 0

    def __post_init__(self):
        if self.kind not in ("transformer_warmup", "halving"):
            raise ValueError(f"unknown schedule kind '{self.kind}'")
        if self.kind == "transformer_warmup" and (self.d_model < 1 or self.warmup_steps < 1):
            raise ValueError("transformer_warmup needs d_model >= 1 and warmup_steps >= 1")
        if self.kind == "halving" and (self.base_lr <= 0 or self.half_every < 1):
            raise ValueError("halving needs base_lr > 0 and half_every >= 1")


def schedule_lr(schedule: Schedule, step: int) -> float:
    """Learning rate at 1-based step (or epoch, for 'halving')."""
    if step < 1:
        raise ValueError(f"schedule_lr: step must be >= 1, got {step}")
    if schedule.kind == "transformer_warmup":
        return schedule.d_model ** -0.5 * min(step ** -0.5,
                                              step * schedule.warmup_steps ** -1.5)
    return schedule.base_lr * 0.5 ** (step // schedule.half_every)
