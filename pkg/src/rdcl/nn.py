"""Parameterized building blocks: linear layers, two-layer MLPs, LSTM cells,
a bidirectional LSTM, and an Adam optimizer.

Every block exposes ``named_parameters()`` yielding ``(name, Tensor)`` pairs in
a fixed order; checkpoints and optimizers rely on that order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autograd import Tensor, ShapeError, concat, linear, lstm_cell, stack, tanh


class Module:
    """Minimal parameter container; subclasses register children in ``_children``."""

    _children: tuple[str, ...] = ()
    _leaves: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._leaves:
            yield prefix + name, getattr(self, name)
        for name in self._children:
            yield from getattr(self, name).named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    _leaves = ("W", "b")

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        self.W = _param(np.zeros((n_out, n_in)) if zero else _uniform(rng, n_in, (n_out, n_in)))
        self.b = _param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)


class MLP2(Module):
    """Linear -> tanh -> Linear."""

    _children = ("l1", "l2")

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator,
                 zero_out: bool = False):
        self.l1 = Linear(n_in, n_hidden, rng)
        self.l2 = Linear(n_hidden, n_out, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(tanh(self.l1(x)))


class LSTMCell(Module):
    """LSTM cell; gate blocks of the 4h rows are ordered input, forget, cell, output."""

    _leaves = ("W_ih", "W_hh", "b")

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.hidden = n_hidden
        self.W_ih = _param(_uniform(rng, n_hidden, (4 * n_hidden, n_in)))
        self.W_hh = _param(_uniform(rng, n_hidden, (4 * n_hidden, n_hidden)))
        self.b = _param(np.zeros(4 * n_hidden))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_cell(self.W_ih, self.W_hh, self.b, x, h, c)

    def zero_state(self, lead: tuple[int, ...]) -> tuple[Tensor, Tensor]:
        z = np.zeros(lead + (self.hidden,))
        return Tensor(z), Tensor(z.copy())

    def run(self, steps: list[Tensor]) -> list[Tensor]:
        """Unroll over a list of per-step inputs; returns hidden states."""
        h, c = self.zero_state(steps[0].shape[:-1])
        out = []
        for x in steps:
            h, c = self(x, h, c)
            out.append(h)
        return out


class BiLSTM(Module):
    _children = ("fwd", "bwd")

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.fwd = LSTMCell(n_in, n_hidden, rng)
        self.bwd = LSTMCell(n_in, n_hidden, rng)

    def __call__(self, seq: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        """Run over ``seq`` shaped (T, in) or (N, T, in).

        Returns per-step forward hidden states and backward hidden states,
        both indexed by original time.
        """
        return bilstm_states(self.fwd, self.bwd, seq)


def _time_steps(seq: Tensor) -> list[Tensor]:
    if seq.ndim == 2:
        return [seq[t] for t in range(seq.shape[0])]
    return [seq[:, t] for t in range(seq.shape[1])]


def bilstm_states(fwd: LSTMCell, bwd: LSTMCell, seq: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    steps = _time_steps(seq)
    if not steps:
        raise ShapeError("bilstm: empty sequence")
    hf = fwd.run(steps)
    hb = bwd.run(steps[::-1])[::-1]
    return hf, hb


def bilstm_forward(fwd: LSTMCell, bwd: LSTMCell, seq: Tensor) -> Tensor:
    """Per-step ``[h_fwd || h_bwd]``; (T, in) -> (T, 2h), (N, T, in) -> (N, T, 2h)."""
    hf, hb = bilstm_states(fwd, bwd, seq)
    axis = 0 if seq.ndim == 2 else 1
    return stack([concat([a, b], axis=-1) for a, b in zip(hf, hb)], axis=axis)


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SGD:
    params: list[Tensor]
    lr: float = 1e-2

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad
