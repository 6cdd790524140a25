"""Trainable parameter container and initialization helpers."""

from __future__ import annotations

import numpy as np

Array = np.ndarray


class Param:
    """A trainable array paired with an accumulated gradient buffer.

    Forward/backward code reads ``data`` and adds into ``grad``; only the
    optimizer's update step mutates ``data``.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data: Array):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self):
        return f"Param(shape={self.data.shape}, dtype={self.data.dtype})"


def conv_weight(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int,
                dtype) -> Param:
    # Uniform(-k, k) with k = 1/sqrt(fan_in) keeps gate pre-activations small.
    k = 1.0 / np.sqrt(cin * kh * kw)
    return Param(rng.uniform(-k, k, size=(cout, cin, kh, kw)).astype(dtype))


def deconv_weight(rng: np.random.Generator, cin: int, cout: int, kh: int, kw: int,
                  dtype) -> Param:
    k = 1.0 / np.sqrt(cin * kh * kw)
    return Param(rng.uniform(-k, k, size=(cin, cout, kh, kw)).astype(dtype))


def zeros(shape, dtype) -> Param:
    return Param(np.zeros(shape, dtype=dtype))


def ones(shape, dtype) -> Param:
    return Param(np.ones(shape, dtype=dtype))
