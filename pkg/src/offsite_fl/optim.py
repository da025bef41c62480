"""Decoupled-weight-decay adaptive optimizer used on both sides of the split."""

from __future__ import annotations

import numpy as np

from .autodiff import Array


class AdamW:
    """Adam with decoupled weight decay, momentum (0.9, 0.95), bias correction.

    Parameters with no accumulated gradient are treated as zero-gradient:
    their moments stay zero and (at weight_decay=0) their values are
    untouched bitwise.
    """

    def __init__(self, params: list[Array], lr: float, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None and self.weight_decay == 0.0:
                continue
            if g is None:
                g = np.zeros_like(p.values)
            g = g.astype(p.values.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.values - self.lr * update
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * p.values
            p.assign_(new.astype(p.values.dtype, copy=False))

    # checkpoint support -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for i in range(len(self.params)):
            self.m[i] = arrays[f"m.{i}"].astype(self.m[i].dtype, copy=False).reshape(self.m[i].shape)
            self.v[i] = arrays[f"v.{i}"].astype(self.v[i].dtype, copy=False).reshape(self.v[i].shape)
        self.t = int(t)
