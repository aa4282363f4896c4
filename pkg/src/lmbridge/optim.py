"""Named parameter store with per-parameter freezing and Adam.

Weight decay is decoupled (applied directly to the parameter, not through
the moment estimates).  Frozen parameters are skipped entirely: data and
optimizer state stay bit-identical while their gradients may still be
populated by backward passes.
"""

from __future__ import annotations

import numpy as np

from lmbridge.tensor import Tensor


class ParamStore:
    """Ordered map of name -> Tensor with freeze flags and Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._frozen[name] = False
        self.m[name] = np.zeros_like(tensor.data)
        self.v[name] = np.zeros_like(tensor.data)
        self.t[name] = 0
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def freeze(self, names) -> None:
        for n in names:
            self._frozen[self._require(n)] = True

    def unfreeze(self, names) -> None:
        for n in names:
            self._frozen[self._require(n)] = False

    def unfreeze_all(self) -> None:
        for n in self._frozen:
            self._frozen[n] = False

    def is_frozen(self, name: str) -> bool:
        return self._frozen[self._require(name)]

    def frozen_names(self):
        return [n for n, f in self._frozen.items() if f]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def _require(self, name: str) -> str:
        if name not in self._params:
            raise KeyError(f"unknown parameter {name!r}")
        return name


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Parameters whose grad is absent are skipped (no state change); frozen
    parameters are skipped regardless.  All gradients are cleared at the
    end of the step.
    """
    if lr < 0.0:
        raise ValueError(f"negative learning rate {lr}")
    if weight_decay < 0.0:
        raise ValueError(f"negative weight decay {weight_decay}")
    for name, p in store.items():
        if store.is_frozen(name) or p.grad is None:
            continue
        g = p.grad
        t = store.t[name] + 1
        store.t[name] = t
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        if weight_decay != 0.0:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    store.zero_grads()
