"""Minimal parameter containers on top of the autodiff engine."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from .autodiff import DTYPE, Tensor, layer_norm, quick_gelu
from .errors import ContractError


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ContractError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(DTYPE, copy=True)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std=None):
        super().__init__()
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.weight = self.add_param("weight", rng.normal(0.0, std, (d_in, d_out)) if std else np.zeros((d_in, d_out)))
        self.bias = self.add_param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    """Two-layer feed-forward net, ``d -> hidden -> d_out``."""

    def __init__(self, rng: np.random.Generator, d: int, hidden: int, d_out=None, out_std=None):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(rng, d, hidden))
        self.fc2 = self.add_child("fc2", Linear(rng, hidden, d_out or d, std=out_std))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(quick_gelu(self.fc1(x)))
