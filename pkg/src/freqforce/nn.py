"""Parameter containers and optimizers on top of :mod:`freqforce.tensor`."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .tensor import DTYPE, Tensor, matmul


class Module:
    """Attribute-walking parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set at
    construction; submodules may be attributes, lists or dicts of modules.
    A module marked ``frozen`` reports its parameters as non-trainable.
    """

    frozen = False

    def named_parameters(self, prefix: str = "", include_frozen: bool = True) -> Iterator[tuple[str, Tensor]]:
        if self.frozen and not include_frozen:
            return
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            yield from _walk(val, name, include_frozen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters(include_frozen=False)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=DTYPE)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def freeze(self) -> None:
        self.frozen = True
        for _, p in self.named_parameters():
            p.requires_grad = False
            p.grad = None


def _walk(val, name, include_frozen):
    if isinstance(val, Tensor):
        if val.requires_grad or val.name == "param":
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".", include_frozen)
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}", include_frozen)
    elif isinstance(val, dict):
        for k in val:
            yield from _walk(val[k], f"{name}.{k}", include_frozen)


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name="param")


def param_hash(module: Module) -> str:
    """SHA-256 over parameter names and raw bytes."""
    h = hashlib.sha256()
    for k, p in module.named_parameters():
        h.update(k.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            bound = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


# -- optimizers --------------------------------------------------------------------


class SGD:
    """SGD with heavy-ball momentum."""

    def __init__(self, named_params, lr: float, momentum: float = 0.9):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            v = self.velocity.get(k)
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self.velocity[k] = v
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "buffers": {f"velocity/{k}": v for k, v in self.velocity.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.velocity = {k.split("/", 1)[1]: np.array(v) for k, v in state["buffers"].items()}


class Adam:
    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        buffers = {f"m/{k}": v for k, v in self.m.items()}
        buffers.update({f"v/{k}": v for k, v in self.v.items()})
        return {"t": self.t, "buffers": buffers}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m, self.v = {}, {}
        for key, val in state["buffers"].items():
            kind, name = key.split("/", 1)
            (self.m if kind == "m" else self.v)[name] = np.array(val)


def make_optimizer(kind: str, named_params, lr: float, momentum: float = 0.9):
    if kind == "sgd":
        return SGD(named_params, lr, momentum)
    if kind == "adam":
        return Adam(named_params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
