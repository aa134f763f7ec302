"""Dense float64 numerics for small feed-forward nets.

Networks are described by a nested list of layer objects (``Linear``,
``SiLU``, ``Residual``) and evaluated against a ``ParamStore``.  Every layer
has a hand-written backward pass; LoRA adapters are folded into ``Linear``
at evaluation time so the frozen weights are never modified.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np


class NumericError(RuntimeError):
    """Raised when a computation produces NaN/Inf or otherwise diverges."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


class ParamStore:
    """Ordered name -> float64 array map with a creation seed."""

    def __init__(self, entries=None, rng_seed: int = 0):
        self.entries: OrderedDict[str, np.ndarray] = OrderedDict()
        self.rng_seed = int(rng_seed)
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = check_finite(np.array(value, dtype=np.float64), name)
        self.entries[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.entries:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.entries[name].shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {self.entries[name].shape}")
        self.entries[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self) -> list[str]:
        return list(self.entries)

    def n_scalars(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.entries.items() if k.startswith(prefix))

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.entries.items()}, self.rng_seed)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, value in self.entries.items():
            h.update(name.encode())
            h.update(str(value.shape).encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()


@dataclass
class LoraAdapter:
    """Low-rank delta ``(alpha / rank) * B @ A`` on a 2-D weight."""

    target: str
    A: np.ndarray  # rank x d_in
    B: np.ndarray  # d_out x rank
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def n_trainable(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    @classmethod
    def init(cls, target: str, weight_shape, rank: int, alpha: float, rng, sigma: float = 0.01):
        d_out, d_in = weight_shape
        return cls(
            target,
            rng.normal(0.0, sigma, size=(rank, d_in)),
            np.zeros((d_out, rank)),
            float(alpha),
        )


class LoraSet(OrderedDict):
    """target name -> LoraAdapter, exposing A/B as one flat trainable dict."""

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for target, ad in self.items():
            out[f"{target}.lora_A"] = ad.A
            out[f"{target}.lora_B"] = ad.B
        return out

    def n_trainable(self) -> int:
        return sum(ad.n_trainable for ad in self.values())

    def copy(self) -> "LoraSet":
        return LoraSet((k, LoraAdapter(v.target, v.A.copy(), v.B.copy(), v.alpha)) for k, v in self.items())

    def load_tensors(self, tensors) -> None:
        for target, ad in self.items():
            ad.A[...] = tensors[f"{target}.lora_A"]
            ad.B[...] = tensors[f"{target}.lora_B"]


def lora_targets(layers) -> list[str]:
    """Weight names of every Linear inside Residual blocks (recursively)."""
    names = []
    for layer in layers:
        if isinstance(layer, Residual):
            for inner in _walk(layer.inner):
                if isinstance(inner, Linear):
                    names.append(inner.weight)
    return names


def _walk(layers):
    for layer in layers:
        yield layer
        if isinstance(layer, Residual):
            yield from _walk(layer.inner)


def lora_merge(params: ParamStore, adapter: LoraAdapter) -> ParamStore:
    W = params[adapter.target]
    if W.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise ValueError(f"adapter shape incompatible with {adapter.target} {W.shape}")
    out = params.copy()
    out[adapter.target] = W + adapter.delta()
    return out


def lora_unmerge(params: ParamStore, adapter: LoraAdapter) -> ParamStore:
    W = params[adapter.target]
    if W.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise ValueError(f"adapter shape incompatible with {adapter.target} {W.shape}")
    out = params.copy()
    out[adapter.target] = W - adapter.delta()
    return out


# --- layers -----------------------------------------------------------------


def _sigmoid(x):
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x):
    return x * _sigmoid(x)


@dataclass
class Linear:
    prefix: str
    d_in: int
    d_out: int
    bias: bool = True

    @property
    def weight(self) -> str:
        return f"{self.prefix}.w"

    @property
    def bias_name(self) -> str:
        return f"{self.prefix}.b"

    def init(self, params: ParamStore, rng, zero: bool = False, identity: bool = False):
        if identity:
            w = np.eye(self.d_out, self.d_in)
        elif zero:
            w = np.zeros((self.d_out, self.d_in))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(self.d_in), size=(self.d_out, self.d_in))
        params.add(self.weight, w)
        if self.bias:
            params.add(self.bias_name, np.zeros(self.d_out))

    def forward(self, params, adapters, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"{self.prefix}: expected width {self.d_in}, got {x.shape[-1]}")
        y = x @ params[self.weight].T
        if self.bias:
            y = y + params[self.bias_name]
        ad = adapters.get(self.weight) if adapters else None
        xa = None
        if ad is not None:
            xa = x @ ad.A.T
            y = y + ad.scale * (xa @ ad.B.T)
        return y, (x, xa)

    def backward(self, params, adapters, cache, gy, grads):
        x, xa = cache
        ad = adapters.get(self.weight) if adapters else None
        gx = gy @ params[self.weight]
        if adapters:
            if ad is not None:
                s = ad.scale
                g_xa = s * (gy @ ad.B)
                _acc(grads, f"{self.weight}.lora_B", s * (gy.T @ xa))
                _acc(grads, f"{self.weight}.lora_A", g_xa.T @ x)
                gx = gx + g_xa @ ad.A
        else:
            _acc(grads, self.weight, gy.T @ x)
            if self.bias:
                _acc(grads, self.bias_name, gy.sum(axis=0))
        return gx


@dataclass
class SiLU:
    def init(self, params, rng, **_):
        pass

    def forward(self, params, adapters, x):
        return silu(x), x

    def backward(self, params, adapters, x, gy, grads):
        s = _sigmoid(x)
        return gy * (s * (1.0 + x * (1.0 - s)))


@dataclass
class Residual:
    inner: list = field(default_factory=list)

    def init(self, params, rng, **_):
        for layer in self.inner:
            layer.init(params, rng)

    def forward(self, params, adapters, x):
        h, caches = _seq_forward(self.inner, params, adapters, x)
        return x + h, caches

    def backward(self, params, adapters, caches, gy, grads):
        return gy + _seq_backward(self.inner, params, adapters, caches, gy, grads)


def _acc(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def _seq_forward(layers, params, adapters, x):
    caches = []
    for layer in layers:
        x, c = layer.forward(params, adapters, x)
        caches.append(c)
    return x, caches


def _seq_backward(layers, params, adapters, caches, gy, grads):
    if len(caches) != len(layers):
        raise ValueError("cache does not match layer list")
    for layer, c in zip(reversed(layers), reversed(caches)):
        gy = layer.backward(params, adapters, c, gy, grads)
    return gy


def mlp_init(layers, params: ParamStore, rng, zero_last: bool = False) -> None:
    last = max(i for i, l in enumerate(layers) if isinstance(l, Linear)) if zero_last else -1
    for i, layer in enumerate(layers):
        if i == last:
            layer.init(params, rng, zero=True)
        else:
            layer.init(params, rng)


def mlp_forward(params: ParamStore, adapters, layers, x: np.ndarray, cache_out: bool = True):
    """Evaluate ``layers`` on a (batch, width) input.

    Returns ``(output, cache)``; ``cache`` is None when ``cache_out`` is False.
    """
    y, caches = _seq_forward(layers, params, adapters, np.asarray(x, dtype=np.float64))
    check_finite(y, "network output")
    return y, (caches if cache_out else None)


def mlp_backward(params: ParamStore, adapters, layers, cache, grad_output: np.ndarray):
    """Reverse pass.  With adapters, only LoRA A/B receive gradients."""
    if cache is None:
        raise ValueError("forward was run without cache_out")
    grads: dict[str, np.ndarray] = OrderedDict()
    gx = _seq_backward(layers, params, adapters, cache, np.asarray(grad_output, dtype=np.float64), grads)
    return grads, gx


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps_adam=1e-8) -> AdamState:
    """In-place Adam update of every array in ``params`` that has a gradient.

    ``params`` is any name -> array mapping (a ParamStore or LoraSet.tensors()).
    Arrays without a gradient entry are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps_adam)
    return state
