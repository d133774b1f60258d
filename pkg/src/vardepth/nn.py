"""Parameter containers, basic layers, and the Adam optimizer.

A Module is any object whose trainable state is reachable from its attributes
(Tensors with requires_grad, child Modules, or lists of either). Parameter
discovery walks attributes in definition order, so the parameter list and the
checkpoint names are stable across runs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CompatibilityError, ShapeError


class Module:
    def _walk(self, prefix: str, out: dict[str, Tensor]) -> None:
        for name, val in vars(self).items():
            _collect(f"{prefix}{name}", val, out)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        self._walk(prefix, out)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise CompatibilityError(f"missing parameters: {', '.join(missing)}")
        for name, p in params.items():
            a = np.asarray(arrays[name], dtype=np.float32)
            if a.shape != p.data.shape:
                raise CompatibilityError(
                    f"parameter '{name}': stored shape {a.shape}, model {p.data.shape}"
                )
            p.data = a.copy()
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _collect(path: str, val, out: dict[str, Tensor]) -> None:
    if isinstance(val, Tensor):
        if val.requires_grad:
            out[path] = val
    elif isinstance(val, Module):
        val._walk(path + ".", out)
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            _collect(f"{path}.{i}", item, out)


def param(rng: np.random.Generator, shape, std: float) -> Tensor:
    """Gaussian-initialized trainable tensor (std=0 gives zeros)."""
    if std == 0.0:
        data = np.zeros(shape, dtype=np.float32)
    else:
        data = rng.normal(0.0, std, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """y = x @ weight + bias for row-major activations (n, d_in)."""

    def __init__(self, rng, d_in: int, d_out: int, std: float | None = None,
                 bias: bool = True):
        if std is None:
            std = 1.0 / np.sqrt(d_in)
        self.weight = param(rng, (d_in, d_out), std)
        self.bias = param(rng, (d_out,), 0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add_row_bias(y, self.bias)
        return y


class Conv3x3(Module):
    """3x3 same-padding convolution layer with He-scaled init."""

    def __init__(self, rng, c_in: int, c_out: int, zero_init: bool = False):
        std = 0.0 if zero_init else float(np.sqrt(2.0 / (c_in * 9)))
        self.weight = param(rng, (c_out, c_in, 3, 3), std)
        self.bias = param(rng, (c_out,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3x3(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        s = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


class Adam:
    """Adam with bias correction; all state in float32."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = np.float32(1.0 / (1.0 - self.beta1 ** self.t))
        c2 = np.float32(1.0 / (1.0 - self.beta2 ** self.t))
        lr = np.float32(self.lr)
        eps = np.float32(self.eps)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m * c1) / (np.sqrt(v * c2) + eps)

    def state_arrays(self, prefix: str = "opt_") -> dict[str, np.ndarray]:
        """Moment buffers keyed by slot index, for checkpoint resume."""
        out: dict[str, np.ndarray] = {prefix + "t": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}m_{i}"] = m.copy()
            out[f"{prefix}v_{i}"] = v.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "opt_") -> None:
        key = prefix + "t"
        if key not in arrays:
            return  # checkpoint predates optimizer state; start moments fresh
        self.t = int(arrays[key][0])
        for i in range(len(self.params)):
            m = arrays.get(f"{prefix}m_{i}")
            v = arrays.get(f"{prefix}v_{i}")
            if m is None or v is None or m.shape != self.m[i].shape:
                raise CompatibilityError(f"optimizer slot {i} missing or mismatched")
            self.m[i] = m.astype(np.float32).copy()
            self.v[i] = v.astype(np.float32).copy()


def he_uniform_rows(rng, v: int, c: int, scale: float = 1.0) -> np.ndarray:
    """Uniform codebook-style init in [-scale, scale], float32."""
    return (rng.uniform(-scale, scale, size=(v, c))).astype(np.float32)


def check_chw(x, name: str) -> None:
    if not (hasattr(x, "ndim") and x.ndim == 3):
        raise ShapeError(f"{name}: expected a (c, h, w) array")
