"""Minimal dense-tensor neural network core with reverse-mode gradients.

Everything is float64 numpy. Layers cache forward activations on an internal
stack when gradients are enabled, so several forward passes may be issued
before the matching backward passes, which must then run in reverse order
(last forward, first backward). Call ``eval()``/``enable_grad(False)`` for
inference so no caches accumulate.

Included: linear, ReLU, sigmoid, batch normalization (1d over a batch, 2d
over the spatial positions of a feature map), 2-D convolution
(cross-correlation convention), quadrant average pooling, binary
cross-entropy, SGD/Adam, a central-finite-difference gradient checker, and a
JSON checkpoint manifest.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, SchemaError

BCE_CLAMP = 1e-12


class Tensor:
    """A dense value with an optional same-shape gradient buffer."""

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def add_grad(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.zero_grad()
        self.grad += grad

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape})"


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """He-style uniform init with bound sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_out_dim(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise DimensionError(
            f"convolution output dimension {out} for input {size} "
            f"(k={kernel}, s={stride}, p={padding})"
        )
    return out


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class Module:
    """Base class: training / gradient flags and parameter traversal."""

    def __init__(self):
        self.training = True
        self.grad_enabled = True
        self._ctx: list = []

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def modules(self) -> Iterable["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def enable_grad(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.grad_enabled = mode
            if not mode:
                module._ctx.clear()
        return self

    def _local_params(self) -> list[tuple[str, Tensor]]:
        return []

    def _local_buffers(self) -> list[str]:
        return []

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = list(self._local_params())
        for name, child in self.children():
            out.extend((f"{name}.{k}", t) for k, t in child.named_params())
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [(k, getattr(self, k)) for k in self._local_buffers()]
        for name, child in self.children():
            out.extend((f"{name}.{k}", v) for k, v in child.named_buffers())
        return out

    def zero_grad(self) -> None:
        for tensor in self.params():
            tensor.zero_grad()

    def _push(self, ctx) -> None:
        if self.grad_enabled:
            self._ctx.append(ctx)

    def _pop(self):
        if not self._ctx:
            raise RuntimeError(
                f"{type(self).__name__}.backward without a cached forward "
                "(was grad_enabled off?)"
            )
        return self._ctx.pop()

    def pending(self) -> int:
        """Number of cached forwards not yet consumed by backward."""
        return sum(len(module._ctx) for module in self.modules())

    def clear_cache(self) -> None:
        for module in self.modules():
            module._ctx.clear()


class Linear(Module):
    """Affine layer y = x @ W.T + b over a batch of row vectors.

    Pass bias=False when the layer feeds a batchnorm, which would cancel the
    bias anyway.
    """

    def __init__(
        self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True
    ):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(he_uniform(rng, (out_dim, in_dim), in_dim), "weight")
        self.bias = Tensor(np.zeros(out_dim), "bias") if bias else None

    def _local_params(self):
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"linear expects (B, {self.in_dim}), got {x.shape}"
            )
        self._push(x)
        out = x @ self.weight.data.T
        if self.bias is not None:
            out += self.bias.data
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._pop()
        self.weight.add_grad(grad_out.T @ x)
        if self.bias is not None:
            self.bias.add_grad(grad_out.sum(axis=0))
        return grad_out @ self.weight.data


class ReLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._push(x > 0)
        return np.maximum(x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        mask = self._pop()
        return grad_out * mask


class Sigmoid(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        out = sigmoid(x)
        self._push(out)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        out = self._pop()
        return grad_out * out * (1.0 - out)


def _bn_forward_train(x2d, gamma, beta, eps):
    batch = x2d.shape[0]
    if batch < 2:
        raise DimensionError("batch normalization needs batch size >= 2 in train mode")
    mean = x2d.mean(axis=0)
    var = x2d.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x2d - mean) * inv_std
    y = gamma * xhat + beta
    return y, xhat, inv_std, mean, var


def _bn_backward(grad2d, xhat, inv_std, gamma, batch_stats: bool):
    dgamma = (grad2d * xhat).sum(axis=0)
    dbeta = grad2d.sum(axis=0)
    gx = grad2d * gamma
    if not batch_stats:
        return gx * inv_std, dgamma, dbeta
    batch = grad2d.shape[0]
    dx = (inv_std / batch) * (
        batch * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0)
    )
    return dx, dgamma, dbeta


class _BatchNormBase(Module):
    """Shared batchnorm math over a (batch, channels) view."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), "gamma")
        self.beta = Tensor(np.zeros(channels), "beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def _local_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _local_buffers(self):
        return ["running_mean", "running_var"]

    def _forward2d(self, x2d: np.ndarray) -> np.ndarray:
        if x2d.shape[1] != self.channels:
            raise DimensionError(
                f"batchnorm expects {self.channels} channels, got {x2d.shape[1]}"
            )
        if self.training:
            y, xhat, inv_std, mean, var = _bn_forward_train(
                x2d, self.gamma.data, self.beta.data, self.eps
            )
            batch = x2d.shape[0]
            # Running stats track the unbiased variance.
            self.running_mean = (
                1.0 - self.momentum
            ) * self.running_mean + self.momentum * mean
            self.running_var = (
                1.0 - self.momentum
            ) * self.running_var + self.momentum * var * batch / (batch - 1)
            self._push((xhat, inv_std, True))
            return y
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (x2d - self.running_mean) * inv_std
        self._push((xhat, inv_std, False))
        return self.gamma.data * xhat + self.beta.data

    def _backward2d(self, grad2d: np.ndarray) -> np.ndarray:
        xhat, inv_std, batch_stats = self._pop()
        dx, dgamma, dbeta = _bn_backward(grad2d, xhat, inv_std, self.gamma.data, batch_stats)
        self.gamma.add_grad(dgamma)
        self.beta.add_grad(dbeta)
        return dx


class BatchNorm1d(_BatchNormBase):
    """Normalizes each feature over the batch axis of a (B, F) input."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._forward2d(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return self._backward2d(grad_out)


class BatchNorm2d(_BatchNormBase):
    """Normalizes each channel over the spatial positions of a (C, H, W) map."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, h, w = x.shape
        y = self._forward2d(x.reshape(c, h * w).T)
        return y.T.reshape(c, h, w)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        c, h, w = grad_out.shape
        dx = self._backward2d(grad_out.reshape(c, h * w).T)
        return dx.T.reshape(c, h, w)


class Conv2d(Module):
    """2-D convolution (cross-correlation) on a single (C, H, W) map."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int],
        stride: tuple[int, int] = (1, 1),
        padding: tuple[int, int] = (0, 0),
        rng: np.random.Generator | None = None,
        bias: bool = True,
    ):
        super().__init__()
        if min(kernel) < 1 or min(stride) < 1 or min(padding) < 0:
            raise DimensionError("kernel/stride must be >= 1 and padding >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel[0] * kernel[1]
        self.weight = Tensor(
            he_uniform(rng, (out_channels, in_channels, kernel[0], kernel[1]), fan_in),
            "weight",
        )
        self.bias = Tensor(np.zeros(out_channels), "bias") if bias else None

    def _local_params(self):
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_out_dim(h, self.kernel[0], self.stride[0], self.padding[0]),
            conv_out_dim(w, self.kernel[1], self.stride[1], self.padding[1]),
        )

    def _windows(self, padded: np.ndarray) -> np.ndarray:
        view = np.lib.stride_tricks.sliding_window_view(
            padded, self.kernel, axis=(1, 2)
        )
        return view[:, :: self.stride[0], :: self.stride[1]]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise DimensionError(
                f"conv2d expects ({self.in_channels}, H, W), got {x.shape}"
            )
        _, h, w = x.shape
        self.out_shape(h, w)  # validates positivity
        ph, pw = self.padding
        padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
        windows = self._windows(padded)
        y = np.tensordot(self.weight.data, windows, axes=([1, 2, 3], [0, 3, 4]))
        if self.bias is not None:
            y += self.bias.data[:, None, None]
        self._push((padded, x.shape))
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        padded, x_shape = self._pop()
        windows = self._windows(padded)
        if self.bias is not None:
            self.bias.add_grad(grad_out.sum(axis=(1, 2)))
        self.weight.add_grad(
            np.tensordot(grad_out, windows, axes=([1, 2], [1, 2]))
        )
        _, h, w = x_shape
        ph, pw = self.padding
        sh, sw = self.stride
        out_h, out_w = grad_out.shape[1:]
        dpadded = np.zeros_like(padded)
        for i in range(self.kernel[0]):
            for j in range(self.kernel[1]):
                contrib = np.tensordot(
                    self.weight.data[:, :, i, j], grad_out, axes=([0], [0])
                )
                dpadded[:, i : i + sh * out_h : sh, j : j + sw * out_w : sw] += contrib
        return dpadded[:, ph : ph + h, pw : pw + w]


class QuadrantPool(Module):
    """Averages the four (possibly overlapping) quadrants of a (C, H, W) map.

    Rows split into [0, ceil(H/2)) and [floor(H/2), H); columns likewise. For
    odd dimensions the halves overlap by one row/column, and for size one
    they coincide, so every quadrant is non-empty for any H, W >= 1. Output
    is channel-major with quadrant order TL, TR, BL, BR: entry c*4 + q.
    """

    @staticmethod
    def _halves(size: int) -> tuple[slice, slice]:
        return slice(0, -(-size // 2)), slice(size // 2, size)

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, h, w = x.shape
        top, bottom = self._halves(h)
        left, right = self._halves(w)
        quads = (
            (top, left),
            (top, right),
            (bottom, left),
            (bottom, right),
        )
        means = np.stack(
            [x[:, rows, cols].mean(axis=(1, 2)) for rows, cols in quads], axis=1
        )
        self._push((x.shape, quads))
        return means.reshape(4 * c)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        shape, quads = self._pop()
        c = shape[0]
        grads = grad_out.reshape(c, 4)
        dx = np.zeros(shape)
        for q, (rows, cols) in enumerate(quads):
            size = (rows.stop - rows.start) * (cols.stop - cols.start)
            dx[:, rows, cols] += grads[:, q][:, None, None] / size
        return dx


class Sequential(Module):
    """Chains layers; backward runs in reverse."""

    def __init__(self, layers: Sequence[Module], names: Sequence[str] | None = None):
        super().__init__()
        self.layers = list(layers)
        self.names = list(names) if names is not None else [
            str(i) for i in range(len(self.layers))
        ]
        if len(self.names) != len(self.layers):
            raise DimensionError("names and layers lengths differ")

    def children(self):
        return list(zip(self.names, self.layers))

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


# ---------------------------------------------------------------------------
# Functional pieces
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    expx = np.exp(x[~pos])
    out[~pos] = expx / (1.0 + expx)
    return out


def bce_loss(pred, target, reduction: str = "sum") -> float:
    """Binary cross-entropy -(t ln p + (1-t) ln(1-p)) with p clamped.

    Predictions are clamped to [1e-12, 1 - 1e-12]. ``reduction`` is "sum",
    "mean", or "none".
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"bce shapes differ: {p.shape} vs {t.shape}")
    losses = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    if reduction == "sum":
        return float(losses.sum())
    if reduction == "mean":
        return float(losses.mean())
    if reduction == "none":
        return losses
    raise ValueError(f"unknown reduction {reduction!r}")


def bce_grad(pred, target) -> np.ndarray:
    """Elementwise d/dp of the summed binary cross-entropy."""
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    return -(t / p) + (1.0 - t) / (1.0 - p)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class SGD:
    """Plain gradient descent with optional momentum and L2 weight decay."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g


class Adam:
    """Adam with bias correction; defaults lr=1e-3, betas=(0.9, 0.999)."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**self._t)
            v_hat = v / (1.0 - b2**self._t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], float],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    sample_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Central finite differences against the grads already stored on params.

    The caller runs forward+backward once so every tensor in ``params``
    carries its analytic gradient, then passes the pure loss evaluator ``f``.
    Per component the relative error is |a - n| / max(1e-8, |a| + |n|); the
    maximum over all checked components is returned. ``sample_per_param``
    limits the check to a seeded random subset of each tensor.
    """
    analytic = []
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient; run backward first")
        analytic.append(p.grad.copy())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(params, analytic):
        flat = tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        if sample_per_param is not None and flat.size > sample_per_param:
            indices = rng.choice(flat.size, size=sample_per_param, replace=False)
        else:
            indices = range(flat.size)
        for i in indices:
            original = flat[i]
            flat[i] = original + epsilon
            up = f()
            flat[i] = original - epsilon
            down = f()
            flat[i] = original
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError("non-finite loss during gradient check")
            numeric = (up - down) / (2.0 * epsilon)
            a = gflat[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint manifest
# ---------------------------------------------------------------------------


def write_manifest(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Persist named arrays plus metadata as a single sorted-key JSON file."""
    payload = {
        "meta": meta,
        "arrays": {
            name: {"shape": list(a.shape), "data": np.asarray(a).ravel().tolist()}
            for name, a in arrays.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def read_manifest(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if "meta" not in payload or "arrays" not in payload:
        raise SchemaError(f"{path}: not a checkpoint manifest")
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["arrays"].items()
    }
    return payload["meta"], arrays
