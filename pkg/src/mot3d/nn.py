"""Minimal dense network primitives with exact manual gradients.

Layers cache forward activations on an internal stack; backward calls must
mirror the forward calls in reverse order (last-in, first-out), which makes
weight sharing across several forward applications safe. All math is
float64.
"""

from __future__ import annotations

import io
import json
import math

import numpy as np

from .core import ContractError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-subtracted for stability."""
    if x.size == 0:
        return x.copy()
    shifted = x - np.max(x, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def softmax_rows_backward(grad_out: np.ndarray, softmax_out: np.ndarray) -> np.ndarray:
    dot = np.sum(grad_out * softmax_out, axis=-1, keepdims=True)
    return softmax_out * (grad_out - dot)


class Layer:
    """Base: parameter/grad registries plus the LIFO activation cache."""

    def __init__(self):
        self._cache: list = []

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def state(self) -> dict[str, np.ndarray]:
        """Non-trainable buffers (e.g. BatchNorm running statistics)."""
        return {}

    def zero_grad(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0

    def clear_cache(self) -> None:
        self._cache.clear()

    def _pop(self):
        if not self._cache:
            raise NumericError("backward called without a matching forward")
        return self._cache.pop()


class Linear(Layer):
    """Affine map. ``bias=False`` drops the shift, used where a following
    BatchNorm (or the softmax's row-shift invariance on key projections)
    would make it a structural no-op."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int,
                 gain: float = 1.0, bias: bool = True):
        super().__init__()
        std = gain / math.sqrt(n_in)
        self.weight = rng.normal(0.0, std, size=(n_out, n_in))
        self.bias = np.zeros(n_out) if bias else None
        self.g_weight = np.zeros_like(self.weight)
        self.g_bias = np.zeros(n_out) if bias else None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ContractError(
                f"linear expects (B, {self.weight.shape[1]}), got {x.shape}")
        self._cache.append(x)
        out = x @ self.weight.T
        if self.bias is not None:
            out += self.bias
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._pop()
        self.g_weight += grad.T @ x
        if self.bias is not None:
            self.g_bias += grad.sum(axis=0)
        return grad @ self.weight

    def params(self):
        out = {"w": self.weight}
        if self.bias is not None:
            out["b"] = self.bias
        return out

    def grads(self):
        out = {"w": self.g_weight}
        if self.bias is not None:
            out["b"] = self.g_bias
        return out


class BatchNorm(Layer):
    """Batch normalization over the row (object) axis.

    Train mode normalizes with the batch statistics and updates the running
    estimates; eval mode uses the running statistics. ``batch_stats=True``
    forces batch statistics without touching the running estimates, for
    pipelines whose batch is a meaningful population (the objects of one
    frame pair) rather than a sampling artifact. With fewer than 2 rows the
    running statistics are always used, so single-object frames stay well
    defined.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.g_gamma = np.zeros_like(self.gamma)
        self.g_beta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: np.ndarray, train: bool = False,
                batch_stats: bool | None = None) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.gamma.shape[0]:
            raise ContractError(f"batchnorm expects (B, {self.gamma.shape[0]}), got {x.shape}")
        n = x.shape[0]
        use_batch = train if batch_stats is None else batch_stats
        if use_batch and n >= 2:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mean) * inv_std
            if train:
                self.running_mean[...] = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean
                self.running_var[...] = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var * n / max(n - 1, 1)
            self._cache.append(("batch", xhat, inv_std))
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + BN_EPS)
            xhat = (x - self.running_mean) * inv_std
            self._cache.append(("running", xhat, inv_std))
        return self.gamma * xhat + self.beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        mode, xhat, inv_std = self._pop()
        self.g_gamma += np.sum(grad * xhat, axis=0)
        self.g_beta += grad.sum(axis=0)
        dxhat = grad * self.gamma
        if mode == "running":
            return dxhat * inv_std
        n = xhat.shape[0]
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.g_gamma, "beta": self.g_beta}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU(Layer):
    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        mask = x > 0
        self._cache.append(mask)
        return x * mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self._pop()


class LayerNorm(Layer):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.g_gamma = np.zeros_like(self.gamma)
        self.g_beta = np.zeros_like(self.beta)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache.append((xhat, inv_std))
        return self.gamma * xhat + self.beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._pop()
        c = xhat.shape[-1]
        self.g_gamma += np.sum(grad * xhat, axis=0)
        self.g_beta += grad.sum(axis=0)
        dxhat = grad * self.gamma
        return (inv_std / c) * (
            c * dxhat - dxhat.sum(axis=-1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.g_gamma, "beta": self.g_beta}


class FFN(Layer):
    """Stacked Linear-BatchNorm-ReLU stages with an optional plain linear head.

    ``dims`` gives the channel sizes, e.g. (11, 16, 8) builds two stages.
    With ``head_dim`` set, a final plain linear (no BN/ReLU) maps to the head
    width so outputs are unconstrained logits.
    """

    def __init__(self, rng: np.random.Generator, dims: tuple[int, ...],
                 head_dim: int | None = None):
        super().__init__()
        self.stages = []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            self.stages.append((Linear(rng, n_in, n_out, gain=math.sqrt(2.0), bias=False),
                                BatchNorm(n_out), ReLU()))
        self.head = Linear(rng, dims[-1], head_dim) if head_dim is not None else None

    def forward(self, x: np.ndarray, train: bool = False,
                batch_stats: bool | None = None) -> np.ndarray:
        for lin, bn, relu in self.stages:
            x = relu.forward(bn.forward(lin.forward(x, train), train, batch_stats), train)
        if self.head is not None:
            x = self.head.forward(x, train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self.head is not None:
            grad = self.head.backward(grad)
        for lin, bn, relu in reversed(self.stages):
            grad = lin.backward(bn.backward(relu.backward(grad)))
        return grad

    def _sublayers(self):
        for idx, (lin, bn, _) in enumerate(self.stages):
            yield f"lin{idx}", lin
            yield f"bn{idx}", bn
        if self.head is not None:
            yield "head", self.head

    def params(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers() for k, v in sub.params().items()}

    def grads(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers() for k, v in sub.grads().items()}

    def state(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers() for k, v in sub.state().items()}

    def zero_grad(self):
        for _, sub in self._sublayers():
            sub.zero_grad()

    def clear_cache(self):
        for lin, bn, relu in self.stages:
            lin.clear_cache(); bn.clear_cache(); relu.clear_cache()
        if self.head is not None:
            self.head.clear_cache()


def one_cycle_lr(step: int, total_steps: int, peak: float,
                 div_start: float = 25.0, div_final: float = 1e4) -> float:
    """One-cycle schedule: linear warmup to the peak at mid-cycle, cosine
    anneal down afterwards."""
    if total_steps <= 1:
        return peak
    t = step / (total_steps - 1)
    lr_start = peak / div_start
    lr_final = peak / div_final
    if t <= 0.5:
        return lr_start + (peak - lr_start) * (t / 0.5)
    u = (t - 0.5) / 0.5
    return lr_final + (peak - lr_final) * 0.5 * (1.0 + math.cos(math.pi * u))


class Adam:
    """Adaptive-moment optimizer over a named parameter dict (in-place updates)."""

    def __init__(self, params: dict[str, np.ndarray],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, param in self.params.items():
            g = grads[key]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {key!r}")
            m = self.m[key]
            v = self.v[key]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            param -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key in self.m:
            self.m[key][...] = arrays[f"m.{key}"]
            self.v[key][...] = arrays[f"v.{key}"]


CHECKPOINT_VERSION = 1


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned npz container of named float64 tensors plus a JSON meta blob."""
    payload = {f"t.{k}": np.asarray(v) for k, v in arrays.items()}
    meta = dict(meta)
    meta["checkpoint_version"] = CHECKPOINT_VERSION
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise NumericError(f"unsupported checkpoint version in {path}")
        arrays = {k[2:]: data[k].copy() for k in data.files if k.startswith("t.")}
    return arrays, meta


def gradient_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   h: float = 1e-5, max_entries: int = 0) -> float:
    """Max relative error between analytic grads and central finite differences.

    ``loss_fn`` recomputes the scalar loss from the current parameter values.
    ``max_entries`` > 0 subsamples each tensor deterministically for speed.
    """
    worst = 0.0
    for key, param in params.items():
        flat = param.reshape(-1)
        gflat = grads[key].reshape(-1)
        idxs = range(flat.size)
        if max_entries and flat.size > max_entries:
            idxs = np.linspace(0, flat.size - 1, max_entries).astype(int)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(gflat[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
