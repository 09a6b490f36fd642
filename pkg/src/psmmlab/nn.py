"""Parameter registry and the ResNet building blocks used by both networks."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParameterStore:
    """Named registry of trainable tensors and non-trainable buffers.

    Names are unique across parameters and buffers; insertion order is the
    canonical order used by the optimizer and the checkpoint writer.
    """

    def __init__(self, rng: np.random.Generator | None = None):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def _check_free(self, name):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        self._check_free(name)
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._check_free(name)
        buf = np.array(value, dtype=T.DTYPE)
        self.buffers[name] = buf
        return buf

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith(prefix))

    def state(self) -> OrderedDict[str, np.ndarray]:
        out = OrderedDict((n, p.data) for n, p in self.params.items())
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True):
        names = set(self.params) | set(self.buffers)
        if strict and set(state) != names:
            missing = sorted(names - set(state))
            extra = sorted(set(state) - names)
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            target = self.params[name].data if name in self.params else self.buffers.get(name)
            if target is None:
                continue
            if target.shape != np.shape(value):
                raise ValueError(f"{name}: shape {np.shape(value)} != {target.shape}")
            target[...] = value

    def snapshot_buffers(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.buffers.items()}

    def restore_buffers(self, snap: dict[str, np.ndarray]):
        for k, v in snap.items():
            self.buffers[k][...] = v


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d:
    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, k: int, stride=1, pad=0):
        self.weight = store.add_param(f"{name}.weight", he_normal(store.rng, (cout, cin, k, k), cin * k * k))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.pad)


class BatchNorm2d:
    def __init__(self, store: ParameterStore, name: str, c: int, eps=1e-5, momentum=0.9):
        self.gamma = store.add_param(f"{name}.gamma", np.ones(c))
        self.beta = store.add_param(f"{name}.beta", np.zeros(c))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(c))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(c))
        self.eps, self.momentum = eps, momentum

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps, train, self.momentum
        )


class ConvNorm:
    """conv -> (batch norm); the norm is skipped when ``norm == "none"``."""

    def __init__(self, store, name, cin, cout, k, stride, pad, norm="batch"):
        self.conv = Conv2d(store, f"{name}.conv", cin, cout, k, stride, pad)
        self.bn = BatchNorm2d(store, f"{name}.bn", cout) if norm == "batch" else None

    def __call__(self, x, train):
        y = self.conv(x)
        return self.bn(y, train) if self.bn is not None else y


class BasicBlock:
    """Two 3x3 conv-norm layers with an identity or 1x1 projection shortcut."""

    def __init__(self, store, name, cin, cout, stride, norm="batch"):
        self.a = ConvNorm(store, f"{name}.a", cin, cout, 3, stride, 1, norm)
        self.b = ConvNorm(store, f"{name}.b", cout, cout, 3, 1, 1, norm)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = ConvNorm(store, f"{name}.proj", cin, cout, 1, stride, 0, norm)

    def __call__(self, x, train):
        h = T.relu(self.a(x, train))
        h = self.b(h, train)
        shortcut = self.proj(x, train) if self.proj is not None else x
        return T.relu(T.residual_add(h, shortcut))


class Stage:
    """A run of basic blocks; the first one carries the stride."""

    def __init__(self, store, name, cin, cout, stride, blocks, norm="batch"):
        self.blocks = [
            BasicBlock(store, f"{name}.block{i}", cin if i == 0 else cout, cout, stride if i == 0 else 1, norm)
            for i in range(blocks)
        ]

    def __call__(self, x, train):
        for blk in self.blocks:
            x = blk(x, train)
        return x


class Stem:
    """Input conv + norm + relu + max pool."""

    def __init__(self, store, name, cin, cout, k, stride, pool, norm="batch"):
        self.cn = ConvNorm(store, name, cin, cout, k, stride, k // 2, norm)
        self.pool = pool  # (kernel, stride, pad) or None

    def __call__(self, x, train):
        h = T.relu(self.cn(x, train))
        if self.pool is not None:
            h = T.max_pool2d(h, *self.pool)
        return h


class Dense:
    def __init__(self, store, name, fin, fout):
        self.weight = store.add_param(f"{name}.weight", store.rng.normal(0.0, np.sqrt(1.0 / fin), (fin, fout)))
        self.bias = store.add_param(f"{name}.bias", np.zeros(fout))

    def __call__(self, x):
        return T.dense(x, self.weight, self.bias)


@dataclass(frozen=True)
class BackboneSpec:
    """Layer table of one ResNet-style trunk."""

    in_channels: int
    input_size: int
    stem_kernel: int
    stem_stride: int
    pool: tuple[int, int, int] | None
    widths: tuple[int, int, int, int]
    blocks: int

    def level_sizes(self) -> list[int]:
        def ext(s, k, st, p):
            return (s + 2 * p - k) // st + 1

        s = ext(self.input_size, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        if self.pool is not None:
            s = ext(s, *self.pool)
        sizes = [s]
        for _ in range(3):
            s = ext(s, 3, 2, 1)
            sizes.append(s)
        return sizes


PRESETS = {
    "resnet18": BackboneSpec(3, 112, 7, 2, (3, 2, 1), (64, 128, 256, 512), 2),
    "toy": BackboneSpec(3, 32, 3, 1, (3, 2, 1), (4, 8, 8, 16), 1),
}
