"""Parameter containers and the Adam optimizer.

Module is a minimal auto-registering container: any Tensor attribute is a
named tensor, any Module attribute is a submodule, and lists of either are
indexed. ``named_parameters`` yields only requires_grad tensors;
``named_tensors`` also yields frozen buffers (so checkpoints capture them).
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class Module:
    """Base class for parameterized components."""

    def named_tensors(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            yield from _walk(name, val)

    def named_parameters(self, prefix=""):
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state):
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ContractError(
                f"state dict mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ContractError(
                    f"state dict shape mismatch at {name!r}: {arr.shape} vs {t.data.shape}")
            t.assign(arr.astype(t.data.dtype))

    def num_parameters(self):
        return sum(t.size for t in self.parameters())


def _walk(name, val):
    if isinstance(val, Tensor):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_tensors(prefix=name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)


# -- parameter initializers ----------------------------------------------

def param(data):
    return Tensor(data, requires_grad=True)


def glorot(rng, fan_in, fan_out, shape=None):
    """Glorot-uniform weights; default shape (fan_in, fan_out)."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return param(rng.uniform(-limit, limit, size=shape))


def conv_init(rng, c_out, c_in, k):
    """He-style normal init for conv kernels (C_out, C_in, k, k)."""
    std = np.sqrt(2.0 / (c_in * k * k))
    return param(rng.normal(0.0, std, size=(c_out, c_in, k, k)))


def zeros_param(shape):
    return param(np.zeros(shape))


# -- optimizer ------------------------------------------------------------

class Adam:
    """Adam with global-norm gradient clipping.

    Holds (name, Tensor) pairs; ``step`` takes the gradient map returned by
    ``diffcore.backward`` and updates parameter data in place. Parameters
    with no gradient entry are left untouched that step.
    """

    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = list(named_params)
        if not self.params:
            raise ContractError("Adam received no parameters")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, grads):
        """grads: {node_id: Tensor} from diffcore.backward."""
        pairs = []
        sq = 0.0
        for name, p in self.params:
            g = grads.get(p.node_id)
            if g is None:
                continue
            garr = g.data
            sq += float((garr.astype(np.float64) ** 2).sum())
            pairs.append((name, p, garr))
        if not pairs:
            return 0.0
        gnorm = np.sqrt(sq)
        scale = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            scale = self.clip_norm / (gnorm + 1e-12)
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p, garr in pairs:
            g = garr * scale
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.assign(p.data - update)
        return gnorm

    def state_dict(self):
        state = {"t": self.t}
        for name in self.m:
            state[f"m.{name}"] = self.m[name].copy()
            state[f"v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for name in self.m:
            self.m[name] = np.asarray(state[f"m.{name}"])
            self.v[name] = np.asarray(state[f"v.{name}"])
