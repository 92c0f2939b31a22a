"""Dense float tensors with an explicit reverse-mode gradient tape.

Every operation appends a record to the active tape at creation time, so
recording order is already a topological order of the graph. ``backward``
replays the records strictly in reverse, accumulating gradients additively
into a map keyed by node id, and consumes the tape. Tensors wrap a numpy
array; ops treat their inputs as immutable (parameter updates go through
``Tensor.assign`` between tapes).

Precision: new tensors take the process-wide default dtype (float32 unless
switched to float64 via ``set_default_dtype`` / the ``precision`` context
manager). Tensors created before a switch keep their dtype.
"""

from __future__ import annotations

import itertools
import warnings

import numpy as np

from ..errors import ContractError, ConfigurationError, NumericError

_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = {
    "dtype": np.float32,
    "grad_enabled": True,
    "check_finite": False,
}

_node_ids = itertools.count()


def default_dtype():
    """Dtype used for newly created tensors."""
    return _state["dtype"]


def set_default_dtype(name):
    """Switch the global default dtype ('float32' or 'float64')."""
    if name not in _DTYPES:
        raise ConfigurationError(f"unknown dtype {name!r}; expected 'float32' or 'float64'")
    _state["dtype"] = _DTYPES[name]


class precision:
    """Context manager that temporarily switches the default dtype."""

    def __init__(self, name):
        if name not in _DTYPES:
            raise ConfigurationError(f"unknown dtype {name!r}; expected 'float32' or 'float64'")
        self._name = name
        self._saved = None

    def __enter__(self):
        self._saved = _state["dtype"]
        _state["dtype"] = _DTYPES[self._name]
        return self

    def __exit__(self, *exc):
        _state["dtype"] = self._saved
        return False


def is_grad_enabled():
    return _state["grad_enabled"]


class no_grad:
    """Context manager: ops executed inside record nothing on the tape."""

    def __enter__(self):
        self._saved = _state["grad_enabled"]
        _state["grad_enabled"] = False
        return self

    def __exit__(self, *exc):
        _state["grad_enabled"] = self._saved
        return False


class check_finite:
    """Context manager enabling NaN/Inf validation of every op output."""

    def __init__(self, enabled=True):
        self._enabled = enabled

    def __enter__(self):
        self._saved = _state["check_finite"]
        _state["check_finite"] = self._enabled
        return self

    def __exit__(self, *exc):
        _state["check_finite"] = self._saved
        return False


class Tensor:
    """A numpy array plus grad-tracking metadata.

    ``requires_grad`` marks tensors that participate in differentiation; a
    tensor with ``requires_grad=False`` never receives a gradient slot.
    ``is_leaf`` is True for user-created tensors (parameters, inputs) and
    False for op outputs; ``backward`` returns gradients for leaves only.
    """

    __slots__ = ("data", "requires_grad", "node_id", "is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.is_leaf = True

    # -- properties -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ContractError(f"item() expects a single-element tensor, got shape {self.data.shape}")

    def detach(self):
        """A leaf copy sharing data, cut off from the graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.node_id = next(_node_ids)
        t.is_leaf = True
        return t

    def assign(self, new_data):
        """In-place parameter update; only valid on leaves, between tapes."""
        if not self.is_leaf:
            raise ContractError("assign() is only valid on leaf tensors")
        arr = np.asarray(new_data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ContractError(
                f"assign() shape mismatch: tensor {self.data.shape} vs value {arr.shape}")
        self.data = arr

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def __len__(self):
        return len(self.data)


def _op_output(data):
    """Tensor produced by an op: non-leaf, grad flag set by the recorder."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.node_id = next(_node_ids)
    t.is_leaf = False
    return t


class OpRecord:
    """One tape entry: inputs, output node ids, and a backward closure.

    ``backward`` receives one upstream gradient array (or None) per output
    and yields ``(input_tensor, grad_array)`` pairs with grad_array shaped
    exactly like the input.
    """

    __slots__ = ("name", "inputs", "output_ids", "backward")

    def __init__(self, name, inputs, output_ids, backward):
        self.name = name
        self.inputs = inputs
        self.output_ids = output_ids
        self.backward = backward


class Tape:
    """Ordered list of op records; recording order is topological order."""

    def __init__(self):
        self.records = []

    def record(self, rec):
        self.records.append(rec)

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_tape = Tape()


def get_tape():
    return _tape


def record_op(name, inputs, outputs, backward):
    """Register op outputs on the tape if grad is enabled and needed.

    Returns the outputs unchanged. When nothing requires grad (or grad is
    disabled) the op is not recorded and the outputs stay constant.
    """
    if _state["check_finite"]:
        for o in outputs:
            if not np.all(np.isfinite(o.data)):
                raise NumericError(f"non-finite values in output of op {name!r}")
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        for o in outputs:
            o.requires_grad = True
        _tape.record(OpRecord(name, tuple(inputs), tuple(o.node_id for o in outputs), backward))
    return outputs


def backward(loss, gradient=None):
    """Reverse-mode sweep from a scalar loss over the active tape.

    Returns ``{node_id: Tensor}`` holding the accumulated gradient for every
    requires_grad leaf reached by the sweep. The tape is consumed. A loss
    disconnected from any leaf yields an empty map and a warning.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads = {loss.node_id: (np.ones_like(loss.data) if gradient is None
                            else np.asarray(gradient, dtype=loss.data.dtype))}
    leaf_grads = {}
    if loss.is_leaf and loss.requires_grad:
        leaf_grads[loss.node_id] = grads[loss.node_id]
    for rec in reversed(_tape.records):
        gouts = [grads.pop(oid, None) for oid in rec.output_ids]
        if all(g is None for g in gouts):
            continue
        for tin, g in rec.backward(gouts):
            if not tin.requires_grad:
                continue
            if g.shape != tin.data.shape:
                raise ContractError(
                    f"op {rec.name!r} produced gradient of shape {g.shape} "
                    f"for input of shape {tin.data.shape}")
            acc = grads.get(tin.node_id)
            grads[tin.node_id] = g if acc is None else acc + g
            if tin.is_leaf:
                leaf_grads[tin.node_id] = grads[tin.node_id]
    _tape.clear()
    out = {nid: Tensor(arr, dtype=arr.dtype) for nid, arr in leaf_grads.items()}
    if not out:
        warnings.warn("backward: loss is not connected to any requires_grad leaf",
                      stacklevel=2)
    return out
