"""Named parameter storage, SGD with momentum, and the binary checkpoint format.

Checkpoint layout (all integers little-endian uint32)::

    b"CUN1"
    entry count
    per entry: name length, UTF-8 name, ndim, ndim extents
    per entry, in manifest order: raw little-endian float64 values (C order)

Momentum buffers are stored as extra entries named ``<param>@momentum``.
"""

import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np

from .errors import ContractViolation, FormatError, NumericError
from .tensor import Tensor

MAGIC = b"CUN1"
_MOMENTUM_SUFFIX = "@momentum"


class ParamSet:
    """Ordered named parameters with one momentum buffer each."""

    def __init__(self):
        self._params = OrderedDict()
        self.momentum = {}

    def add(self, name, value):
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self.momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def count(self):
        """Total number of scalar parameters."""
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state(self, include_momentum=True):
        """Name -> array copy, in registration order."""
        out = OrderedDict((n, t.data.copy()) for n, t in self._params.items())
        if include_momentum:
            for n in self._params:
                out[n + _MOMENTUM_SUFFIX] = self.momentum[n].copy()
        return out

    def load_state(self, state):
        for name, t in self._params.items():
            if name not in state:
                raise ContractViolation(f"state is missing parameter {name!r}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.data.shape:
                raise ContractViolation(f"{name}: shape {value.shape} does not match {t.data.shape}")
            t.data = value.copy()
            mom = state.get(name + _MOMENTUM_SUFFIX)
            self.momentum[name] = np.zeros_like(t.data) if mom is None else np.array(mom, dtype=np.float64)


def sgd_momentum_step(params, lr, momentum, weight_decay):
    """Classical momentum with L2 coupled into the gradient.

    v <- momentum * v + grad + weight_decay * theta
    theta <- theta - lr * v
    """
    for name, t in params:
        if t.grad is None:
            raise ContractViolation(f"parameter {name!r} has no gradient")
        v = params.momentum[name]
        v *= momentum
        v += t.grad
        if weight_decay:
            v += weight_decay * t.data
        with np.errstate(over="ignore", invalid="ignore"):
            t.data -= lr * v
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"parameter {name!r} became non-finite")
    return params


def save_checkpoint(path, params, include_momentum=True):
    """Write ``params`` atomically in the CUN1 format."""
    write_arrays(path, params.state(include_momentum))


def load_checkpoint(path, params=None):
    """Read a CUN1 file. Loads into ``params`` when given; always returns the name -> array map."""
    state = read_arrays(path)
    if params is not None:
        params.load_state(state)
    return state


def write_arrays(path, arrays):
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
    for a in arrays.values():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    _atomic_write(path, b"".join(parts))


def read_arrays(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = 4
    (count,), pos = _unpack("<I", buf, pos)
    manifest = []
    for _ in range(count):
        (n,), pos = _unpack("<I", buf, pos)
        if pos + n > len(buf):
            raise FormatError("truncated parameter name", pos)
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,), pos = _unpack("<I", buf, pos)
        shape, pos = _unpack(f"<{ndim}I", buf, pos)
        manifest.append((name, tuple(shape)))
    out = OrderedDict()
    for name, shape in manifest:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated payload for {name!r}", pos)
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after payload", pos)
    return out


def _unpack(fmt, buf, pos):
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise FormatError("truncated header", pos)
    return struct.unpack_from(fmt, buf, pos), pos + size


def _atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
