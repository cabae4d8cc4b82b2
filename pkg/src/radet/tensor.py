"""Dense-tensor engine with reverse-mode automatic differentiation.

The engine supports exactly the operations the detector graph needs:
convolution, leaky-relu, sigmoid, nearest 2x upsampling, channel
concat/tile/slice, elementwise arithmetic, reductions and a fused
binary-cross-entropy-with-logits.  Recording happens only inside an
active :class:`Tape` context; outside of one every op is a pure
numpy computation, which is what inference uses.

Data is float32 by default.  Gradient-check suites run the same ops on
float64 tensors, where all convolution reductions accumulate at 64-bit.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ShapeError, TapeError

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional array with optional gradient buffer.

    Image tensors follow the (batch, channels, height, width) layout.
    ``grad`` is lazily allocated during backward and always matches the
    data shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class Tape:
    """Ordered record of executed operations for one forward pass.

    Backward replays the record in exact reverse execution order.  A tape
    is single-shot: replaying backward twice without a fresh forward is a
    :class:`TapeError`.  Use as a context manager::

        with Tape() as tape:
            y = conv2d(x, w, b)
            loss = reduce_sum(y)
            tape.backward(loss)
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, list[tuple[Tensor, Callable]]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def _record(self, out: Tensor, pairs: list) -> None:
        self._nodes.append((out, pairs))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward was already replayed on this tape; run a new forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, pairs in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for inp, grad_fn in pairs:
                contrib = grad_fn(g)
                if inp.grad is None:
                    inp.grad = contrib
                else:
                    inp.grad += contrib
        # Intermediates keep their grads only until the tape is dropped.
        self._nodes.clear()


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], grad_fns: Sequence[Callable | None]) -> Tensor:
    """Wrap an op result, recording backward closures on the active tape.

    ``grad_fns[i]`` maps the output gradient to input i's gradient and may
    be None for inputs that never need gradients (e.g. constants).
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        pairs = [
            (inp, fn)
            for inp, fn in zip(inputs, grad_fns)
            if inp.requires_grad and fn is not None
        ]
        tape._record(out, pairs)
    return out


# Optional multiply-add instrumentation, used by tests to cross-check the
# analytic FLOP counter against what conv2d actually executes.
_flop_probe: list | None = None


class flop_probe:
    """Context manager that counts conv2d FLOPs (2 per multiply-add)."""

    def __init__(self):
        self.flops = 0

    def __enter__(self):
        global _flop_probe
        self._prev = _flop_probe
        _flop_probe = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _flop_probe
        _flop_probe = self._prev

    def add(self, n: int) -> None:
        self.flops += n


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with square odd kernels.

    Input is [N, Cin, H, W], weight [Cout, Cin, k, k], bias [Cout].
    Output spatial size is floor((H + 2*padding - k)/stride) + 1.

    Internally image columns live in [Cin*k*k, N*Ho*Wo] order so both the
    forward product and the backward column gradient come straight out of
    a GEMM without any transposed copies; k=1 skips the column build
    entirely.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be [Cout,Cin,k,k] with square kernel, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, _ = weight.shape
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got k={k}")
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input shape {x.shape} vs weight shape {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match Cout={cout}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride>=1 and padding>=0, got stride={stride}, padding={padding}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d input {x.shape} too small for k={k} with padding={padding}")

    xd = x.data
    if padding > 0:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    m = n * ho * wo
    w2 = weight.data.reshape(cout, cin * k * k)

    if k == 1 and stride == 1:
        cm = xd.transpose(1, 0, 2, 3).reshape(cin, m) if n > 1 else xd.reshape(cin, m)
    else:
        cols = np.empty((n, cin, k, k, ho, wo), dtype=xd.dtype)
        for di in range(k):
            for dj in range(k):
                cols[:, :, di, dj] = xd[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
        if n > 1:
            cols = cols.transpose(1, 2, 3, 0, 4, 5)
        cm = np.ascontiguousarray(cols).reshape(cin * k * k, m)
    out = w2 @ cm
    out += bias.data[:, None]
    if n > 1:
        out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    else:
        out = out.reshape(1, cout, ho, wo)

    if _flop_probe is not None:
        _flop_probe.add(2 * m * cin * k * k * cout)

    def _flat_grad(g: np.ndarray) -> np.ndarray:
        if n > 1:
            return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, m)
        return g.reshape(cout, m)

    def grad_x(g: np.ndarray) -> np.ndarray:
        gf = _flat_grad(g)
        gcm = w2.T @ gf  # [Cin*k*k, M]
        if k == 1 and stride == 1:
            gx = gcm.reshape(cin, n, ho, wo).transpose(1, 0, 2, 3) if n > 1 else gcm.reshape(1, cin, ho, wo)
            return np.ascontiguousarray(gx)
        gcols = gcm.reshape(cin, k, k, n, ho, wo) if n > 1 else gcm.reshape(cin, k, k, ho, wo)
        gx = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        for di in range(k):
            for dj in range(k):
                sl = gx[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
                if n > 1:
                    sl += gcols[:, di, dj].transpose(1, 0, 2, 3)
                else:
                    sl += gcols[:, di, dj][None]
        if padding > 0:
            gx = np.ascontiguousarray(gx[:, :, padding : padding + h, padding : padding + w])
        return gx

    def grad_w(g: np.ndarray) -> np.ndarray:
        return (_flat_grad(g) @ cm.T).reshape(weight.shape)

    def grad_b(g: np.ndarray) -> np.ndarray:
        return g.sum(axis=(0, 2, 3))

    return _finish(out, (x, weight, bias), (grad_x, grad_w, grad_b))


def space_to_depth(x: Tensor, block: int) -> Tensor:
    """Move each block x block spatial tile into channels.

    [N, C, H, W] -> [N, C*block*block, H/block, W/block]; a pure
    permutation, so backward is the inverse permutation.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"space_to_depth input must be 4-D, got shape {x.shape}")
    if block < 2:
        raise ShapeError(f"space_to_depth block must be >= 2, got {block}")
    n, c, h, w = x.shape
    if h % block or w % block:
        raise ShapeError(f"spatial size {h}x{w} not divisible by block {block}")
    hb, wb = h // block, w // block
    out = np.ascontiguousarray(
        x.data.reshape(n, c, hb, block, wb, block).transpose(0, 1, 3, 5, 2, 4)
    ).reshape(n, c * block * block, hb, wb)

    def grad_x(g):
        return np.ascontiguousarray(
            g.reshape(n, c, block, block, hb, wb).transpose(0, 1, 4, 2, 5, 3)
        ).reshape(n, c, h, w)

    return _finish(out, (x,), (grad_x,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """Elementwise max(x, slope*x); subgradient at 0 is slope."""
    if not 0.0 < slope < 1.0:
        raise ShapeError(f"leaky_relu slope must be in (0,1), got {slope}")
    gate = np.where(x.data > 0, x.dtype.type(1.0), x.dtype.type(slope))
    out = x.data * gate

    def grad_x(g):
        return g * gate

    return _finish(out, (x,), (grad_x,))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_x(g):
        return g * out * (1.0 - out)

    return _finish(out, (x,), (grad_x,))


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Duplicate each pixel into a 2x2 block; backward sums the block."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_x(g):
        return g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    return _finish(out, (x,), (grad_x,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate channels of two [N,C,H,W] tensors."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels needs 4-D inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def grad_a(g):
        return np.ascontiguousarray(g[:, :ca])

    def grad_b(g):
        return np.ascontiguousarray(g[:, ca:])

    return _finish(out, (a, b), (grad_a, grad_b))


def tile_channels(x: Tensor, repeat: int) -> Tensor:
    """Repeat the channel block ``repeat`` times; backward sums repeats."""
    if x.data.ndim != 4:
        raise ShapeError(f"tile_channels input must be 4-D, got shape {x.shape}")
    if repeat < 1:
        raise ShapeError(f"tile_channels repeat must be >= 1, got {repeat}")
    n, c, h, w = x.shape
    out = np.tile(x.data, (1, repeat, 1, 1))

    def grad_x(g):
        return g.reshape(n, repeat, c, h, w).sum(axis=1)

    return _finish(out, (x,), (grad_x,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _finish(a.data + b.data, (a, b), (lambda g: g.copy(), lambda g: g.copy()))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _finish(a.data - b.data, (a, b), (lambda g: g.copy(), lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _finish(a.data * b.data, (a, b), (lambda g: g * b.data, lambda g: g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish(x.data * c, (x,), (lambda g: g * c,))


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def grad_x(g):
        return np.full_like(x.data, float(g))

    return _finish(out, (x,), (grad_x,))


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def grad_x(g):
        return np.full_like(x.data, float(g) / n)

    return _finish(out, (x,), (grad_x,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} (size {x.data.size}) to {shape}")
    return _finish(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis; backward scatters."""
    extent = x.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {axis} of shape {x.shape}")
    idx = tuple(slice(None) if d != axis else slice(start, stop) for d in range(x.data.ndim))
    out = np.ascontiguousarray(x.data[idx])

    def grad_x(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return gx

    return _finish(out, (x,), (grad_x,))


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise stable binary cross-entropy on raw logits.

    Forward uses max(x,0) - x*t + log(1 + exp(-|x|)); the logit gradient
    is sigmoid(x) - t.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: {logits.shape} vs {targets.shape}")
    x = logits.data
    t = targets.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def grad_logits(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return g * (sig - t)

    def grad_targets(g):
        return g * (-x)

    return _finish(out, (logits, targets), (grad_logits, grad_targets))


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain SGD: p <- p - lr * grad for params with a populated gradient.

    Gradients are cleared afterwards; params without a gradient are left
    bitwise untouched.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        if p.grad is not None:
            p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)
            p.grad = None


# --- weight checkpoint container ------------------------------------------
#
# Flat binary layout (little endian throughout), documented in
# docs/formats.md: magic "RAYW1", then per-parameter records until EOF:
#   u16  name length in bytes
#   ...  UTF-8 name
#   u8   shape rank
#   u64  extent per dimension
#   f32  values in row-major order

CHECKPOINT_MAGIC = b"RAYW1"


def save_weights(path, params: Mapping[str, "Tensor | np.ndarray"]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        out[name] = arr.astype(np.float32)
    return out
