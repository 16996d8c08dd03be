"""Dense-tensor reverse-mode differentiation on numpy arrays.

Define-by-run: while a Tape is active, every op appends its backward closure
in execution order; backward() replays them reversed, accumulating vector-
Jacobian products into `.grad`.  A tape is single-use.  Without an active
tape the ops are plain numpy (inference mode).
"""

import struct

import numpy as np

from mfeit.errors import DataFormatError
from mfeit.ioutil import fnv1a64

CHECKPOINT_MAGIC = b"MFEITW01"

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of executed operations, replayed in reverse."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def active_tape():
    return _ACTIVE_TAPE


class Tensor:
    """Value plus accumulated gradient; data is always a numpy array."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.grad is not None})"


class Parameter(Tensor):
    """Named leaf tensor; gradient is pre-allocated and zeroed between steps."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name, trainable=True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.trainable = trainable
        self.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out_data, vjps):
    """Create an op output and register its backward closure.

    vjps is a list of (input tensor, fn(upstream_grad) -> grad contribution);
    entries for inputs that do not require gradients are skipped.  This is
    the extension point for fused ops defined outside this module.
    """
    tape = _ACTIVE_TAPE
    live = [(t, fn) for t, fn in vjps if t.requires_grad]
    out = Tensor(out_data, requires_grad=bool(live) and tape is not None)
    if out.requires_grad:

        def backward():
            g = out.grad
            if g is None:
                return
            for t, fn in live:
                t._accumulate(fn(g))

        tape.records.append(backward)
    return out


def backward(tape, loss):
    """Run reverse-mode accumulation from a scalar loss over a single-use tape."""
    if tape.consumed:
        raise RuntimeError("tape has already been used for a backward pass")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for record in reversed(tape.records):
        record()


def _unbroadcast(g, shape):
    """Sum-reduce an upstream gradient onto a broadcast operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def neg(a):
    a = as_tensor(a)
    return make_op(-a.data, [(a, lambda g: -g)])


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    return make_op(s * a.data, [(a, lambda g: s * g)])


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    return make_op(
        a.data @ b.data,
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
    )


def bmm(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[2] != b.data.shape[1]
    ):
        raise ValueError(f"bmm shapes {a.data.shape} x {b.data.shape}")
    return make_op(
        a.data @ b.data,
        [
            (a, lambda g: g @ b.data.transpose(0, 2, 1)),
            (b, lambda g: a.data.transpose(0, 2, 1) @ g),
        ],
    )


def transpose_last(a):
    a = as_tensor(a)
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return make_op(
        a.data.transpose(axes), [(a, lambda g: g.transpose(axes))]
    )


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return make_op(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def taker(i):
        sl = [slice(None)] * tensors[0].data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        return lambda g: g[tuple(sl)]

    return make_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        [(t, taker(i)) for i, t in enumerate(tensors)],
    )


def narrow(a, axis, start, length):
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def back(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return out

    return make_op(a.data[sl].copy(), [(a, back)])


def sum_all(a):
    a = as_tensor(a)
    return make_op(
        np.array(a.data.sum()), [(a, lambda g: np.broadcast_to(g, a.data.shape))]
    )


# ---------------------------------------------------------------------------
# activations


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return make_op(np.where(pos, a.data, 0.0), [(a, lambda g: g * pos)])


def elu(a, alpha=1.0):
    a = as_tensor(a)
    pos = a.data > 0
    neg_part = alpha * np.expm1(a.data)
    out = np.where(pos, a.data, neg_part)
    deriv = np.where(pos, 1.0, neg_part + alpha)
    return make_op(out, [(a, lambda g: g * deriv)])


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make_op(out, [(a, lambda g: g * out * (1.0 - out))])


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, [(a, lambda g: g * (1.0 - out * out))])


def softplus(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return make_op(out, [(a, lambda g: g * sig)])


def softplus_inverse(y):
    """Raw value whose softplus is y (y > 0); plain float helper."""
    y = float(y)
    if y <= 0:
        raise ValueError("softplus inverse needs a positive value")
    return y + np.log(-np.expm1(-y))


def softmax_rows(a):
    """Softmax along the last axis with max-shift stabilization; rows of a
    P x P map (or each batched row) sum to one."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return make_op(out, [(a, back)])


# ---------------------------------------------------------------------------
# convolutions


def _conv_out_size(H, W, kh, kw, stride, padding):
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(
            f"kernel {kh}x{kw} stride {stride} does not fit input {H}x{W} "
            f"with padding {padding}"
        )
    return Ho, Wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation: x (N,C,H,W) with kernel w (O,C,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    N, C, H, W = x.data.shape
    O, C2, kh, kw = w.data.shape
    if C != C2:
        raise ValueError(f"conv2d channels: input has {C}, kernel expects {C2}")
    Ho, Wo = _conv_out_size(H, W, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((N, O, Ho, Wo))
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride]
            out += np.tensordot(xs, w.data[:, :, di, dj], axes=([1], [1])).transpose(
                0, 3, 1, 2
            )

    def back_x(g):
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                contrib = np.tensordot(
                    g, w.data[:, :, di, dj], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
                gxp[
                    :, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride
                ] += contrib
        if padding:
            return gxp[:, :, padding:-padding, padding:-padding]
        return gxp

    def back_w(g):
        gw = np.zeros_like(w.data)
        for di in range(kh):
            for dj in range(kw):
                xs = xp[
                    :, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride
                ]
                gw[:, :, di, dj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
        return gw

    vjps = [(x, back_x), (w, back_w)]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        vjps.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return make_op(out, vjps)


def conv_transpose2d(x, w, b=None, stride=2):
    """Adjoint of conv2d (no padding): x (N,Ci,H,W), kernel w (Ci,Co,kh,kw),
    output (N,Co,(H-1)s+kh,(W-1)s+kw)."""
    x, w = as_tensor(x), as_tensor(w)
    N, Ci, H, W = x.data.shape
    Ci2, Co, kh, kw = w.data.shape
    if Ci != Ci2:
        raise ValueError(
            f"conv_transpose2d channels: input has {Ci}, kernel expects {Ci2}"
        )
    Ho = (H - 1) * stride + kh
    Wo = (W - 1) * stride + kw
    out = np.zeros((N, Co, Ho, Wo))
    for di in range(kh):
        for dj in range(kw):
            contrib = np.tensordot(x.data, w.data[:, :, di, dj], axes=([1], [0]))
            out[
                :, :, di : di + stride * H : stride, dj : dj + stride * W : stride
            ] += contrib.transpose(0, 3, 1, 2)

    def back_x(g):
        gx = np.zeros_like(x.data)
        for di in range(kh):
            for dj in range(kw):
                gs = g[:, :, di : di + stride * H : stride, dj : dj + stride * W : stride]
                gx += np.tensordot(gs, w.data[:, :, di, dj], axes=([1], [1])).transpose(
                    0, 3, 1, 2
                )
        return gx

    def back_w(g):
        gw = np.zeros_like(w.data)
        for di in range(kh):
            for dj in range(kw):
                gs = g[:, :, di : di + stride * H : stride, dj : dj + stride * W : stride]
                gw[:, :, di, dj] = np.tensordot(
                    x.data, gs, axes=([0, 2, 3], [0, 2, 3])
                )
        return gw

    vjps = [(x, back_x), (w, back_w)]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        vjps.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return make_op(out, vjps)


def batchnorm2d(x, gamma, beta, running_mean, running_var, mode, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    buffers in place (side effect on their .data, never taped); eval mode
    applies the frozen running statistics.
    """
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d expects N,C,H,W, got {x.data.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    axes = (0, 2, 3)
    if mode == "train":
        if x.data.shape[0] == 0:
            raise ValueError("batchnorm2d cannot train on an empty batch")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mean
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * var
    else:
        mean = running_mean.data
        var = running_var.data
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back_x(g):
        gs = g * gamma.data[None, :, None, None]
        if mode == "eval":
            return gs * inv[None, :, None, None]
        gmean = gs.mean(axis=axes)
        gdot = (gs * xhat).mean(axis=axes)
        return inv[None, :, None, None] * (
            gs - gmean[None, :, None, None] - xhat * gdot[None, :, None, None]
        )

    vjps = [
        (x, back_x),
        (gamma, lambda g: (g * xhat).sum(axis=axes)),
        (beta, lambda g: g.sum(axis=axes)),
    ]
    return make_op(out, vjps)


# ---------------------------------------------------------------------------
# structured gather/scatter used to move between masked vectors and grids


def scatter_rows(x, index, n_rows):
    """x (k, B) -> out (n_rows, B) with out[index[i]] = x[i]; indices unique."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def forward(data):
        out = np.zeros((n_rows,) + data.shape[1:], dtype=data.dtype)
        out[index] = data
        return out

    return make_op(forward(x.data), [(x, lambda g: g[index])])


def gather_rows(x, index):
    """out[i] = x[index[i]]; indices unique."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.data.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return out

    return make_op(x.data[index].copy(), [(x, back)])


# ---------------------------------------------------------------------------
# loss


def mse_loss(pred, target, n_samples=None):
    """Summed squared error divided by the sample count (mean over samples,
    sum over elements); n_samples defaults to the leading dimension."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"mse_loss shapes differ: {pred.data.shape} vs {target.data.shape}"
        )
    if n_samples is None:
        n_samples = pred.data.shape[0] if pred.data.ndim else 1
    n_samples = float(n_samples)
    diff = pred.data - target.data
    loss = np.array((diff * diff).sum() / n_samples)
    return make_op(
        loss,
        [
            (pred, lambda g: (2.0 / n_samples) * diff * g),
            (target, lambda g: (-2.0 / n_samples) * diff * g),
        ],
    )


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Standard Adam with bias correction; gradients are cleared after each
    step and the step counter always advances."""

    def __init__(self, lr=1e-3, beta_m1=0.9, beta_m2=0.999, eps_adam=1e-8):
        self.lr = lr
        self.beta_m1 = beta_m1
        self.beta_m2 = beta_m2
        self.eps_adam = eps_adam
        self.step_count = 0
        self.m = {}
        self.v = {}


def adam_step(params, state):
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta_m1, state.beta_m2
    for p in params:
        if not getattr(p, "trainable", True):
            p.zero_grad()
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps_adam)
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(path, params):
    """params: mapping name -> Parameter (or Tensor); float32 payload."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", len(params))
    for name in params:
        tensor = params[name]
        encoded = name.encode("utf-8")
        data = np.asarray(tensor.data, dtype="<f4")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", data.ndim)
        for dim in data.shape:
            blob += struct.pack("<I", dim)
        blob += data.tobytes()
    blob += struct.pack("<Q", fnv1a64(blob))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    """Returns an ordered dict name -> float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic", offset=0)
    if len(raw) < 20:
        raise DataFormatError(f"{path}: truncated checkpoint", offset=len(raw))
    stored = struct.unpack("<Q", raw[-8:])[0]
    if stored != fnv1a64(raw[:-8]):
        raise DataFormatError(f"{path}: checksum mismatch", offset=len(raw) - 8)
    count = struct.unpack_from("<I", raw, 8)[0]
    pos = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=pos)
        pos += 4 * size
        out[name] = data.reshape(dims).astype(float)
    if pos != len(raw) - 8:
        raise DataFormatError(f"{path}: trailing bytes in checkpoint", offset=pos)
    return out
