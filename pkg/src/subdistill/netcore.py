"""Minimal differentiable computation core.

Dense / ReLU / Conv2D / MaxPool2D / Dropout / Flatten layers stacked into a
Network whose head emits one logit per (class, subclass) pair.  Forward
returns the penultimate activations alongside the logits; backward produces
exact reverse-mode gradients for every parameter.

Conventions:
  - activations are numpy arrays, batch first; images are [n, h, w, ch]
  - float32 is the working precision, float64 is used by oracle tests
  - networks are immutable after construction except through an optimizer
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class NetcoreError(Exception):
    """Base class for computation-core failures."""


class ShapeMismatchError(NetcoreError):
    """Input shape incompatible with a layer, names the offending layer."""

    def __init__(self, layer_name, message):
        self.layer_name = layer_name
        self.message = message
        super().__init__(f"{layer_name}: {message}")


class CacheMismatchError(NetcoreError):
    """backward() called with state from a different forward pass."""


class CheckpointError(NetcoreError):
    """Malformed or truncated checkpoint file."""


def _as_dtype(x, dtype):
    x = np.asarray(x)
    return x if x.dtype == dtype else x.astype(dtype)


# ---------------------------------------------------------------------------
# Layers
#
# Each layer implements:
#   forward(x, rng) -> (y, cache)      cache holds what backward needs
#   backward(grad_y, cache) -> (grad_x, [param grads in params() order])
#   params() -> [(local name, array), ...]
# ---------------------------------------------------------------------------

class Dense:
    kind = "dense"

    def __init__(self, in_dim, out_dim, w=None, b=None, dtype=np.float32):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.w = _as_dtype(w, dtype) if w is not None else np.zeros((in_dim, out_dim), dtype)
        self.b = _as_dtype(b, dtype) if b is not None else np.zeros(out_dim, dtype)
        if self.w.shape != (self.in_dim, self.out_dim):
            raise ShapeMismatchError("dense", f"weight shape {self.w.shape} != ({in_dim}, {out_dim})")
        if self.b.shape != (self.out_dim,):
            raise ShapeMismatchError("dense", f"bias shape {self.b.shape} != ({out_dim},)")

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatchError(
                "dense", f"expected input [n, {self.in_dim}], got {x.shape}")
        return x @ self.w + self.b, x

    def backward(self, grad_y, cache):
        x = cache
        return grad_y @ self.w.T, [x.T @ grad_y, grad_y.sum(axis=0)]


class ReLU:
    kind = "relu"

    def params(self):
        return []

    def forward(self, x, rng=None):
        return np.maximum(x, 0), x

    def backward(self, grad_y, cache):
        return grad_y * (cache > 0), []


class Flatten:
    kind = "flatten"

    def params(self):
        return []

    def forward(self, x, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_y, cache):
        return grad_y.reshape(cache), []


class Dropout:
    """Inverted dropout: train-time scaling by 1/(1-rate), eval is identity."""

    kind = "dropout"

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def params(self):
        return []

    def forward(self, x, rng=None):
        if rng is None:  # eval mode
            return x, None
        keep = (rng.random(x.shape) >= self.rate)
        mask = keep.astype(x.dtype) / np.asarray(1.0 - self.rate, x.dtype)
        return x * mask, mask

    def backward(self, grad_y, cache):
        if cache is None:
            return grad_y, []
        return grad_y * cache, []


class Conv2D:
    """2-D convolution on [n, h, w, ch] input, via explicit patch extraction.

    padding is "same" (output spatial size ceil(in/stride)) or "valid".
    """

    kind = "conv2d"

    def __init__(self, kernel_h, kernel_w, in_ch, out_ch, stride=1,
                 padding="valid", w=None, b=None, dtype=np.float32):
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        self.kh, self.kw = int(kernel_h), int(kernel_w)
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.stride = int(stride)
        self.padding = padding
        wshape = (self.kh, self.kw, self.in_ch, self.out_ch)
        self.w = _as_dtype(w, dtype) if w is not None else np.zeros(wshape, dtype)
        self.b = _as_dtype(b, dtype) if b is not None else np.zeros(out_ch, dtype)
        if self.w.shape != wshape:
            raise ShapeMismatchError("conv2d", f"weight shape {self.w.shape} != {wshape}")

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def _geometry(self, h, w):
        if self.padding == "same":
            oh = -(-h // self.stride)
            ow = -(-w // self.stride)
            ph = max((oh - 1) * self.stride + self.kh - h, 0)
            pw = max((ow - 1) * self.stride + self.kw - w, 0)
        else:
            oh = (h - self.kh) // self.stride + 1
            ow = (w - self.kw) // self.stride + 1
            ph = pw = 0
        return oh, ow, ph, pw

    def forward(self, x, rng=None):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ShapeMismatchError(
                "conv2d", f"expected input [n, h, w, {self.in_ch}], got {x.shape}")
        n, h, w, _ = x.shape
        oh, ow, ph, pw = self._geometry(h, w)
        if oh < 1 or ow < 1:
            raise ShapeMismatchError("conv2d", f"kernel larger than input {x.shape}")
        if ph or pw:
            x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
        cols = np.empty((n, oh, ow, self.kh, self.kw, self.in_ch), x.dtype)
        s = self.stride
        for di in range(self.kh):
            for dj in range(self.kw):
                cols[:, :, :, di, dj, :] = x[:, di:di + oh * s:s, dj:dj + ow * s:s, :]
        flat = cols.reshape(n * oh * ow, self.kh * self.kw * self.in_ch)
        y = flat @ self.w.reshape(-1, self.out_ch) + self.b
        return y.reshape(n, oh, ow, self.out_ch), (flat, x.shape, (oh, ow, ph, pw))

    def backward(self, grad_y, cache):
        flat, padded_shape, (oh, ow, ph, pw) = cache
        n = grad_y.shape[0]
        g = grad_y.reshape(n * oh * ow, self.out_ch)
        grad_w = (flat.T @ g).reshape(self.w.shape)
        grad_b = g.sum(axis=0)
        gcols = (g @ self.w.reshape(-1, self.out_ch).T).reshape(
            n, oh, ow, self.kh, self.kw, self.in_ch)
        grad_x = np.zeros(padded_shape, grad_y.dtype)
        s = self.stride
        for di in range(self.kh):
            for dj in range(self.kw):
                grad_x[:, di:di + oh * s:s, dj:dj + ow * s:s, :] += gcols[:, :, :, di, dj, :]
        if ph or pw:
            grad_x = grad_x[:, ph // 2:padded_shape[1] - (ph - ph // 2),
                            pw // 2:padded_shape[2] - (pw - pw // 2), :]
        return grad_x, [grad_w, grad_b]


class MaxPool2D:
    """Max pooling on [n, h, w, ch]; gradient routes to the argmax position,
    ties to the lowest flat index inside the window."""

    kind = "maxpool2d"

    def __init__(self, kernel, stride):
        self.kernel = int(kernel)
        self.stride = int(stride)

    def params(self):
        return []

    def forward(self, x, rng=None):
        if x.ndim != 4:
            raise ShapeMismatchError("maxpool2d", f"expected input [n, h, w, ch], got {x.shape}")
        n, h, w, ch = x.shape
        k, s = self.kernel, self.stride
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatchError("maxpool2d", f"window larger than input {x.shape}")
        y = x[:, 0:oh * s:s, 0:ow * s:s, :].copy()
        for di in range(k):
            for dj in range(k):
                if di == 0 and dj == 0:
                    continue
                np.maximum(y, x[:, di:di + oh * s:s, dj:dj + ow * s:s, :], out=y)
        return y, (x, y, (oh, ow))

    def backward(self, grad_y, cache):
        x, y, (oh, ow) = cache
        grad_x = np.zeros(x.shape, grad_y.dtype)
        k, s = self.kernel, self.stride
        # visit window positions in row-major order with a claimed mask so
        # ties route to the lowest flat index only
        claimed = np.zeros(y.shape, dtype=bool)
        for di in range(k):
            for dj in range(k):
                sel = (x[:, di:di + oh * s:s, dj:dj + ow * s:s, :] == y) & ~claimed
                grad_x[:, di:di + oh * s:s, dj:dj + ow * s:s, :] += grad_y * sel
                claimed |= sel
        return grad_x, []


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

_PARAMETRIC = (Dense, Conv2D)


@dataclass
class ForwardState:
    """Caches from one train-mode forward pass, consumed by backward()."""

    net: "Network"
    caches: list
    head_cache: object
    batch: int


@dataclass
class ForwardResult:
    penultimate: np.ndarray
    logits: np.ndarray          # [n, c, s]
    state: ForwardState | None


@dataclass
class GradientSet:
    """One gradient array per trainable parameter, keyed like parameters()."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]


class Network:
    """Ordered layer stack plus a Dense head of width c*s.

    The head input is the penultimate activation vector; forward exposes it
    alongside the [n, c, s] logits.
    """

    def __init__(self, layers, head, c, s, dtype=np.float32):
        if head.out_dim != c * s:
            raise ShapeMismatchError("head", f"out_dim {head.out_dim} != c*s = {c * s}")
        self.layers = list(layers)
        self.head = head
        self.c = int(c)
        self.s = int(s)
        self.dtype = np.dtype(dtype)

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params():
                out.append((f"layers.{i}.{name}", arr))
        for name, arr in self.head.params():
            out.append((f"head.{name}", arr))
        return out

    def penultimate_dim(self):
        return self.head.in_dim


def forward(net, x, mode="eval", seed=0):
    """Run the network on a batch.

    mode "train" activates dropout (masks drawn from `seed`) and caches the
    state needed by backward(); "eval" is a pure function of (params, x).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _as_dtype(x, net.dtype)
    rng = np.random.Generator(np.random.PCG64(seed)) if mode == "train" else None
    caches = []
    for i, layer in enumerate(net.layers):
        try:
            x, cache = layer.forward(x, rng)
        except ShapeMismatchError as e:
            raise ShapeMismatchError(f"layers.{i}.{layer.kind}", e.message) from None
        caches.append(cache)
    penultimate = x
    try:
        logits_flat, head_cache = net.head.forward(x)
    except ShapeMismatchError as e:
        raise ShapeMismatchError("head", e.message) from None
    logits = logits_flat.reshape(x.shape[0], net.c, net.s)
    state = None
    if mode == "train":
        state = ForwardState(net=net, caches=caches, head_cache=head_cache,
                             batch=x.shape[0])
    return ForwardResult(penultimate=penultimate, logits=logits, state=state)


def backward(net, grad_logits, state, grad_penultimate=None):
    """Exact reverse-mode gradients of a scalar loss for every parameter.

    grad_logits is dLoss/dlogits, [n, c, s]; grad_penultimate optionally adds
    a direct loss term on the penultimate activations (penultimate-layer
    distillation).
    """
    if state is None or state.net is not net:
        raise CacheMismatchError("forward state does not belong to this network")
    if grad_logits.shape != (state.batch, net.c, net.s):
        raise CacheMismatchError(
            f"grad shape {grad_logits.shape} != ({state.batch}, {net.c}, {net.s})")
    grads = GradientSet()
    g = _as_dtype(grad_logits, net.dtype).reshape(state.batch, net.c * net.s)
    g, head_grads = net.head.backward(g, state.head_cache)
    for name, pg in zip(("w", "b"), head_grads):
        grads.tensors[f"head.{name}"] = pg
    if grad_penultimate is not None:
        g = g + _as_dtype(grad_penultimate, net.dtype)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g, layer_grads = layer.backward(g, state.caches[i])
        for (name, _), pg in zip(layer.params(), layer_grads):
            grads.tensors[f"layers.{i}.{name}"] = pg
    grads.tensors = {name: grads.tensors[name] for name, _ in net.parameters()}
    return grads


# ---------------------------------------------------------------------------
# Initialization and architectures
# ---------------------------------------------------------------------------

def _he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_network(arch, input_shape, c, s, seed=0, dtype=np.float32):
    """Construct a seeded He-initialized Network for a named architecture.

    arch is "mnist_conv" (the 28x28x1 convolutional stack), "mnist_mlp"
    (two 784-unit hidden layers), or "mlp:h1-h2-..." for a generic ReLU MLP
    on flattened input; an mlp token "dRATE" (e.g. "mlp:64-d0.5-32") inserts
    a dropout layer.  input_shape is the per-example shape.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    dtype = np.dtype(dtype)
    layers = []

    def dense(in_dim, out_dim):
        return Dense(in_dim, out_dim, w=_he_init(rng, (in_dim, out_dim), in_dim, dtype),
                     b=np.zeros(out_dim, dtype), dtype=dtype)

    if arch == "mnist_conv":
        if tuple(input_shape) != (28, 28, 1):
            raise ShapeMismatchError("mnist_conv", f"expects 28x28x1 input, got {input_shape}")
        conv1 = Conv2D(3, 3, 1, 32, stride=1, padding="same",
                       w=_he_init(rng, (3, 3, 1, 32), 9, dtype),
                       b=np.zeros(32, dtype), dtype=dtype)
        conv2 = Conv2D(2, 2, 32, 64, stride=1, padding="valid",
                       w=_he_init(rng, (2, 2, 32, 64), 2 * 2 * 32, dtype),
                       b=np.zeros(64, dtype), dtype=dtype)
        layers = [conv1, ReLU(), MaxPool2D(2, 2),
                  conv2, ReLU(), MaxPool2D(2, 2),
                  Dropout(0.5), Flatten(),
                  dense(6 * 6 * 64, 128), ReLU(), Dropout(0.5)]
        head_in = 128
    elif arch == "mnist_mlp" or arch.startswith("mlp:"):
        tokens = ["784", "784"] if arch == "mnist_mlp" else [
            tok for tok in arch[len("mlp:"):].split("-") if tok]
        if not any(not tok.startswith("d") for tok in tokens):
            raise ValueError(f"no hidden widths in architecture {arch!r}")
        in_dim = int(np.prod(input_shape))
        layers = [Flatten()]
        for tok in tokens:
            if tok.startswith("d"):
                layers.append(Dropout(float(tok[1:])))
            else:
                width = int(tok)
                layers += [dense(in_dim, width), ReLU()]
                in_dim = width
        head_in = in_dim
    else:
        raise ValueError(f"unknown architecture {arch!r}")

    head = Dense(head_in, c * s, w=_he_init(rng, (head_in, c * s), head_in, dtype),
                 b=np.zeros(c * s, dtype), dtype=dtype)
    return Network(layers, head, c, s, dtype=dtype)


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: dict[str, float]
    tolerance: float
    failing: list[str]

    @property
    def ok(self):
        return not self.failing


def finite_diff_check(net, loss_fn, x, tolerance=1e-4, step=1e-4,
                      max_entries_per_tensor=25, seed=0):
    """Compare backward() against central finite differences, per tensor.

    loss_fn(penultimate, logits) must return (value, grad_logits) or
    (value, grad_logits, grad_penultimate).  Intended for float64 networks;
    samples up to max_entries_per_tensor coordinates of each parameter.
    Runs in train mode with the dropout masks held fixed by `seed`.
    """
    if net.dtype != np.float64:
        raise ValueError("finite_diff_check requires a float64 network")

    def evaluate():
        res = forward(net, x, mode="train", seed=seed)
        out = loss_fn(res.penultimate, res.logits)
        value, grad_logits = out[0], out[1]
        grad_pen = out[2] if len(out) > 2 else None
        return value, grad_logits, grad_pen, res.state

    value, grad_logits, grad_pen, state = evaluate()
    analytic = backward(net, grad_logits, state, grad_penultimate=grad_pen)

    pick = np.random.Generator(np.random.PCG64(seed + 1))
    max_err = {}
    failing = []
    for name, param in net.parameters():
        n_entries = param.size
        if n_entries <= max_entries_per_tensor:
            idx = np.arange(n_entries)
        else:
            idx = pick.choice(n_entries, size=max_entries_per_tensor, replace=False)
        flat = param.reshape(-1)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            up = evaluate()[0]
            flat[j] = orig - step
            down = evaluate()[0]
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic[name].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
        max_err[name] = worst
        if worst > tolerance:
            failing.append(name)
    return FiniteDiffReport(max_rel_error=max_err, tolerance=tolerance, failing=failing)


# ---------------------------------------------------------------------------
# Checkpoint serialization
#
# Single binary file, little-endian:
#   magic "SKD1" | version u32 | layer count u32 (head included, last)
#   | c u32 | s u32 | dtype u8 (0 = float32, 1 = float64)
# then per layer: kind u8, kind-specific fields, parameter shape lists and
# raw values.  Round trip is bit-exact.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SKD1"
CHECKPOINT_VERSION = 1

_KIND_TAGS = {"dense": 1, "relu": 2, "conv2d": 3, "maxpool2d": 4,
              "dropout": 5, "flatten": 6}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _write_array(fh, arr):
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_array(fh, dtype, path):
    ndim = _read_struct(fh, "<B", path, "array ndim")[0]
    shape = _read_struct(fh, f"<{ndim}I", path, "array shape")
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise CheckpointError(f"{path}: truncated array at offset {fh.tell()}")
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)


def _read_struct(fh, fmt, path, what):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError(f"{path}: truncated reading {what} at offset {fh.tell()}")
    return struct.unpack(fmt, raw)


def save_checkpoint(net, path):
    records = net.layers + [net.head]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIIB", CHECKPOINT_VERSION, len(records),
                             net.c, net.s, _DTYPE_TAGS[net.dtype]))
        for layer in records:
            fh.write(struct.pack("<B", _KIND_TAGS[layer.kind]))
            if isinstance(layer, Dense):
                fh.write(struct.pack("<II", layer.in_dim, layer.out_dim))
                _write_array(fh, layer.w)
                _write_array(fh, layer.b)
            elif isinstance(layer, Conv2D):
                fh.write(struct.pack("<IIIIIB", layer.kh, layer.kw, layer.in_ch,
                                     layer.out_ch, layer.stride,
                                     1 if layer.padding == "same" else 0))
                _write_array(fh, layer.w)
                _write_array(fh, layer.b)
            elif isinstance(layer, MaxPool2D):
                fh.write(struct.pack("<II", layer.kernel, layer.stride))
            elif isinstance(layer, Dropout):
                fh.write(struct.pack("<d", layer.rate))
            # relu / flatten carry no fields


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: wrong magic {magic!r} at offset 0")
        version, count, c, s, dtag = _read_struct(fh, "<IIIIB", path, "header")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        if dtag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {dtag}")
        dtype = _TAG_DTYPES[dtag]
        records = []
        for _ in range(count):
            tag = _read_struct(fh, "<B", path, "layer kind")[0]
            if tag == _KIND_TAGS["dense"]:
                in_dim, out_dim = _read_struct(fh, "<II", path, "dense dims")
                w = _read_array(fh, dtype, path)
                b = _read_array(fh, dtype, path)
                records.append(Dense(in_dim, out_dim, w=w, b=b, dtype=dtype))
            elif tag == _KIND_TAGS["conv2d"]:
                kh, kw, in_ch, out_ch, stride, pad = _read_struct(
                    fh, "<IIIIIB", path, "conv dims")
                w = _read_array(fh, dtype, path)
                b = _read_array(fh, dtype, path)
                records.append(Conv2D(kh, kw, in_ch, out_ch, stride=stride,
                                      padding="same" if pad else "valid",
                                      w=w, b=b, dtype=dtype))
            elif tag == _KIND_TAGS["maxpool2d"]:
                kernel, stride = _read_struct(fh, "<II", path, "pool dims")
                records.append(MaxPool2D(kernel, stride))
            elif tag == _KIND_TAGS["dropout"]:
                records.append(Dropout(_read_struct(fh, "<d", path, "dropout rate")[0]))
            elif tag == _KIND_TAGS["relu"]:
                records.append(ReLU())
            elif tag == _KIND_TAGS["flatten"]:
                records.append(Flatten())
            else:
                raise CheckpointError(f"{path}: unknown layer tag {tag} at offset {fh.tell()}")
        extra = fh.read(1)
        if extra:
            raise CheckpointError(f"{path}: trailing bytes at offset {fh.tell() - 1}")
    if not records or not isinstance(records[-1], Dense):
        raise CheckpointError(f"{path}: final record must be the Dense head")
    return Network(records[:-1], records[-1], c, s, dtype=dtype)
