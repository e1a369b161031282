"""Dense tensors with reverse-mode autodiff, the handful of differentiable ops
the acoustic model needs, and a central-difference gradient checker.

Arrays are float32 by default; gradient checking requires float64 tensors.
All ops accept leading batch axes unless noted otherwise.
"""

import json
import math

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TensorFormatError(ValueError):
    """Raised when a serialized tensor cannot be decoded."""


def _check_finite(arr, op):
    # NaN/Inf both poison the sum, so one reduction covers the whole array.
    if arr.size and not math.isfinite(float(np.sum(arr))):
        raise FloatingPointError(f"{op}: result contains non-finite values")


class Tensor:
    """A numpy array plus an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        _check_finite(self.data, name or "tensor")
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()
        self.name = name

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor (seed defaults to ones)."""
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=self.dtype)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"

    # operator sugar; all defer to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass Tensor through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b):
    """Wrap non-Tensor operands at the Tensor operand's dtype (keeps float64
    graphs exact instead of mixing in float32-rounded constants)."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data, parents, backward, op):
    out = Tensor(data, dtype=data.dtype, name=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    y = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(y, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    y = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(y, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    y = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(y, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not align")
    y = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(y, (a, b), backward, "matmul")


def transpose_last(a) -> Tensor:
    a = as_tensor(a)
    y = a.data.swapaxes(-1, -2)

    def backward(g):
        a._accumulate(g.swapaxes(-1, -2))

    return _node(y, (a,), backward, "transpose_last")


def swap_axes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    y = a.data.swapaxes(ax1, ax2)

    def backward(g):
        a._accumulate(g.swapaxes(ax1, ax2))

    return _node(y, (a,), backward, "swap_axes")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    y = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(y, (a,), backward, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + w)
                t._accumulate(g[tuple(index)])
            offset += w

    return _node(y, tuple(tensors), backward, "concat")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _node(np.asarray(y, dtype=a.dtype), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _node(y, (a,), backward, "relu")


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; derivative is the sigmoid."""
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data).astype(a.dtype)

    def backward(g):
        a._accumulate(g / (1.0 + np.exp(-a.data)))

    return _node(y, (a,), backward, "softplus")


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to 1."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {tuple(a.shape)}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    return _node(y, (a,), backward, "softmax")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - y * gy))

    return _node(y, (a,), backward, "layer_norm")


def embedding(table, ids) -> Tensor:
    """Row lookup table[ids]; ids is an integer array (not differentiated)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}) in {ids.tolist()}"
        )
    y = table.data[ids]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _node(y, (table,), backward, "embedding")


def gather_time(a, idx) -> Tensor:
    """a: [B, T, d], idx: int [B, F] -> [B, F, d], rows gathered per batch."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    b_index = np.arange(a.shape[0])[:, None]
    y = a.data[b_index, idx]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (b_index, idx), g)

    return _node(y, (a,), backward, "gather_time")


def repeat_rows(a, durations) -> Tensor:
    """a: [T, d]; row i repeated durations[i] times. Output [sum(durations), d]."""
    a = as_tensor(a)
    durations = np.asarray(durations)
    if durations.shape != (a.shape[0],):
        raise ShapeError(
            f"repeat_rows: {len(durations)} durations for {a.shape[0]} rows"
        )
    if durations.min() < 1:
        raise ShapeError("repeat_rows: every duration must be >= 1")
    idx = np.repeat(np.arange(a.shape[0]), durations)
    y = a.data[idx]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _node(y, (a,), backward, "repeat_rows")


def dropout(a, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    y = a.data * keep

    def backward(g):
        a._accumulate(g * keep)

    return _node(y, (a,), backward, "dropout")


def linear(x, weight, bias=None) -> Tensor:
    """y = x @ weight + bias, x: [..., in], weight: [in, out], bias: [out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input shape {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}"
        )
    y = matmul(x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(
                f"linear: bias shape {tuple(bias.shape)} does not match weight {tuple(weight.shape)}"
            )
        y = add(y, bias)
    return y


def conv1d(x, kernel, bias=None) -> Tensor:
    """Same-length 1-D convolution over the time axis.

    x: [..., T, C_in], kernel: [k, C_in, C_out] with odd k, bias: [C_out].
    Boundaries are zero-padded so the output keeps length T.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel width must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ShapeError(
            f"conv1d: input shape {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}"
        )
    t = x.shape[-2]
    p = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    # windows: [..., T, k*C_in]
    win = np.stack([xp[..., j : j + t, :] for j in range(k)], axis=-2)
    win2 = win.reshape(*x.shape[:-1], k * c_in)
    kmat = kernel.data.reshape(k * c_in, c_out)
    y = win2 @ kmat
    if bias is not None:
        bias_t = as_tensor(bias)
        if bias_t.shape != (c_out,):
            raise ShapeError(
                f"conv1d: bias shape {tuple(bias_t.shape)} does not match kernel {tuple(kernel.shape)}"
            )
        y = y + bias_t.data
    else:
        bias_t = None

    parents = (x, kernel) if bias_t is None else (x, kernel, bias_t)

    def backward(g):
        if kernel.requires_grad:
            gk = win2.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)
            kernel._accumulate(gk.reshape(k, c_in, c_out))
        if bias_t is not None and bias_t.requires_grad:
            bias_t._accumulate(g.reshape(-1, c_out).sum(axis=0))
        if x.requires_grad:
            gwin = (g @ kmat.T).reshape(*x.shape[:-1], k, c_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + t, :] += gwin[..., j, :]
            x._accumulate(gxp[..., p : p + t, :])

    return _node(y, parents, backward, "conv1d")


def mse(pred, target) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(
            f"mse: prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}"
        )
    d = sub(pred, target)
    return tmean(mul(d, d))


class ParameterRegistry:
    """Named trainable tensors with a stable, deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = as_tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def astype(self, dtype) -> "ParameterRegistry":
        out = ParameterRegistry()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out


TENSOR_DTYPE_TAG = "f32"


def save_tensor(path, array):
    """Write `array` as a JSON header line plus little-endian float32 data."""
    arr = np.asarray(array, dtype=np.float32)
    header = json.dumps({"shape": list(arr.shape), "dtype": TENSOR_DTYPE_TAG})
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + b"\n")
        f.write(arr.astype("<f4").tobytes())


def read_tensor_from(f, expect_eof: bool = False) -> np.ndarray:
    """Read one serialized tensor from an open binary file object."""
    raw = f.readline()
    if not raw.endswith(b"\n"):
        raise TensorFormatError("corrupt tensor header: missing newline")
    try:
        header = json.loads(raw.decode("ascii"))
        shape = tuple(int(n) for n in header["shape"])
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise TensorFormatError(f"corrupt tensor header: {e}") from e
    if dtype != TENSOR_DTYPE_TAG:
        raise TensorFormatError(f"corrupt tensor header: unsupported dtype {dtype!r}")
    count = int(np.prod(shape)) if shape else 1
    data = f.read(count * 4)
    if len(data) < count * 4:
        raise TensorFormatError(
            f"truncated tensor: expected {count * 4} data bytes, found {len(data)}"
        )
    if expect_eof and f.read(1):
        raise TensorFormatError("corrupt tensor: trailing bytes after data")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor_from(f, expect_eof=True)


class GradCheckReport:
    """Per-parameter relative errors from a central-difference sweep."""

    def __init__(self, per_param, epsilon, tolerance, failures):
        self.per_param = dict(per_param)
        self.epsilon = epsilon
        self.tolerance = tolerance
        self.failures = list(failures)
        self.max_rel_error = max(per_param.values()) if per_param else 0.0
        self.passed = not self.failures and self.max_rel_error <= tolerance

    def to_dict(self):
        return {
            "per_param": self.per_param,
            "max_rel_error": self.max_rel_error,
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
            "failures": self.failures,
            "passed": self.passed,
        }

    def __repr__(self):
        state = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({state}, max_rel_error={self.max_rel_error:.3e})"


def grad_check(loss_fn, params, epsilon: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn()` against central differences.

    `loss_fn` must rebuild the graph on every call and return a scalar Tensor;
    `params` is a ParameterRegistry (or name->Tensor mapping) of float64
    tensors that `loss_fn` closes over.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"grad_check: epsilon {epsilon} outside [1e-6, 1e-4]")
    items = list(params.items())
    for name, t in items:
        if t.dtype != np.float64:
            raise ValueError(f"grad_check: parameter {name} must be float64")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in items
    }
    per_param = {}
    failures = []
    for name, t in items:
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + epsilon
                lp = float(loss_fn().data)
                flat[i] = orig - epsilon
                lm = float(loss_fn().data)
            except FloatingPointError:
                lp = lm = math.nan
            finally:
                flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                failures.append(name)
                worst = math.inf
                break
            numeric = (lp - lm) / (2.0 * epsilon)
            a = float(aflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
        per_param[name] = worst
    return GradCheckReport(per_param, epsilon, tolerance, failures)
