"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the model computes is built from the ops in this module. Each op
records its parents and a vector-Jacobian closure; ``Tensor.backward`` walks
the graph in reverse topological order and accumulates into ``.grad``.

Closures capture parent tensors and raw numpy arrays only, never the op's
output tensor. That keeps the graph acyclic for the reference counter, so
buffers are freed deterministically and the memory probe's high-water mark
is reproducible run to run.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import weakref

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_SEED_MASK = (1 << 64) - 1

# RNG stream tags. Each consumer keys a Philox generator with
# SeedSequence([seed, tag, ...]) so streams never collide.
STREAM_INIT = 0
STREAM_DROPOUT = 1
STREAM_BATCH = 2
STREAM_TRIAL = 3
STREAM_FOLDS = 4
STREAM_SYNTH = 5
STREAM_GRADCHECK = 6

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "polyfuse_grad_enabled", default=True
)
_active_probe: contextvars.ContextVar["MemoryProbe | None"] = contextvars.ContextVar(
    "polyfuse_memory_probe", default=None
)


def keyed_generator(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, *extra).

    Philox is splittable: distinct key tuples give independent streams, and
    the draw sequence for a given key is identical across platforms.
    """
    entropy = [int(seed) & _SEED_MASK, int(stream)] + [int(e) & _SEED_MASK for e in extra]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class MemoryProbe:
    """High-water mark of tensor-buffer bytes allocated while active.

    Tracks allocator-level tensor buffers, not OS-resident memory, so the
    peak is deterministic for a fixed (config, data, seed). Buffers release
    their bytes via weakref finalizers when the reference counter drops them.
    """

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0
        self._token = None

    def _alloc(self, nbytes: int) -> None:
        self.current_bytes += nbytes
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes

    def _free(self, nbytes: int) -> None:
        self.current_bytes -= nbytes

    @property
    def peak_mb(self) -> float:
        """Peak in decimal megabytes (1 MB = 10**6 bytes)."""
        return self.peak_bytes / 1e6

    def __enter__(self) -> "MemoryProbe":
        self._token = _active_probe.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_probe.reset(self._token)
        self._token = None


def active_probe() -> MemoryProbe | None:
    return _active_probe.get()


def _track_buffer(owner, nbytes: int) -> None:
    probe = _active_probe.get()
    if probe is not None and nbytes:
        probe._alloc(nbytes)
        weakref.finalize(owner, probe._free, nbytes)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Contiguous row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        # asarray(order="C") keeps 0-d losses 0-d; ascontiguousarray would
        # promote them to shape (1,).
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        _track_buffer(self, arr.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
            _track_buffer(self, self.grad.nbytes)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``.grad``.

        Repeated calls keep adding: two backward passes double the grads.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")

        # Iterative post-order DFS over parent links. Reversed post-order is
        # a topological order with consumers ahead of producers.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.ensure_grad()
                node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + pg
                else:
                    flows[key] = pg

    # Small operator sugar; the functional forms below are the primary API.
    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """out = a @ b over the last two axes. Leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a_shape, b_shape = a.shape, b.shape
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a_shape, b_shape = a.shape, b.shape
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape))

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    ad, bd = a.data, b.data
    a_shape, b_shape = a.shape, b.shape
    out = ad * bd

    def vjp(g):
        return (_unbroadcast(g * bd, a_shape), _unbroadcast(g * ad, b_shape))

    return _make(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def vjp(g):
        return (g * s,)

    return _make(out, (a,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _make(out, (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for overflow safety."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gain, bias)."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        gy = g * gd
        gx = (gy - gy.mean(axis=-1, keepdims=True)
              - xhat * (gy * xhat).mean(axis=-1, keepdims=True)) * inv
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        return (gx, ggain, gbias)

    return _make(out, (x, gain, bias), vjp)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Temporal convolution with same padding.

    x (C_in, T) or (B, C_in, T); kernels (C_out, C_in, k) with odd k;
    bias (C_out,) -> output (..., C_out, T).
    """
    if kernels.ndim != 3:
        raise ShapeError(f"conv1d kernels must be (C_out, C_in, k), got {kernels.shape}")
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd for same padding, got {k}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {bias.shape} does not match C_out {c_out}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise ShapeError(f"conv1d input shape {x.shape} incompatible with kernels {kernels.shape}")
    b, _, t = xd.shape
    pad = (k - 1) // 2
    xp = np.zeros((b, c_in, t + k - 1), dtype=np.float64)
    xp[:, :, pad:pad + t] = xd
    kd = kernels.data
    out = np.broadcast_to(bias.data[None, :, None], (b, c_out, t)).copy()
    for j in range(k):
        out += np.einsum("bit,oi->bot", xp[:, :, j:j + t], kd[:, :, j])

    def vjp(g):
        g3 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for j in range(k):
            gxp[:, :, j:j + t] += np.einsum("bot,oi->bit", g3, kd[:, :, j])
            gk[:, :, j] = np.einsum("bot,bit->oi", g3, xp[:, :, j:j + t])
        gx = gxp[:, :, pad:pad + t]
        gb = g3.sum(axis=(0, 2))
        return (gx[0] if squeeze else gx, gk, gb)

    return _make(out[0] if squeeze else out, (x, kernels, bias), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """out = x @ weight + bias. x (..., d_in), weight (d_in, d_out)."""
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear input dim {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    if bias is None:
        def vjp(g):
            gf = g.reshape(-1, g.shape[-1])
            xf = xd.reshape(-1, xd.shape[-1])
            return (g @ wd.T, xf.T @ gf)

        return _make(out, (x, weight), vjp)

    def vjp(g):
        gf = g.reshape(-1, g.shape[-1])
        xf = xd.reshape(-1, xd.shape[-1])
        return (g @ wd.T, xf.T @ gf, gf.sum(axis=0))

    return _make(out, (x, weight, bias), vjp)


def dropout(x: Tensor, p: float, train_flag: bool, *, seed: int = 0,
            op_id: int = 0, step: int = 0) -> Tensor:
    """Inverted dropout. Identity when train_flag is off or p == 0.

    The mask comes from a counter-based stream keyed by (seed, op_id, step),
    so a given site at a given step always draws the same mask.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not train_flag or p == 0.0:
        return x
    rng = keyed_generator(seed, STREAM_DROPOUT, op_id, step)
    keep = rng.random(x.shape) >= p
    factor = 1.0 / (1.0 - p)
    out = x.data * keep * factor

    def vjp(g):
        return (g * keep * factor,)

    return _make(out, (x,), vjp)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood, log-sum-exp stable. labels (N,) ints."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_with_logits needs (N, n) logits, got {logits.shape}")
    y = np.asarray(labels)
    n_samples, n_classes = logits.shape
    if y.shape != (n_samples,):
        raise ShapeError(f"labels shape {y.shape} does not match logits {logits.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ShapeError(f"labels out of range [0, {n_classes})")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    picked = z[np.arange(n_samples), y][:, None]
    loss = (lse - picked).mean()
    probs = np.exp(z - lse)

    def vjp(g):
        gz = probs.copy()
        gz[np.arange(n_samples), y] -= 1.0
        return (gz * (float(np.asarray(g).reshape(())) / n_samples),)

    return _make(np.asarray(loss), (logits,), vjp)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; all other dims must agree."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
            i != axis and a != b for i, (a, b) in enumerate(zip(t.shape, first))
        ):
            raise ShapeError(f"concat shapes incompatible: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def vjp(g):
        pieces = []
        start = 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            pieces.append(g[tuple(sl)])
            start += s
        return tuple(pieces)

    return _make(out, tuple(tensors), vjp)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    """Mean over a single axis."""
    count = x.shape[axis]
    out = x.data.mean(axis=axis)

    def vjp(g):
        return (np.repeat(np.expand_dims(g / count, axis), count, axis=axis),)

    return _make(out, (x,), vjp)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    out = np.asarray(x.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), vjp)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = np.argsort(axes)
    out = np.transpose(x.data, axes)

    def vjp(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _make(out, (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors with stable, name-sorted iteration order."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def register(self, name: str, shape: tuple[int, ...], *, seed: int,
                 init: str = "uniform", fan_in: int | None = None) -> Tensor:
        """Create and store a parameter.

        init "uniform" draws from +-sqrt(1/fan_in) on a stream keyed by the
        parameter name, so values do not depend on registration order.
        """
        if name in self._items:
            raise ConfigError(f"duplicate parameter name: {name}")
        if init == "uniform":
            if not fan_in or fan_in <= 0:
                raise ConfigError(f"parameter {name} needs a positive fan_in")
            rng = keyed_generator(seed, STREAM_INIT, *name.encode())
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ConfigError(f"unknown init {init!r} for parameter {name}")
        tensor = Tensor(data, requires_grad=True)
        self._items[name] = tensor
        return tensor

    def __iter__(self):
        return iter(sorted(self._items.items()))

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def names(self) -> list[str]:
        return sorted(self._items)

    @property
    def total_count(self) -> int:
        """Total scalar count; equals the sum of per-tensor sizes."""
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for _, t in self:
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._items) - set(state)
        if missing:
            raise ConfigError(f"state dict missing parameters: {sorted(missing)}")
        for name, t in self:
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"state dict shape {arr.shape} != {t.shape} for {name}")
            t.data[...] = arr


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn, params: ParamStore, eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Compare backward grads of ``fn()`` against central finite differences.

    fn re-evaluates the scalar loss from the current parameter values.
    Returns max over checked coordinates of
    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ConfigError(f"grad_check eps must lie in [1e-6, 1e-4], got {eps}")
    params.zero_grad()
    loss = fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError("grad_check fn must return a scalar tensor")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check loss is not finite")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params
    }

    rng = keyed_generator(seed, STREAM_GRADCHECK)
    worst = 0.0
    with no_grad():
        for name, t in params:
            flat = t.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            else:
                coords = np.arange(n)
            ga = analytic[name].reshape(-1)
            for i in coords:
                original = flat[i]
                flat[i] = original + eps
                hi = float(fn().data.reshape(()))
                flat[i] = original - eps
                lo = float(fn().data.reshape(()))
                flat[i] = original
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NumericError(f"non-finite loss while probing {name}[{i}]")
                gfd = (hi - lo) / (2.0 * eps)
                err = abs(ga[i] - gfd) / max(1.0, abs(ga[i]), abs(gfd))
                if err > worst:
                    worst = err
    return worst
