"""Dense float64 tensors with reverse-mode automatic differentiation.

Graphs are built define-by-run: every operation records its parents and a
backward closure, so tensor creation order is always a valid topological
order. Calling ``backward`` on a scalar accumulates dLoss/dX into ``.grad``
of every reachable tensor that has ``requires_grad`` set.

Design constraints honored throughout:
  * float64 everywhere (tight finite-difference checks stay meaningful),
  * no broadcasting beyond scalar-times-tensor; other shape mixing must be
    explicit (``tile_leading``, ones-matmul expansion),
  * tensors are treated as immutable once created and are safe to share
    read-only across threads; each graph is single-threaded.
"""

from __future__ import annotations

import numpy as np

NORM_GRAD_EPS = 1e-8  # smooths d|x|/dx at the origin; value stays exact


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericalError(ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


def _is_scalar_shape(shape):
    return int(np.prod(shape, dtype=np.int64)) == 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward_fn = _backward_fn

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad}{tag})"

    # -- autograd ------------------------------------------------------------

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # private copy
        else:
            self.grad += g

    def backward(self):
        """Reverse accumulation from this scalar into .grad of all leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def detach(self) -> "Tensor":
        """Constant copy cut off from the graph (gradients stop here)."""
        return Tensor(self.data.copy())

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x, name=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=False, name=name)


def parameter(x, name=None) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _node(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward_fn=backward_fn if req else None)


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    """Allow equal shapes or a size-1 operand on either side; reject the rest."""
    if a.shape == b.shape:
        return
    if _is_scalar_shape(a.shape) or _is_scalar_shape(b.shape):
        return
    raise ShapeError(f"{opname}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform "
                     "(only scalar-with-tensor mixing is allowed)")


def _reduce_to(g, shape):
    """Sum a gradient down to a size-1 operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g, b.shape))

    return _node(out_data, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(-g)

    return _node(-a.data, (a,), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g * a.data, b.shape))

    return _node(out_data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out_data = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum(_reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), backward_fn)


def pow_const(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_data = a.data ** p

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return _node(out_data, (a,), backward_fn)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _node(np.log(a.data), (a,), backward_fn)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g * np.cos(a.data))

    return _node(np.sin(a.data), (a,), backward_fn)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(-g * np.sin(a.data))

    return _node(np.cos(a.data), (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g * 0.5 / out_data)

    return _node(out_data, (a,), backward_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g * mask)

    return _node(a.data * mask, (a,), backward_fn)


def l2_norm(a) -> Tensor:
    """Euclidean norm over all elements; derivative at 0 is defined as 0."""
    a = as_tensor(a)
    val = float(np.sqrt(np.sum(a.data * a.data)))

    def backward_fn(g):
        if a.requires_grad:
            denom = np.sqrt(np.sum(a.data * a.data) + NORM_GRAD_EPS)
            a._accum(float(g.reshape(())) * a.data / denom)

    return _node(np.float64(val), (a,), backward_fn)


def l2_norm_rows(a) -> Tensor:
    """Per-row Euclidean norm of a 2-D tensor; zero rows get zero gradient."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"l2_norm_rows needs a 2-D tensor, got shape {tuple(a.shape)}")
    sq = np.sum(a.data * a.data, axis=1)
    val = np.sqrt(sq)

    def backward_fn(g):
        if a.requires_grad:
            denom = np.sqrt(sq + NORM_GRAD_EPS)
            a._accum((g / denom)[:, None] * a.data)

    return _node(val, (a,), backward_fn)


# -- linear algebra and structure ------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product: both 2-D, or both N-D with identical leading (batch) dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {tuple(a.shape)} @ {tuple(b.shape)} "
                         "(tile_leading makes batch mixing explicit)")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    out_data = np.matmul(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accum(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(out_data, (a, b), backward_fn)


def tile_leading(a, n: int) -> Tensor:
    """Explicit constant replication of a tensor along a new leading batch axis.

    Only allowed for non-trainable tensors; trainable ones must be expanded
    through differentiable ops so gradients stay well-defined.
    """
    a = as_tensor(a)
    if a.requires_grad:
        raise ShapeError("tile_leading is for constants; expand trainable tensors explicitly")
    view = np.broadcast_to(a.data, (int(n),) + a.data.shape)
    return Tensor(view)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    old_shape = a.shape
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g.reshape(old_shape))

    return _node(out_data, (a,), backward_fn)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    inv = np.argsort(axes)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inv))

    return _node(np.transpose(a.data, axes), (a,), backward_fn)


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    axis = int(axis)
    ref = list(ts[0].shape)
    for t in ts[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:axis] != ref[:axis] or s[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"concat: shape {tuple(t.shape)} does not line up with "
                             f"{tuple(ts[0].shape)} along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                t._accum(g[tuple(sl)])

    return _node(out_data, tuple(ts), backward_fn)


def getitem(a, idx) -> Tensor:
    """Basic indexing with ints and unit-step slices."""
    a = as_tensor(a)
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if isinstance(i, slice):
            if i.step not in (None, 1):
                raise ShapeError("strided slicing is not supported")
        elif not isinstance(i, (int, np.integer)):
            raise ShapeError(f"unsupported index component {i!r}")
    out_data = a.data[idx]

    def backward_fn(g):
        if a.requires_grad:
            # accumulate straight into the region: avoids one full-size
            # scratch buffer per slice node
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

    return _node(out_data, (a,), backward_fn)


def gather_rows(a, indices) -> Tensor:
    """Select rows along axis 0 (duplicates allowed); one node per gather."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a flat index list, got shape {idx.shape}")
    out_data = a.data[idx]

    def backward_fn(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _node(out_data, (a,), backward_fn)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward_fn(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.broadcast_to(np.reshape(g, (1,) * len(in_shape)), in_shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, in_shape).copy())

    return _node(out_data, (a,), backward_fn)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- network building blocks -----------------------------------------------------


def conv1d(x, w, b=None) -> Tensor:
    """1-D convolution over time with zero 'same' padding.

    x: (C_in, T), w: (C_out, C_in, K) with odd K, b: (C_out,) or None.
    Output column t depends only on input columns [t-(K-1)/2, t+(K-1)/2],
    which keeps receptive fields exact under zero padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected x (C,T) and w (Co,Ci,K), got {tuple(x.shape)} and {tuple(w.shape)}")
    c_in, t_len = x.shape
    c_out, c_in_w, k = w.shape
    if c_in_w != c_in:
        raise ShapeError(f"conv1d: channel mismatch, x has {c_in}, w expects {c_in_w}")
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {tuple(b.shape)} != ({c_out},)")
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    # cols[i*k + j, t] = xp[i, t + j]
    cols = np.empty((c_in * k, t_len))
    for j in range(k):
        cols[j::k, :] = xp[:, j:j + t_len]
    wmat = w.data.reshape(c_out, c_in * k)
    out_data = wmat @ cols
    if b is not None:
        out_data = out_data + b.data[:, None]

    def backward_fn(g):
        if w.requires_grad:
            w._accum((g @ cols.T).reshape(c_out, c_in, k))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=1))
        if x.requires_grad:
            dcols = wmat.T @ g  # (C_in*K, T)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j:j + t_len] += dcols[j::k, :]
            a_grad = dxp[:, pad:pad + t_len] if pad else dxp
            x._accum(a_grad)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward_fn)


def group_norm(x, gamma, beta, n_groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization of a (C, T) map, statistics per group per time step.

    Normalizing within each time step (rather than across the whole sequence)
    keeps every output column a function of its own input column, so the conv
    stack's receptive field stays exact.
    """
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    c, t_len = x.shape
    if c % n_groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible into {n_groups} groups")
    gsize = c // n_groups
    xg = reshape(x, (n_groups, gsize, t_len))
    m = mean_(xg, axis=1, keepdims=True)                    # (G, 1, T)
    ones_col = constant(np.ones((n_groups, gsize, 1)))
    m_full = matmul(ones_col, m)                            # (G, gsize, T)
    centered = xg - m_full
    var = mean_(mul(centered, centered), axis=1, keepdims=True)
    denom = sqrt(var + eps)
    normed = div(centered, matmul(ones_col, denom))
    normed = reshape(normed, (c, t_len))
    ones_row = constant(np.ones((1, t_len)))
    scale = matmul(reshape(gamma, (c, 1)), ones_row)
    shift = matmul(reshape(beta, (c, 1)), ones_row)
    return add(mul(normed, scale), shift)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> Tensor:
    """Pre-sampled inverted-dropout mask: entries are 0 or 1/(1-rate)."""
    if rate <= 0.0:
        return constant(np.ones(shape))
    keep = rng.random(shape) >= rate
    return constant(keep / (1.0 - rate))


# -- verification -----------------------------------------------------------------


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def finite_diff_check(f, wrt, h: float = 1e-5, max_coords=None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a deterministic zero-argument callable returning a scalar Tensor,
    closing over the tensors in ``wrt`` (a Tensor or list of Tensors). Error
    per coordinate is |analytic - central| / max(1, |central|); the max over
    all checked coordinates is returned. ``max_coords`` limits the number of
    coordinates probed per tensor (sampled with ``rng`` when set).
    """
    params = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    zero_grads(params)
    out = f()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar Tensor")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    bad = []
    for p, an in zip(params, analytic):
        flat_n = p.size
        if max_coords is not None and flat_n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat_n, size=max_coords, replace=False)
        else:
            coords = range(flat_n)
        base = p.data.copy()
        for c in coords:
            c = int(c)
            bumped = base.copy().reshape(-1)
            bumped[c] = base.reshape(-1)[c] + h
            p.data = bumped.reshape(base.shape)
            f_plus = f().item()
            bumped[c] = base.reshape(-1)[c] - h
            p.data = bumped.reshape(base.shape)
            f_minus = f().item()
            p.data = base
            central = (f_plus - f_minus) / (2.0 * h)
            a = an.reshape(-1)[c]
            if not (np.isfinite(central) and np.isfinite(a)):
                bad.append((p.name or "<unnamed>", c, a, central))
                continue
            err = abs(a - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    if bad:
        detail = ", ".join(f"{n}[{c}]: analytic={a!r} central={fd!r}" for n, c, a, fd in bad[:8])
        raise NumericalError(f"non-finite gradient entries: {detail}")
    return worst
