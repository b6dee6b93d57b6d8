"""Dense tensors and reverse-mode differentiation on an explicit tape.

Layout convention is channels-first, row-major: spatial tensors are
``[C, H, W]`` or batched ``[N, C, H, W]``.  All operations accept either
rank; the batch axis is threaded through unchanged.  Convolutions use
"same" zero padding with stride 1, so spatial sizes are preserved.

Tensors are immutable after creation.  A tensor participates in
differentiation only if it was recorded on a :class:`Tape` (via
``tape.watch`` or as the output of an op whose inputs were recorded).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


class Tensor:
    """Dense N-dimensional array of reals, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.tape = tape
        self.node_id = node_id

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
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        tag = f", node_id={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"


def astensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)
    return t


class _Node:
    __slots__ = ("kind", "inputs", "backward", "out_shape", "out_dtype")

    def __init__(self, kind, inputs, backward, out_shape, out_dtype):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.out_shape = out_shape
        self.out_dtype = out_dtype


class Tape:
    """Append-only record of operations; node ids are topologically ordered."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def watch(self, x) -> Tensor:
        """Record ``x`` as a leaf so gradients accumulate for it."""
        t = astensor(x)
        if t.tape is not None:
            raise ValueError("tensor is already recorded on a tape")
        nid = self._append("leaf", (), None, t.data.shape, t.data.dtype)
        return Tensor(t.data, self, nid)

    def _append(self, kind, inputs, backward, out_shape, out_dtype) -> int:
        self._nodes.append(_Node(kind, inputs, backward, out_shape, out_dtype))
        return len(self._nodes) - 1

    def node(self, node_id) -> _Node:
        return self._nodes[node_id]


def backward(tape: Tape, loss) -> dict:
    """Run reverse accumulation from a scalar loss node.

    Returns a map node id -> gradient Tensor for every node reached on the
    reverse sweep; d(loss)/d(loss) = 1.
    """
    node_id = loss.node_id if isinstance(loss, Tensor) else int(loss)
    if node_id is None:
        raise ValueError("loss tensor is not recorded on the tape")
    node = tape.node(node_id)
    if int(np.prod(node.out_shape)) != 1:
        raise ShapeError(f"loss must be scalar, got shape {node.out_shape}")
    acc = {node_id: np.ones(node.out_shape, dtype=node.out_dtype)}
    for nid in range(node_id, -1, -1):
        g = acc.get(nid)
        if g is None:
            continue
        bw = tape.node(nid).backward
        if bw is not None:
            bw(g, acc)
    return {nid: Tensor(g) for nid, g in acc.items()}


def _acc(acc: dict, node_id, g):
    """Accumulate gradient g into acc[node_id] without in-place aliasing."""
    if node_id is None:
        return
    prev = acc.get(node_id)
    acc[node_id] = g if prev is None else prev + g


def _join_tape(*tensors):
    tape = None
    for t in tensors:
        if t is not None and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands are recorded on different tapes")
    return tape


def _emit(tape, kind, out_data, bw, inputs=()):
    if tape is None:
        return Tensor(out_data)
    ids = tuple(i for i in inputs if i is not None)
    nid = tape._append(kind, ids, bw, out_data.shape, out_data.dtype)
    return Tensor(out_data, tape, nid)


# ---------------------------------------------------------------------------
# convolution / pooling / resampling


def _as_batched(a):
    """View rank-3 [C,H,W] as [1,C,H,W]; rank-4 passes through."""
    if a.ndim == 3:
        return a[None], True
    if a.ndim == 4:
        return a, False
    raise ShapeError(f"expected rank 3 or 4 spatial tensor, got shape {a.shape}")


def _pad_spatial(x4, p):
    if p == 0:
        return x4
    return np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp, k, H, W):
    """[N,C,H+2p,W+2p] -> [N, C*k*k, H*W] patch matrix."""
    N, C = xp.shape[0], xp.shape[1]
    cols = np.empty((N, C, k, k, H, W), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy : dy + H, dx : dx + W]
    return cols.reshape(N, C * k * k, H * W)


def _col2im(gcols, N, C, k, H, W):
    p = (k - 1) // 2
    g6 = gcols.reshape(N, C, k, k, H, W)
    gxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=gcols.dtype)
    for dy in range(k):
        for dx in range(k):
            gxp[:, :, dy : dy + H, dx : dx + W] += g6[:, :, dy, dx]
    if p:
        return gxp[:, :, p : p + H, p : p + W]
    return gxp


def conv2d(x, weights, bias=None) -> Tensor:
    """Same-padded stride-1 2D convolution (cross-correlation form).

    ``x`` is [C_in,H,W] or [N,C_in,H,W], ``weights`` is [C_out,C_in,k,k]
    with k odd, ``bias`` is [C_out] or None.  Differentiable in all three.
    """
    x = astensor(x)
    weights = astensor(weights)
    bias = astensor(bias) if bias is not None else None
    wd = weights.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ShapeError(f"weights must be [C_out,C_in,k,k], got {wd.shape}")
    cout, cin, k, _ = wd.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    x4, squeeze = _as_batched(x.data)
    N, C, H, W = x4.shape
    if C != cin:
        raise ShapeError(f"input has {C} channels but weights expect {cin}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.data.shape}")

    p = (k - 1) // 2
    cols = _im2col(_pad_spatial(x4, p), k, H, W)
    w2 = wd.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(N, cout, H, W)
    if squeeze:
        out = out[0]

    tape = _join_tape(x, weights, bias)
    if tape is None:
        return Tensor(out)

    xid, wid = x.node_id, weights.node_id
    bid = bias.node_id if bias is not None else None
    xd = x4

    def bw(go, acc):
        go3 = go.reshape(N, cout, H * W)
        if bid is not None:
            _acc(acc, bid, go3.sum(axis=(0, 2)))
        if wid is not None or xid is not None:
            if wid is not None:
                cols_b = _im2col(_pad_spatial(xd, p), k, H, W)
                gw = np.matmul(go3, cols_b.transpose(0, 2, 1)).sum(axis=0)
                _acc(acc, wid, gw.reshape(wd.shape))
            if xid is not None:
                gcols = np.matmul(w2.T, go3)
                gx = _col2im(gcols, N, C, k, H, W)
                _acc(acc, xid, gx[0] if squeeze else gx)

    return _emit(tape, "conv2d", out, bw, (xid, wid, bid))


def maxpool2(x) -> Tensor:
    """2x2 max pooling; gradient routes to the first row-major argmax."""
    x = astensor(x)
    x4, squeeze = _as_batched(x.data)
    N, C, H, W = x4.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 requires even spatial dims, got {H}x{W}")
    h, w = H // 2, W // 2
    win = x4.reshape(N, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, h, w, 4)
    out = win.max(axis=-1)
    if squeeze:
        out = out[0]

    tape = _join_tape(x)
    if tape is None:
        return Tensor(out)
    xid = x.node_id

    def bw(go, acc):
        if xid is None:
            return
        idx = win.argmax(axis=-1)
        g5 = np.zeros_like(win)
        np.put_along_axis(g5, idx[..., None], go.reshape(N, C, h, w, 1), axis=-1)
        gx = g5.reshape(N, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        _acc(acc, xid, gx[0] if squeeze else gx)

    return _emit(tape, "maxpool2", out, bw, (xid,))


def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling; gradient sums each 2x2 block."""
    x = astensor(x)
    x4, squeeze = _as_batched(x.data)
    N, C, H, W = x4.shape
    out = x4.repeat(2, axis=2).repeat(2, axis=3)
    if squeeze:
        out = out[0]

    tape = _join_tape(x)
    if tape is None:
        return Tensor(out)
    xid = x.node_id

    def bw(go, acc):
        if xid is None:
            return
        gx = go.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5))
        _acc(acc, xid, gx[0] if squeeze else gx)

    return _emit(tape, "upsample_nearest2", out, bw, (xid,))


def concat_channels(a, b) -> Tensor:
    """Concatenate along the channel axis (axis ndim-3)."""
    a = astensor(a)
    b = astensor(b)
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_channels needs matching rank-3/4 tensors, got {a.shape} and {b.shape}")
    axis = a.ndim - 3
    if a.shape[-2:] != b.shape[-2:] or a.shape[:axis] != b.shape[:axis]:
        raise ShapeError(f"spatial/batch dims differ: {a.shape} vs {b.shape}")
    ca = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    tape = _join_tape(a, b)
    if tape is None:
        return Tensor(out)
    aid, bid = a.node_id, b.node_id

    def bw(go, acc):
        ga, gb = np.split(go, [ca], axis=axis)
        _acc(acc, aid, ga)
        _acc(acc, bid, gb)

    return _emit(tape, "concat_channels", out, bw, (aid, bid))


# ---------------------------------------------------------------------------
# elementwise ops


def sigmoid(x) -> Tensor:
    x = astensor(x)
    y = expit(x.data)
    tape = _join_tape(x)
    if tape is None:
        return Tensor(y)
    xid = x.node_id

    def bw(go, acc):
        _acc(acc, xid, go * (y * (1.0 - y)))

    return _emit(tape, "sigmoid", y, bw, (xid,))


def tanh(x) -> Tensor:
    x = astensor(x)
    y = np.tanh(x.data)
    tape = _join_tape(x)
    if tape is None:
        return Tensor(y)
    xid = x.node_id

    def bw(go, acc):
        _acc(acc, xid, go * (1.0 - y * y))

    return _emit(tape, "tanh", y, bw, (xid,))


def relu(x) -> Tensor:
    x = astensor(x)
    y = np.maximum(x.data, 0)
    tape = _join_tape(x)
    if tape is None:
        return Tensor(y)
    xid = x.node_id
    xd = x.data

    def bw(go, acc):
        _acc(acc, xid, go * (xd > 0))

    return _emit(tape, "relu", y, bw, (xid,))


def one_minus(x) -> Tensor:
    x = astensor(x)
    y = 1.0 - x.data
    tape = _join_tape(x)
    if tape is None:
        return Tensor(y)
    xid = x.node_id

    def bw(go, acc):
        _acc(acc, xid, -go)

    return _emit(tape, "one_minus", y, bw, (xid,))


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires identical shapes, got {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape(a, b, "add")
    out = a.data + b.data
    tape = _join_tape(a, b)
    if tape is None:
        return Tensor(out)
    aid, bid = a.node_id, b.node_id

    def bw(go, acc):
        _acc(acc, aid, go)
        _acc(acc, bid, go)

    return _emit(tape, "add", out, bw, (aid, bid))


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape(a, b, "sub")
    out = a.data - b.data
    tape = _join_tape(a, b)
    if tape is None:
        return Tensor(out)
    aid, bid = a.node_id, b.node_id

    def bw(go, acc):
        _acc(acc, aid, go)
        _acc(acc, bid, -go)

    return _emit(tape, "sub", out, bw, (aid, bid))


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape(a, b, "mul")
    out = a.data * b.data
    tape = _join_tape(a, b)
    if tape is None:
        return Tensor(out)
    aid, bid = a.node_id, b.node_id
    ad, bd = a.data, b.data

    def bw(go, acc):
        _acc(acc, aid, go * bd)
        _acc(acc, bid, go * ad)

    return _emit(tape, "mul", out, bw, (aid, bid))


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "add": add,
    "mul": mul,
    "sub": sub,
    "one_minus": one_minus,
}


def elementwise(kind, *args) -> Tensor:
    """Dispatch a pointwise op by name; see ``_ELEMENTWISE`` for kinds."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> Tensor:
    x = astensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    tape = _join_tape(x)
    if tape is None:
        return Tensor(out)
    xid = x.node_id
    shape, dtype = x.shape, x.dtype

    def bw(go, acc):
        _acc(acc, xid, np.full(shape, go.reshape(()), dtype=dtype))

    return _emit(tape, "sum_all", out, bw, (xid,))


def mean_all(x) -> Tensor:
    x = astensor(x)
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    tape = _join_tape(x)
    if tape is None:
        return Tensor(out)
    xid = x.node_id
    shape, dtype = x.shape, x.dtype
    inv_n = 1.0 / x.size

    def bw(go, acc):
        _acc(acc, xid, np.full(shape, go.reshape(()) * inv_n, dtype=dtype))

    return _emit(tape, "mean_all", out, bw, (xid,))


def sigmoid_ce_map(logits, targets) -> Tensor:
    """Elementwise sigmoid cross entropy: x - x*z + log(1 + e^-x).

    Computed in the stable form max(x,0) - x*z + log(1 + e^-|x|).
    Targets must lie in [0,1]; gradients flow to the logits only, and
    equal sigmoid(x) - z exactly.
    """
    logits = astensor(logits)
    targets = astensor(targets)
    _check_same_shape(logits, targets, "sigmoid_ce_map")
    zd = targets.data
    if zd.size and (zd.min() < 0.0 or zd.max() > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    xd = logits.data
    out = np.maximum(xd, 0) - xd * zd + np.log1p(np.exp(-np.abs(xd)))

    tape = _join_tape(logits)
    if tape is None:
        return Tensor(out)
    xid = logits.node_id

    def bw(go, acc):
        _acc(acc, xid, go * (expit(xd) - zd))

    return _emit(tape, "sigmoid_ce_map", out, bw, (xid,))


# ---------------------------------------------------------------------------
# verification


def grad_check(f, inputs, eps=1e-5, max_elements_per_input=None, seed=0):
    """Max relative error between tape gradients and central differences.

    ``f`` maps tensors to a scalar tensor.  Error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).  When
    ``max_elements_per_input`` is set, a deterministic random subset of
    coordinates per input is probed instead of every element.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(astensor(a).data, dtype=np.float64) for a in inputs]

    tape = Tape()
    recorded = [tape.watch(a) for a in arrays]
    out = f(*recorded)
    if out.size != 1:
        raise ShapeError(f"grad_check requires a scalar-valued f, got shape {out.shape}")
    grads = backward(tape, out)
    analytic = []
    for t in recorded:
        g = grads.get(t.node_id)
        analytic.append(np.zeros_like(t.data) if g is None else g.data)

    def eval_at(arrs):
        return f(*(Tensor(a) for a in arrs)).item()

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for i, base in enumerate(arrays):
        flat_n = base.size
        if max_elements_per_input is not None and flat_n > max_elements_per_input:
            idxs = rng.choice(flat_n, size=max_elements_per_input, replace=False)
        else:
            idxs = range(flat_n)
        work = [a.copy() for a in arrays]
        flat = work[i].reshape(-1)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            up = eval_at(work)
            flat[j] = orig - eps
            dn = eval_at(work)
            flat[j] = orig
            numeric = (up - dn) / (2.0 * eps)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err
