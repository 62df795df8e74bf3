"""Dense float64 tensors with reverse-mode autodiff.

Everything numeric in this repo flows through the `Tensor` class: model
parameters, activations, and losses. Storage is a row-major contiguous
float64 numpy array; gradients are computed by replaying a `Tape` of
recorded operations in reverse. Broadcasting is restricted to
leading-batch expansion (e.g. adding a [d] bias to a [T, d] activation),
which keeps every backward rule a few lines of auditable numpy.

Ops only record onto the tape when a tape is active *and* some input
requires grad, so inference and frozen-model forwards pay no bookkeeping.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "NumericsError",
    "assert_finite",
    "matmul",
    "add",
    "mul",
    "scale",
    "gelu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "embedding_gather",
    "causal_attention",
    "concat",
    "narrow",
    "reshape",
    "transpose",
    "mean_pool",
    "sum_all",
    "cross_entropy_lm",
    "binary_cross_entropy",
    "AdamState",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
    "params_fingerprint",
    "CheckpointError",
]

PROB_EPS = 1e-7  # clamp for log terms in binary_cross_entropy


class NumericsError(ArithmeticError):
    """Raised when a NaN or Inf is detected by an explicit finiteness check."""


class CheckpointError(ValueError):
    """Raised on malformed or incompatible checkpoint containers."""


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for autodiff.

    `grad` is a same-shape buffer, present iff `requires_grad`. Gradients
    accumulate across backward calls until explicitly zeroed.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{rg})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def assert_finite(t, name: str = "tensor") -> None:
    """Hard-error on NaN/Inf in data or grad. Call sites choose when to pay."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values in {name}")
    if isinstance(t, Tensor) and t.grad is not None and not np.all(np.isfinite(t.grad)):
        raise NumericsError(f"non-finite values in grad of {name}")


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; ops executed inside record themselves when an
    input requires grad. `backward` replays the records once, in reverse
    (inputs always precede their consumers, so reverse order is a valid
    topological sweep). A tape can only be consumed once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, backward_fn) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed; one backward per forward")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not require grad (was it produced under this tape?)")
        self.consumed = True
        _accum(loss, np.ones_like(loss.data))
        for out, fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue  # not on the path from loss
            fn(g)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make_out(data: np.ndarray, *inputs: Tensor):
    """Build an op output; returns (out, tape) with tape None if not recording."""
    tape = _active_tape()
    track = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    return out, (tape if track else None)


# ---------------------------------------------------------------------------
# Ops


def _check_batch_broadcast(a: Tensor, b: Tensor) -> bool:
    """True if b broadcasts over a's leading axes; error on anything fancier."""
    if a.shape == b.shape:
        return False
    k = b.data.ndim
    if k <= a.data.ndim and a.shape[a.data.ndim - k:] == b.shape:
        return True
    raise ValueError(f"shape mismatch {a.shape} vs {b.shape}; only leading-batch expansion is supported")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_batch_broadcast(a, b)
    out, tape = _make_out(a.data + b.data, a, b)
    if tape:
        def bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, _reduce_to(g, b.shape) if broadcast else g)
        tape.record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_batch_broadcast(a, b)
    out, tape = _make_out(a.data * b.data, a, b)
    if tape:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * bd)
            if b.requires_grad:
                gb = g * ad
                _accum(b, _reduce_to(gb, b.shape) if broadcast else gb)
        tape.record(out, bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out, tape = _make_out(a.data * s, a)
    if tape:
        def bwd(g):
            _accum(a, g * s)
        tape.record(out, bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out, tape = _make_out(a.data @ b.data, a, b)
    if tape:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                _accum(a, g @ bd.T)
            if b.requires_grad:
                _accum(b, ad.T @ g)
        tape.record(out, bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    # Exact erf form; derivative is Phi(x) + x * pdf(x).
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out, tape = _make_out(xd * phi, x)
    if tape:
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        dgelu = phi + xd * pdf
        def bwd(g):
            _accum(x, g * dgelu)
        tape.record(out, bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out, tape = _make_out(y, x)
    if tape:
        def bwd(g):
            _accum(x, g * y * (1.0 - y))
        tape.record(out, bwd)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out, tape = _make_out(y, x)
    if tape:
        def bwd(g):
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - inner))
        tape.record(out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = xc * inv
    out, tape = _make_out(norm * gain.data + bias.data, x, gain, bias)
    if tape:
        gd = gain.data
        def bwd(g):
            if bias.requires_grad:
                _accum(bias, _reduce_to(g, bias.shape))
            if gain.requires_grad:
                _accum(gain, _reduce_to(g * norm, gain.shape))
            if x.requires_grad:
                gn = g * gd
                term = gn - gn.mean(axis=-1, keepdims=True) - norm * (gn * norm).mean(axis=-1, keepdims=True)
                _accum(x, term * inv)
        tape.record(out, bwd)
    return out


def embedding_gather(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding index out of range [0, {table.shape[0]})")
    out, tape = _make_out(table.data[ids], table)
    if tape:
        def bwd(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accum(table, gt)
        tape.record(out, bwd)
    return out


def concat(tensors: list, axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    out, tape = _make_out(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    if tape:
        sizes = [t.data.shape[axis] for t in tensors]
        def bwd(g):
            offset = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offset, offset + size)
                    _accum(t, g[tuple(sl)])
                offset += size
        tape.record(out, bwd)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out, tape = _make_out(np.ascontiguousarray(x.data[sl]), x)
    if tape:
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[sl] = g
            _accum(x, gx)
        tape.record(out, bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    out, tape = _make_out(np.ascontiguousarray(x.data.reshape(shape)), x)
    if tape:
        def bwd(g):
            _accum(x, g.reshape(old))
        tape.record(out, bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    out, tape = _make_out(np.ascontiguousarray(x.data.T), x)
    if tape:
        def bwd(g):
            _accum(x, g.T)
        tape.record(out, bwd)
    return out


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    n = x.data.shape[axis]
    if n == 0:
        raise ValueError("mean_pool over an empty axis")
    out, tape = _make_out(x.data.mean(axis=axis), x)
    if tape:
        def bwd(g):
            _accum(x, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))
        tape.record(out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out, tape = _make_out(np.asarray(x.data.sum()), x)
    if tape:
        def bwd(g):
            _accum(x, np.broadcast_to(g, x.data.shape).astype(np.float64))
        tape.record(out, bwd)
    return out


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                     mask: np.ndarray | None = None) -> Tensor:
    """Fused multi-head scaled-dot-product attention over one sequence.

    q: [T, d]; k, v: [S, d] with S >= T (prefix or cache slots first);
    mask: optional additive [T, S] array (0 open, large negative closed).
    One tape record; backward is the standard analytic rule, batched over
    heads.
    """
    T, d = q.shape
    S = k.shape[0]
    if d % n_heads != 0:
        raise ValueError("model width must divide into heads")
    if k.shape != (S, d) or v.shape != (S, d):
        raise ValueError("k and v must be [S, d]")
    dk = d // n_heads
    inv = 1.0 / math.sqrt(dk)

    def split(t: np.ndarray, length: int) -> np.ndarray:
        return np.ascontiguousarray(t.reshape(length, n_heads, dk).transpose(1, 0, 2))

    q3, k3, v3 = split(q.data, T), split(k.data, S), split(v.data, S)
    scores = q3 @ k3.transpose(0, 2, 1) * inv  # [H, T, S]
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=-1, keepdims=True)
    out3 = w @ v3  # [H, T, dk]
    out_data = np.ascontiguousarray(out3.transpose(1, 0, 2)).reshape(T, d)
    out, tape = _make_out(out_data, q, k, v)
    if tape:
        def bwd(g):
            g3 = np.ascontiguousarray(g.reshape(T, n_heads, dk).transpose(1, 0, 2))
            if v.requires_grad:
                gv3 = w.transpose(0, 2, 1) @ g3
                _accum(v, np.ascontiguousarray(gv3.transpose(1, 0, 2)).reshape(S, d))
            gw = g3 @ v3.transpose(0, 2, 1)  # [H, T, S]
            gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                gq3 = gs @ k3 * inv
                _accum(q, np.ascontiguousarray(gq3.transpose(1, 0, 2)).reshape(T, d))
            if k.requires_grad:
                gk3 = gs.transpose(0, 2, 1) @ q3 * inv
                _accum(k, np.ascontiguousarray(gk3.transpose(1, 0, 2)).reshape(S, d))
        tape.record(out, bwd)
    return out


def cross_entropy_lm(logits: Tensor, targets, mask) -> Tensor:
    """Mean of -log p(target) over unmasked positions.

    logits: [T, V]; targets: int array [T]; mask: bool array [T] selecting
    the positions that contribute to the loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    T, V = logits.shape
    if targets.shape != (T,) or mask.shape != (T,):
        raise ValueError("targets/mask must be 1-D of length matching logits rows")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"target index out of vocabulary [0, {V})")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss mask covers zero positions")
    ld = logits.data
    m = ld.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=-1))
    picked = ld[np.arange(T), targets]
    loss = float(((lse - picked) * mask).sum() / n)
    out, tape = _make_out(np.asarray(loss), logits)
    if tape:
        probs = np.exp(ld - lse[:, None])
        def bwd(g):
            gl = probs.copy()
            gl[np.arange(T), targets] -= 1.0
            gl *= (mask[:, None] * (float(g) / n))
            _accum(logits, gl)
        tape.record(out, bwd)
    return out


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Multi-label cross entropy: -sum_i [t_i log p_i + (1-t_i) log(1-p_i)].

    Sums over every element (for [T, m] inputs: over positions and labels);
    callers that want a per-position mean rescale the scalar. Probabilities
    are clamped to [PROB_EPS, 1-PROB_EPS] so saturated predictions cannot
    produce infinities; the clamp region contributes zero gradient.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise ValueError(f"targets shape {t.shape} must match probs shape {probs.shape}")
    p = np.clip(probs.data, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum()
    out, tape = _make_out(np.asarray(loss), probs)
    if tape:
        interior = (probs.data > PROB_EPS) & (probs.data < 1.0 - PROB_EPS)
        def bwd(g):
            gp = np.where(interior, (p - t) / (p * (1.0 - p)), 0.0)
            _accum(probs, gp * float(g))
        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Optimizer


class AdamState:
    """Adaptive-moment optimizer state over a fixed parameter list.

    Buffers shape-match their parameters; `step_count` increases by one per
    `optimizer_step` call.
    """

    def __init__(self, params: list[Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def optimizer_step(state: AdamState) -> None:
    """Apply one Adam update to every parameter, then zero the gradients."""
    for p in state.params:
        if p.grad is None:
            raise ValueError("optimizer_step on a parameter with no gradient buffer")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad.fill(0.0)


# ---------------------------------------------------------------------------
# Checkpoint container
#
# Layout (little-endian):
#   magic "CVTC" | version u8 | n_entries u32
#   per entry: name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim | float64 payload
#   n_meta u16
#   per meta: key_len u16 | key utf-8 | val_len u32 | val utf-8

CKPT_MAGIC = b"CVTC"
CKPT_VERSION = 1


def save_checkpoint(path, named: dict, meta: dict | None = None) -> None:
    meta = meta or {}
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<B", CKPT_VERSION))
        f.write(struct.pack("<I", len(named)))
        for name in sorted(named):
            arr = named[name]
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
            assert_finite(Tensor(data), name)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        f.write(struct.pack("<H", len(meta)))
        for key in sorted(meta):
            kb = key.encode("utf-8")
            vb = str(meta[key]).encode("utf-8")
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(struct.pack("<I", len(vb)))
            f.write(vb)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    version = blob[4]
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 5
    (n_entries,) = struct.unpack_from("<I", blob, off)
    off += 4
    named: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        ndim = blob[off]
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        named[name] = np.array(arr, dtype=np.float64)
    (n_meta,) = struct.unpack_from("<H", blob, off)
    off += 2
    meta: dict[str, str] = {}
    for _ in range(n_meta):
        (klen,) = struct.unpack_from("<H", blob, off)
        off += 2
        key = blob[off:off + klen].decode("utf-8")
        off += klen
        (vlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        meta[key] = blob[off:off + vlen].decode("utf-8")
        off += vlen
    return named, meta


def params_fingerprint(named: dict) -> str:
    """Order-insensitive SHA-256 over parameter names and raw float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(named):
        arr = named[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        h.update(name.encode("utf-8"))
        h.update(str(data.shape).encode("ascii"))
        h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()
