"""Minimal reverse-mode differentiation over float64 arrays.

A Tape records every primitive as it executes (op kind, input indices,
cached forward value); ``backward`` walks the record once in reverse and
accumulates exact gradients. Arrays are scalars (0-d), vectors, or
matrices whose leading axis is a batch of rows. Named parameters register
once per tape, so a network called repeatedly inside one graph accumulates
gradients into a single slot.

Also hosts the small dense networks, SGD/Adam, a finite-difference
gradient checker, and a binary checkpoint format.
"""

import json
import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tape",
    "Node",
    "DenseNet",
    "Optimizer",
    "GradCheckReport",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
]


class Node:
    """Handle to one entry on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.tape.values[self.idx].shape

    def item(self) -> float:
        return float(self.tape.values[self.idx])

    def _wrap(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape._binary("add", self, self._wrap(other))

    def __radd__(self, other):
        return self._wrap(other) + self

    def __sub__(self, other):
        return self.tape._binary("sub", self, self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        return self.tape._binary("mul", self, self._wrap(other))

    def __rmul__(self, other):
        return self._wrap(other) * self

    def __truediv__(self, other):
        return self.tape._binary("div", self, self._wrap(other))

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __neg__(self):
        return self.tape._unary("neg", self)

    def __repr__(self):
        return f"Node(idx={self.idx}, shape={self.shape})"


class Tape:
    """Append-only computation record; single-owner during a pass."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[str] = []
        self.args: list[tuple[int, ...]] = []
        self.extras: list = []
        self.parameters: dict[str, int] = {}

    # -- node construction -------------------------------------------------

    def _push(self, op: str, value: np.ndarray, args: tuple[int, ...], extra=None) -> Node:
        idx = len(self.values)
        self.values.append(value)
        self.ops.append(op)
        self.args.append(args)
        self.extras.append(extra)
        return Node(self, idx)

    def const(self, x) -> Node:
        return self._push("const", np.asarray(x, dtype=np.float64), ())

    def param(self, name: str, array: np.ndarray) -> Node:
        """Register (or re-fetch) a trainable leaf. Repeat calls with the
        same name return the existing node so gradients accumulate."""
        if name in self.parameters:
            return Node(self, self.parameters[name])
        node = self._push("param", np.asarray(array, dtype=np.float64), ())
        self.parameters[name] = node.idx
        return node

    # -- primitives ----------------------------------------------------------

    def _binary(self, op: str, a: Node, b: Node) -> Node:
        va, vb = self.values[a.idx], self.values[b.idx]
        if va.shape != vb.shape and va.ndim != 0 and vb.ndim != 0:
            raise ValueError(f"{op}: shape mismatch {va.shape} vs {vb.shape}")
        if op == "add":
            out = va + vb
        elif op == "sub":
            out = va - vb
        elif op == "mul":
            out = va * vb
        elif op == "div":
            out = va / vb
        else:  # pragma: no cover
            raise ValueError(op)
        return self._push(op, out, (a.idx, b.idx))

    def _unary(self, op: str, a: Node, extra=None) -> Node:
        v = self.values[a.idx]
        if op == "neg":
            out = -v
        elif op == "log":
            out = np.log(v)
        elif op == "exp":
            out = np.exp(v)
        elif op == "square":
            out = v * v
        elif op == "softplus":
            out = np.logaddexp(0.0, v)
        elif op == "relu":
            out = np.maximum(v, 0.0)
        elif op == "tanh":
            out = np.tanh(v)
        elif op == "lgamma":
            out = _sp.gammaln(v)
        elif op == "digamma":
            out = _sp.psi(v)
        elif op == "sum":
            out = np.asarray(v.sum())
        else:  # pragma: no cover
            raise ValueError(op)
        return self._push(op, out, (a.idx,), extra)

    def log(self, a: Node) -> Node:
        return self._unary("log", a)

    def exp(self, a: Node) -> Node:
        return self._unary("exp", a)

    def square(self, a: Node) -> Node:
        return self._unary("square", a)

    def softplus(self, a: Node) -> Node:
        return self._unary("softplus", a)

    def relu(self, a: Node) -> Node:
        return self._unary("relu", a)

    def tanh(self, a: Node) -> Node:
        return self._unary("tanh", a)

    def lgamma(self, a: Node) -> Node:
        return self._unary("lgamma", a)

    def digamma(self, a: Node) -> Node:
        return self._unary("digamma", a)

    def sum(self, a: Node) -> Node:
        return self._unary("sum", a)

    def sum_rows(self, a: Node) -> Node:
        """Row sums of a (batch, n) matrix, kept as a (batch, 1) column."""
        v = self.values[a.idx]
        if v.ndim != 2:
            raise ValueError("sum_rows expects a 2-d array")
        return self._push("sum_rows", v.sum(axis=1, keepdims=True), (a.idx,))

    def broadcast_cols(self, a: Node, n: int) -> Node:
        """Repeat a (batch, 1) column across n columns."""
        v = self.values[a.idx]
        if v.ndim != 2 or v.shape[1] != 1:
            raise ValueError("broadcast_cols expects a (batch, 1) column")
        return self._push("broadcast_cols", np.repeat(v, n, axis=1), (a.idx,))

    def dot(self, x: Node, w: Node) -> Node:
        """x @ w for x a vector or a (batch, in) matrix, w an (in, out) matrix."""
        return self._push("dot", self.values[x.idx] @ self.values[w.idx], (x.idx, w.idx))

    def add_bias(self, y: Node, b: Node) -> Node:
        """Add a bias vector to a vector or to every row of a matrix."""
        return self._push("add_bias", self.values[y.idx] + self.values[b.idx], (y.idx, b.idx))

    def clamp(self, a: Node, lo: float, hi: float) -> Node:
        v = self.values[a.idx]
        out = np.clip(v, lo, hi)
        mask = ((v > lo) & (v < hi)).astype(np.float64)
        return self._push("clamp", out, (a.idx,), mask)

    def concat(self, parts: list[Node]) -> Node:
        vals = [self.values[p.idx] for p in parts]
        widths = [v.shape[-1] for v in vals]
        out = np.concatenate(vals, axis=-1)
        return self._push("concat", out, tuple(p.idx for p in parts), widths)

    def slice_cols(self, a: Node, start: int, stop: int) -> Node:
        v = self.values[a.idx]
        return self._push("slice", np.ascontiguousarray(v[..., start:stop]), (a.idx,), (start, stop))

    def softmax_cross_entropy(self, logits: Node, onehot: np.ndarray) -> Node:
        """Total (not mean) cross entropy between row-wise softmax(logits)
        and one-hot targets, computed with the max-shift trick."""
        v = self.values[logits.idx]
        onehot = np.asarray(onehot, dtype=np.float64)
        if v.shape != onehot.shape:
            raise ValueError("logits and onehot targets must have equal shapes")
        shifted = v - v.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_softmax = shifted - logz
        out = np.asarray(-(onehot * log_softmax).sum())
        softmax = np.exp(log_softmax)
        return self._push("softmax_ce", out, (logits.idx,), (softmax, onehot))

    # -- backward ------------------------------------------------------------

    def _first_nonfinite(self) -> int:
        for i, v in enumerate(self.values):
            if not np.all(np.isfinite(v)):
                return i
        return -1

    def backward(self, out: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar node with respect to every registered
        parameter. Raises if the output is not scalar or not finite."""
        if self.values[out.idx].ndim != 0:
            raise ValueError("backward requires a scalar output node")
        if not np.isfinite(self.values[out.idx]):
            i = self._first_nonfinite()
            raise FloatingPointError(
                f"non-finite value encountered at node {i} (op '{self.ops[i]}')"
            )

        grads: list = [None] * len(self.values)
        grads[out.idx] = np.asarray(1.0)

        def acc(i: int, g):
            if grads[i] is None:
                grads[i] = np.zeros_like(self.values[i])
            # reduce over the batch when the stored value is a scalar
            if self.values[i].ndim == 0 and np.ndim(g) != 0:
                g = g.sum()
            grads[i] = grads[i] + g

        for i in range(out.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            op = self.ops[i]
            if op in ("const", "param"):
                continue
            a = self.args[i]
            if op == "add":
                acc(a[0], g)
                acc(a[1], g)
            elif op == "sub":
                acc(a[0], g)
                acc(a[1], -g)
            elif op == "mul":
                acc(a[0], g * self.values[a[1]])
                acc(a[1], g * self.values[a[0]])
            elif op == "div":
                vb = self.values[a[1]]
                acc(a[0], g / vb)
                acc(a[1], -g * self.values[a[0]] / (vb * vb))
            elif op == "neg":
                acc(a[0], -g)
            elif op == "log":
                acc(a[0], g / self.values[a[0]])
            elif op == "exp":
                acc(a[0], g * self.values[i])
            elif op == "square":
                acc(a[0], 2.0 * g * self.values[a[0]])
            elif op == "softplus":
                acc(a[0], g * _sp.expit(self.values[a[0]]))
            elif op == "relu":
                acc(a[0], g * (self.values[a[0]] > 0.0))
            elif op == "tanh":
                t = self.values[i]
                acc(a[0], g * (1.0 - t * t))
            elif op == "lgamma":
                acc(a[0], g * _sp.psi(self.values[a[0]]))
            elif op == "digamma":
                acc(a[0], g * _sp.polygamma(1, self.values[a[0]]))
            elif op == "sum":
                acc(a[0], np.broadcast_to(g, self.values[a[0]].shape))
            elif op == "sum_rows":
                acc(a[0], np.broadcast_to(g, self.values[a[0]].shape))
            elif op == "broadcast_cols":
                acc(a[0], g.sum(axis=1, keepdims=True))
            elif op == "dot":
                x, w = self.values[a[0]], self.values[a[1]]
                if x.ndim == 1:
                    acc(a[0], g @ w.T)
                    acc(a[1], np.outer(x, g))
                else:
                    acc(a[0], g @ w.T)
                    acc(a[1], x.T @ g)
            elif op == "add_bias":
                acc(a[0], g)
                y = self.values[a[0]]
                acc(a[1], g.sum(axis=0) if y.ndim == 2 else g)
            elif op == "clamp":
                acc(a[0], g * self.extras[i])
            elif op == "concat":
                ofs = 0
                for j, w in zip(a, self.extras[i]):
                    acc(j, np.ascontiguousarray(g[..., ofs : ofs + w]))
                    ofs += w
            elif op == "slice":
                start, stop = self.extras[i]
                gin = np.zeros_like(self.values[a[0]])
                gin[..., start:stop] = g
                acc(a[0], gin)
            elif op == "softmax_ce":
                softmax, onehot = self.extras[i]
                acc(a[0], g * (softmax - onehot))
            else:  # pragma: no cover
                raise ValueError(op)

        return {
            name: (grads[idx] if grads[idx] is not None else np.zeros_like(self.values[idx]))
            for name, idx in self.parameters.items()
        }


# ---------------------------------------------------------------------------
# dense networks
# ---------------------------------------------------------------------------

_HIDDEN_ACTS = ("relu", "softplus", "tanh")
_OUTPUT_ACTS = ("identity", "softplus_eps")

SOFTPLUS_EPS = 1e-4


class DenseNet:
    """Fully connected network with a fixed activation per hidden layer.

    Weights are (fan_in, fan_out) with uniform +-sqrt(6/(fan_in+fan_out))
    init and zero biases; ``output='softplus_eps'`` adds softplus(x)+1e-4
    for strictly positive outputs.
    """

    def __init__(
        self,
        name: str,
        sizes: list[int],
        hidden: str = "relu",
        output: str = "identity",
        rng: np.random.Generator | None = None,
        output_bias: float = 0.0,
    ):
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("sizes must list at least input and output dims")
        if hidden not in _HIDDEN_ACTS:
            raise ValueError(f"hidden activation must be one of {_HIDDEN_ACTS}")
        if output not in _OUTPUT_ACTS:
            raise ValueError(f"output activation must be one of {_OUTPUT_ACTS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.sizes = list(sizes)
        self.hidden = hidden
        self.output = output
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        if output_bias != 0.0:
            self.biases[-1] += output_bias

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.W{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = np.array(params[f"{self.name}.W{i}"], dtype=np.float64)
            self.biases[i] = np.array(params[f"{self.name}.b{i}"], dtype=np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def _activate_np(self, x: np.ndarray) -> np.ndarray:
        if self.hidden == "relu":
            return np.maximum(x, 0.0)
        if self.hidden == "softplus":
            return np.logaddexp(0.0, x)
        return np.tanh(x)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass (no tape); accepts a vector or a
        (batch, in) matrix. Bit-identical to the taped forward."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = self._activate_np(h)
        if self.output == "softplus_eps":
            h = np.logaddexp(0.0, h) + SOFTPLUS_EPS
        return h

    def forward(self, tape: Tape, x: Node) -> Node:
        h = x
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            w = tape.param(f"{self.name}.W{i}", self.weights[i])
            b = tape.param(f"{self.name}.b{i}", self.biases[i])
            h = tape.add_bias(tape.dot(h, w), b)
            if i < last:
                h = getattr(tape, self.hidden)(h)
        if self.output == "softplus_eps":
            h = tape.softplus(h) + SOFTPLUS_EPS
        return h


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Optimizer:
    """SGD or bias-corrected Adam over a named parameter dict; updates
    the registered arrays in place."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        kind: str = "adam",
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if kind not in ("sgd", "adam"):
            raise ValueError("kind must be 'sgd' or 'adam'")
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        self.kind = kind
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.params = params
        self.t = 0
        if kind == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            if self.kind == "sgd":
                p -= self.lr * g
            else:
                m = self.m[name]
                v = self.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                mhat = m / (1.0 - self.beta1**self.t)
                vhat = v / (1.0 - self.beta2**self.t)
                p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def optimizer_step(opt: Optimizer, grads: dict[str, np.ndarray]) -> None:
    """Functional alias for Optimizer.step."""
    opt.step(grads)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    worst: tuple[str, int]

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def gradient_check(
    build_loss,
    params: dict[str, np.ndarray],
    h: float = 1e-4,
    tol: float = 1e-4,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``build_loss(tape, params)`` must register each parameter with
    ``tape.param(name, params[name])`` and return a scalar node. When
    ``n_coords`` is given, that many coordinates are sampled at random
    instead of sweeping every entry (needed for large networks).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    out = build_loss(tape, params)
    grads = tape.backward(out)

    coords = [(name, i) for name, v in params.items() for i in range(v.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[int(i)] for i in picks]

    def eval_at(p):
        t = Tape()
        return t.values[build_loss(t, p).idx].item()

    max_err = 0.0
    worst = ("", -1)
    for name, i in coords:
        plus = {k: v.copy() for k, v in params.items()}
        minus = {k: v.copy() for k, v in params.items()}
        plus[name].flat[i] += h
        minus[name].flat[i] -= h
        fd = (eval_at(plus) - eval_at(minus)) / (2.0 * h)
        ad = grads[name].flat[i]
        denom = max(abs(ad), abs(fd))
        err = abs(ad - fd) if denom < 1e-8 else abs(ad - fd) / denom
        if err > max_err:
            max_err = err
            worst = (name, i)
    return GradCheckReport(max_rel_err=max_err, tol=tol, n_checked=len(coords), worst=worst)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors as a JSON header (names + shapes, sorted) followed by
    little-endian float64 payload. Round-trips bit-exactly."""
    names = sorted(tensors)
    header = json.dumps(
        {"tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names]}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise ValueError("truncated checkpoint: missing header length")
        (hlen,) = struct.unpack("<Q", raw)
        header = fh.read(hlen)
        if len(header) != hlen:
            raise ValueError("truncated checkpoint: incomplete header")
        meta = json.loads(header.decode("utf-8"))
        out = {}
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"truncated checkpoint: tensor {entry['name']}")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return out
