"""Dense float64 tensors plus a replayable reverse-mode autodiff tape.

A :class:`ComputationTape` records a fixed program over named nodes. Bind
concrete arrays with :func:`forward` to obtain a :class:`TapeRun`, then pull
gradients for every trainable input out of :func:`backward`. The same tape can
be replayed with fresh bindings any number of times and is safe to share
across threads once built; all per-run state lives on the TapeRun.

Also home to the Adam optimizer state/step and inverted dropout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "glorot_uniform",
    "Tensor",
    "ComputationTape",
    "TapeRun",
    "AdamState",
    "GradCheckReport",
    "ShapeError",
    "NonFiniteError",
    "TapeStateError",
    "forward",
    "backward",
    "grad_check",
    "adam_step",
    "dropout",
    "dropout_mask",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NonFiniteError(ArithmeticError):
    """A value or intermediate overflowed to NaN/Inf."""


class TapeStateError(RuntimeError):
    """Tape or run used out of order (build after freeze, backward without forward)."""


def _as_array(values, *, context: str = "tensor") -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError(f"{context}: empty extents are not allowed")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{context}: values must be finite")
    return arr


class Tensor:
    """Immutable float64 array. NaN/Inf are rejected at construction."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = _as_array(values)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


@dataclass(frozen=True)
class _Op:
    kind: str
    inputs: tuple[str, ...]
    output: str
    attrs: tuple = ()

    def label(self) -> str:
        return f"{self.kind}->{self.output}"


def _check_2d(op: _Op, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.ndim != 2:
            raise ShapeError(f"{op.label()}: expected 2-D operands, got shape {a.shape}")


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    # full shape match, or b is a bias row (1,d) / bias column (n,1)
    if a.shape == b.shape:
        return True
    if b.shape == (1, a.shape[1]) or b.shape == (a.shape[0], 1):
        return True
    return False


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1:
        return grad.sum(axis=0, keepdims=True)
    return grad.sum(axis=1, keepdims=True)


def _fwd_matmul(op, a, b):
    _check_2d(op, a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"{op.label()}: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _bwd_matmul(op, g, ins, out):
    a, b = ins
    return [g @ b.T, a.T @ g]


def _fwd_add(op, a, b):
    _check_2d(op, a, b)
    if not _broadcast_ok(a, b):
        raise ShapeError(f"{op.label()}: cannot add {b.shape} to {a.shape}")
    return a + b


def _bwd_add(op, g, ins, out):
    a, b = ins
    return [g, _reduce_to(g, b.shape)]


def _fwd_mul(op, a, b):
    _check_2d(op, a, b)
    if not _broadcast_ok(a, b):
        raise ShapeError(f"{op.label()}: cannot multiply {a.shape} with {b.shape}")
    return a * b


def _bwd_mul(op, g, ins, out):
    a, b = ins
    return [g * b, _reduce_to(g * a, b.shape)]


def _fwd_scale(op, a):
    return a * op.attrs[0]


def _bwd_scale(op, g, ins, out):
    return [g * op.attrs[0]]


def _fwd_relu(op, a):
    return np.maximum(a, 0.0)


def _bwd_relu(op, g, ins, out):
    return [g * (ins[0] > 0.0)]


def _fwd_exp(op, a):
    return np.exp(a)


def _bwd_exp(op, g, ins, out):
    return [g * out]


def _fwd_log(op, a):
    return np.log(a)


def _bwd_log(op, g, ins, out):
    return [g / ins[0]]


def _fwd_square(op, a):
    return a * a


def _bwd_square(op, g, ins, out):
    return [2.0 * ins[0] * g]


def _fwd_softmax(op, a):
    _check_2d(op, a)
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _bwd_softmax(op, g, ins, out):
    s = out
    return [s * (g - (g * s).sum(axis=1, keepdims=True))]


def _fwd_sum(op, a):
    return np.array([[a.sum()]])


def _bwd_sum(op, g, ins, out):
    return [np.full_like(ins[0], float(g.reshape(-1)[0]))]


def _fwd_average(op, *arrays):
    first = arrays[0]
    for a in arrays[1:]:
        if a.shape != first.shape:
            raise ShapeError(f"{op.label()}: averaged shapes differ: {first.shape} vs {a.shape}")
    return sum(arrays) / len(arrays)


def _bwd_average(op, g, ins, out):
    share = g / len(ins)
    return [share for _ in ins]


def _fwd_concat(op, *arrays):
    _check_2d(op, *arrays)
    rows = arrays[0].shape[0]
    for a in arrays[1:]:
        if a.shape[0] != rows:
            raise ShapeError(f"{op.label()}: row counts differ for concat")
    return np.concatenate(arrays, axis=1)


def _bwd_concat(op, g, ins, out):
    grads = []
    start = 0
    for a in ins:
        grads.append(g[:, start : start + a.shape[1]])
        start += a.shape[1]
    return grads


def _fwd_masked_logsumexp(op, v, mask):
    # out_i = log sum_j mask_ij * exp(v_j), computed with max-subtraction.
    _check_2d(op, v, mask)
    if v.shape[1] != 1 or mask.shape[1] != v.shape[0]:
        raise ShapeError(
            f"{op.label()}: need values (n,1) and mask (m,n), got {v.shape} and {mask.shape}"
        )
    if (mask.sum(axis=1) == 0).any():
        raise ShapeError(f"{op.label()}: every mask row must select at least one entry")
    vt = v.reshape(1, -1)
    c = np.where(mask > 0, vt, -np.inf).max(axis=1, keepdims=True)
    s = (mask * np.exp(vt - c)).sum(axis=1, keepdims=True)
    return c + np.log(s)


def _bwd_masked_logsumexp(op, g, ins, out):
    v, mask = ins
    w = mask * np.exp(v.reshape(1, -1) - out)  # softmax weights over each mask row
    return [w.T @ g, None]


_OPS = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "add": (_fwd_add, _bwd_add),
    "mul": (_fwd_mul, _bwd_mul),
    "scale": (_fwd_scale, _bwd_scale),
    "relu": (_fwd_relu, _bwd_relu),
    "exp": (_fwd_exp, _bwd_exp),
    "log": (_fwd_log, _bwd_log),
    "square": (_fwd_square, _bwd_square),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "sum": (_fwd_sum, _bwd_sum),
    "average": (_fwd_average, _bwd_average),
    "concat": (_fwd_concat, _bwd_concat),
    "masked_logsumexp": (_fwd_masked_logsumexp, _bwd_masked_logsumexp),
}


class ComputationTape:
    """Ordered, acyclic record of primitive ops over named nodes.

    Build once (inputs, ops, outputs), then replay with :func:`forward`. The
    first forward freezes the tape; further building raises TapeStateError.
    """

    def __init__(self):
        self._nodes: set[str] = set()
        self.input_names: dict[str, bool] = {}  # name -> trainable
        self.ops: list[_Op] = []
        self.output_names: list[str] = []
        self._frozen = False
        self._counter = 0

    # -- construction -------------------------------------------------------

    def _claim(self, name: str | None, kind: str) -> str:
        if self._frozen:
            raise TapeStateError("tape is frozen after its first forward")
        if name is None:
            name = f"{kind}_{self._counter}"
            self._counter += 1
        if name in self._nodes:
            raise ValueError(f"duplicate node name {name!r}")
        self._nodes.add(name)
        return name

    def input(self, name: str, trainable: bool = False) -> str:
        name = self._claim(name, "input")
        self.input_names[name] = trainable
        return name

    def _append(self, kind: str, inputs: tuple[str, ...], name: str | None, attrs: tuple = ()) -> str:
        for ref in inputs:
            if ref not in self._nodes:
                raise ValueError(f"op {kind} references unknown node {ref!r}")
        out = self._claim(name, kind)
        self.ops.append(_Op(kind, inputs, out, attrs))
        return out

    def matmul(self, a: str, b: str, name: str | None = None) -> str:
        return self._append("matmul", (a, b), name)

    def add(self, a: str, b: str, name: str | None = None) -> str:
        return self._append("add", (a, b), name)

    def mul(self, a: str, b: str, name: str | None = None) -> str:
        return self._append("mul", (a, b), name)

    def scale(self, a: str, factor: float, name: str | None = None) -> str:
        return self._append("scale", (a,), name, attrs=(float(factor),))

    def relu(self, a: str, name: str | None = None) -> str:
        return self._append("relu", (a,), name)

    def exp(self, a: str, name: str | None = None) -> str:
        return self._append("exp", (a,), name)

    def log(self, a: str, name: str | None = None) -> str:
        return self._append("log", (a,), name)

    def square(self, a: str, name: str | None = None) -> str:
        return self._append("square", (a,), name)

    def softmax(self, a: str, name: str | None = None) -> str:
        return self._append("softmax", (a,), name)

    def sum(self, a: str, name: str | None = None) -> str:
        return self._append("sum", (a,), name)

    def average(self, nodes: list[str], name: str | None = None) -> str:
        if not nodes:
            raise ValueError("average needs at least one node")
        return self._append("average", tuple(nodes), name)

    def concat(self, nodes: list[str], name: str | None = None) -> str:
        if not nodes:
            raise ValueError("concat needs at least one node")
        return self._append("concat", tuple(nodes), name)

    def masked_logsumexp(self, values: str, mask: str, name: str | None = None) -> str:
        return self._append("masked_logsumexp", (values, mask), name)

    def output(self, name: str) -> str:
        if name not in self._nodes:
            raise ValueError(f"cannot mark unknown node {name!r} as output")
        if name not in self.output_names:
            self.output_names.append(name)
        return name

    @property
    def trainable_names(self) -> list[str]:
        return [n for n, t in self.input_names.items() if t]


class TapeRun:
    """One executed forward pass: intermediate values retained for backward."""

    def __init__(self, tape: ComputationTape, values: dict[str, np.ndarray]):
        self.tape = tape
        self.values = values

    def __getitem__(self, name: str) -> Tensor:
        return Tensor(self.values[name])

    def array(self, name: str) -> np.ndarray:
        return self.values[name]

    @property
    def outputs(self) -> dict[str, Tensor]:
        return {name: Tensor(self.values[name]) for name in self.tape.output_names}


def forward(tape: ComputationTape, inputs: dict) -> TapeRun:
    """Execute the tape with the given input bindings.

    Every tape input must be bound (Tensor or array-like); unknown keys are
    rejected. Shape mismatches raise ShapeError naming the op; a non-finite
    intermediate raises NonFiniteError.
    """
    tape._frozen = True
    missing = set(tape.input_names) - set(inputs)
    if missing:
        raise ValueError(f"unbound tape inputs: {sorted(missing)}")
    unknown = set(inputs) - set(tape.input_names)
    if unknown:
        raise ValueError(f"not tape inputs: {sorted(unknown)}")

    values: dict[str, np.ndarray] = {}
    for name, bound in inputs.items():
        arr = bound.values if isinstance(bound, Tensor) else _as_array(bound, context=f"input {name!r}")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        values[name] = np.asarray(arr, dtype=np.float64)

    # overflow/invalid surface as NonFiniteError below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for op in tape.ops:
            fwd = _OPS[op.kind][0]
            out = fwd(op, *(values[n] for n in op.inputs))
            if not np.isfinite(out).all():
                raise NonFiniteError(f"non-finite intermediate at op {op.label()}")
            values[op.output] = out
    return TapeRun(tape, values)


def backward(run, seed_output: str):
    """Reverse sweep from a scalar output; returns gradients for trainable inputs."""
    if isinstance(run, ComputationTape):
        raise TapeStateError("backward needs a TapeRun; call forward first")
    tape = run.tape
    if seed_output not in run.values:
        raise ValueError(f"unknown seed output {seed_output!r}")
    seed_val = run.values[seed_output]
    if seed_val.size != 1:
        raise ValueError(f"seed output {seed_output!r} is not scalar (shape {seed_val.shape})")

    grads: dict[str, np.ndarray] = {seed_output: np.ones_like(seed_val)}
    for op in reversed(tape.ops):
        g = grads.pop(op.output, None)
        if g is None:
            continue
        bwd = _OPS[op.kind][1]
        ins = [run.values[n] for n in op.inputs]
        for name, gi in zip(op.inputs, bwd(op, g, ins, run.values[op.output])):
            if gi is None:
                continue
            if name in grads:
                grads[name] = grads[name] + gi
            else:
                grads[name] = gi
    out = {}
    for name in tape.trainable_names:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(run.values[name])
        out[name] = Tensor(g)
    return out


@dataclass
class GradCheckReport:
    """Per-parameter comparison of backward gradients to central differences."""

    tolerance: float
    rel_errors: dict[str, np.ndarray] = field(default_factory=dict)
    passed: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(p.all() for p in self.passed.values())

    def max_rel_error(self) -> float:
        return max((float(e.max()) for e in self.rel_errors.values()), default=0.0)


def grad_check(
    tape: ComputationTape,
    inputs: dict,
    tolerance: float,
    output: str | None = None,
    step: float = 1e-5,
) -> GradCheckReport:
    """Check every trainable input's gradient against central finite differences.

    Relative error per element is |ad - fd| / max(|ad|, |fd|, 1); the floor
    keeps finite-difference round-off from flagging near-zero gradients.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if output is None:
        if len(tape.output_names) != 1:
            raise ValueError("ambiguous output; pass output= explicitly")
        output = tape.output_names[0]

    base = {k: (v.values if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)) for k, v in inputs.items()}
    run = forward(tape, base)
    ad = {k: v.values for k, v in backward(run, output).items()}

    report = GradCheckReport(tolerance=tolerance)
    for name in tape.trainable_names:
        ref = base[name]
        fd = np.zeros_like(ad[name])
        flat = fd.reshape(-1)
        for i in range(ref.size):
            bumped = dict(base)
            plus = ref.copy().reshape(-1)
            plus[i] += step
            bumped[name] = plus.reshape(ref.shape)
            f_plus = forward(tape, bumped).array(output).reshape(-1)[0]
            minus = ref.copy().reshape(-1)
            minus[i] -= step
            bumped[name] = minus.reshape(ref.shape)
            f_minus = forward(tape, bumped).array(output).reshape(-1)[0]
            flat[i] = (f_plus - f_minus) / (2.0 * step)
        fd = fd.reshape(ad[name].shape)
        denom = np.maximum(np.maximum(np.abs(ad[name]), np.abs(fd)), 1.0)
        rel = np.abs(ad[name] - fd) / denom
        report.rel_errors[name] = rel
        report.passed[name] = rel <= tolerance
    return report


@dataclass
class AdamState:
    """Adam moments and step counter; hyperparameters ride along."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update. Returns (new params, new state)."""
    t = state.step + 1
    new_m, new_v, new_params = {}, {}, {}
    for name, p in params.items():
        p_arr = p.values if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        g = grads[name]
        g_arr = g.values if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g_arr.shape != p_arr.shape:
            raise ShapeError(f"gradient shape {g_arr.shape} != param shape {p_arr.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(p_arr))
        v = state.v.get(name, np.zeros_like(p_arr))
        if m.shape != p_arr.shape:
            raise ShapeError(f"moment shape {m.shape} != param shape {p_arr.shape} for {name!r}")
        m = state.beta1 * m + (1.0 - state.beta1) * g_arr
        v = state.beta2 * v + (1.0 - state.beta2) * g_arr * g_arr
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_params[name] = Tensor(p_arr - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m[name], new_v[name] = m, v
    next_state = AdamState(
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
        step=t,
        m=new_m,
        v=new_v,
    )
    return new_params, next_state


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Glorot/Xavier uniform init: +-sqrt(6 / (fan_in + fan_out)) for a 2-D shape."""
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def dropout_mask(shape: tuple[int, ...], rate: float, rng_seed) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate), deterministic per seed."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate: float, rng_seed, training: bool) -> Tensor:
    """Inverted dropout. Identity in eval mode; survivors scaled by 1/(1-rate)."""
    arr = x.values if isinstance(x, Tensor) else _as_array(x, context="dropout input")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return Tensor(arr)
    return Tensor(arr * dropout_mask(arr.shape, rate, rng_seed))
