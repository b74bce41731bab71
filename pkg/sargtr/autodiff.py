'''Dense double-precision tensors with tape-recorded reverse-mode differentiation.

Every op takes Tensors that live on the same Tape, computes its numpy value
and, when any input requires a gradient, appends a record holding a closure
that maps the output gradient to input gradients. backward() replays the
records in reverse.

    tape = Tape()
    w = tape.param("w", np.ones((3, 2)))
    x = tape.constant(np.arange(6.0).reshape(2, 3))
    loss = sum_all(matmul(x, w))
    grads = backward(tape, loss)   # {"w": ...}
'''
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import GradientException, ShapeMismatchException, ValidationException
from .schema import GradCheckReport, ParamCheck

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
# finite differences at h = 1e-5 carry ~1e-10 absolute noise
GRAD_CHECK_FLOOR = 1e-6


class Tensor:
    '''A value on a tape. Leaves are created through Tape.param / Tape.constant.'''
    __slots__ = ("tape", "id", "data", "requires_grad", "name")

    def __init__(self, tape: "Tape", node_id: int, data: np.ndarray, requires_grad: bool, name: str = None):
        self.tape = tape
        self.id = node_id
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(id={self.id}{label}, shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    '''Ordered record of operations. Single-threaded while recording and during backward.'''

    def __init__(self):
        self._next_id = 0
        self._records: List[Tuple[Tensor, Sequence[Tensor], Callable]] = []
        self.params: Dict[str, Tensor] = {}

    def __len__(self):
        return len(self._records)

    def _new(self, data: np.ndarray, requires_grad: bool, name: str = None) -> Tensor:
        tensor = Tensor(self, self._next_id, data, requires_grad, name)
        self._next_id += 1
        return tensor

    def param(self, name: str, data) -> Tensor:
        '''A trainable leaf; backward returns its gradient under name.'''
        if name in self.params:
            raise ValidationException(f"Parameter {name!r} is already on this tape.")
        tensor = self._new(np.array(data, dtype=np.float64), True, name)
        self.params[name] = tensor
        return tensor

    def constant(self, data, name: str = None) -> Tensor:
        return self._new(np.asarray(data, dtype=np.float64), False, name)

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise ValidationException("All inputs of an op must live on the same tape.")
        requires_grad = any(t.requires_grad for t in inputs)
        out = self._new(data, requires_grad)
        if requires_grad:
            self._records.append((out, tuple(inputs), grad_fn))
        return out


class SegmentIndex:
    '''
    Groups rows (directed edges i->j) by their segment (center node j).

    Args:
        ids (np.ndarray): segment id per row
        num_segments (int): number of segments K; every id must lie in [0, K)
    '''

    def __init__(self, ids, num_segments: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeMismatchException("Segment ids must be one-dimensional.")
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise ShapeMismatchException(f"Segment id out of range [0, {num_segments}).")
        self.ids = ids
        self.num_segments = int(num_segments)

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.ids, minlength=self.num_segments)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchException(f"{op}: shapes {a.shape} and {b.shape} do not broadcast.")


def _check_segments(x: Tensor, segments: SegmentIndex, op: str):
    if x.data.ndim < 1 or x.shape[0] != len(segments):
        raise ShapeMismatchException(f"{op}: {x.shape[0] if x.data.ndim else 0} rows for {len(segments)} segment ids.")


#######
# Ops #
#######

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchException(f"matmul: cannot multiply {a.shape} by {b.shape}.")
    x, y = a.data, b.data

    def grad_fn(g):
        return g @ y.T, x.T @ g

    return a.tape.record(x @ y, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a.tape.record(a.data + b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    '''Elementwise product with numpy broadcasting, e.g. (E, 1) attention times (E, d) values.'''
    _broadcast_shape(a, b, "mul")
    x, y = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return a.tape.record(x * y, (a, b), grad_fn)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape.record(a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    '''Concatenate along the last axis.'''
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatchException("concat: nothing to concatenate.")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeMismatchException(f"concat: leading shapes differ ({t.shape} vs {tensors[0].shape}).")
    widths = [t.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=-1))

    return tensors[0].tape.record(np.concatenate([t.data for t in tensors], axis=-1), tensors, grad_fn)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    scale = np.where(x > 0, 1.0, slope)
    return a.tape.record(x * scale, (a,), lambda g: (g * scale,))


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return a.tape.record(a.data * mask, (a,), lambda g: (g * mask,))


def embedding_lookup(matrix: Tensor, index) -> Tensor:
    '''Rows of matrix picked by an integer index array; also used as a row gather.'''
    index = np.asarray(index, dtype=np.int64)
    rows = matrix.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise ShapeMismatchException(f"embedding_lookup: index out of range [0, {rows}).")
    shape = matrix.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return matrix.tape.record(matrix.data[index], (matrix,), grad_fn)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = DEFAULT_EPS) -> Tensor:
    '''Normalise over the last axis, then apply the optional gain and bias.'''
    if eps <= 0:
        raise ValidationException(f"layer_norm eps must be positive, got {eps}.")
    width = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (width,):
            raise ShapeMismatchException(f"layer_norm: affine shape {p.shape} does not match width {width}.")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    inputs = [x] + [p for p in (gamma, beta) if p is not None]

    def grad_fn(g):
        d_hat = g * gamma.data if gamma is not None else g
        dx = inv_std / width * (width * d_hat
                                - d_hat.sum(axis=-1, keepdims=True)
                                - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True))
        grads = [dx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * x_hat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return x.tape.record(out, inputs, grad_fn)


def segment_softmax(logits: Tensor, segments: SegmentIndex) -> Tensor:
    '''Softmax over the rows sharing a segment id, independently per trailing column.'''
    _check_segments(logits, segments, "segment_softmax")
    ids = segments.ids
    x = logits.data
    peak = np.full((segments.num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(peak, ids, x)
    e = np.exp(x - peak[ids])
    total = np.zeros_like(peak)
    np.add.at(total, ids, e)
    y = e / total[ids]

    def grad_fn(g):
        gy = g * y
        s = np.zeros_like(peak)
        np.add.at(s, ids, gy)
        return (gy - y * s[ids],)

    return logits.tape.record(y, (logits,), grad_fn)


def segment_sum(values: Tensor, segments: SegmentIndex) -> Tensor:
    _check_segments(values, segments, "segment_sum")
    ids = segments.ids
    out = np.zeros((segments.num_segments,) + values.shape[1:])
    np.add.at(out, ids, values.data)
    return values.tape.record(out, (values,), lambda g: (g[ids],))


def segment_mean(values: Tensor, segments: SegmentIndex) -> Tensor:
    counts = segments.counts.astype(np.float64)
    if np.any(counts == 0):
        raise ShapeMismatchException("segment_mean: empty segment.")
    inv = 1.0 / counts.reshape((-1,) + (1,) * (values.data.ndim - 1))
    return mul(segment_sum(values, segments), values.tape.constant(inv))


def row_sum(a: Tensor) -> Tensor:
    '''Sum over the last axis, keeping it as width 1.'''
    return a.tape.record(a.data.sum(axis=-1, keepdims=True), (a,),
                         lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_all(a: Tensor) -> Tensor:
    return a.tape.record(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchException(f"reshape: cannot view {original} as {shape}.")
    return a.tape.record(out, (a,), lambda g: (g.reshape(original),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    '''Mean softmax cross entropy. logits is (C,) with a single label or (B, C) with B labels.'''
    x = logits.data
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2:
        raise ShapeMismatchException(f"cross_entropy: logits must be 1-D or 2-D, got {x.shape}.")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (x2.shape[0],):
        raise ShapeMismatchException(f"cross_entropy: {labels.shape[0]} labels for {x2.shape[0]} rows.")
    if labels.min() < 0 or labels.max() >= x2.shape[1]:
        raise ValidationException(f"cross_entropy: label outside [0, {x2.shape[1]}).")

    rows = np.arange(x2.shape[0])
    shifted = x2 - x2.max(axis=1, keepdims=True)
    log_total = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(log_total - shifted[rows, labels])

    def grad_fn(g):
        p = np.exp(shifted - log_total[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g) / x2.shape[0])).reshape(x.shape),)

    return logits.tape.record(np.array(loss), (logits,), grad_fn)


############
# Backward #
############

def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    '''Reverse-mode gradients of a scalar loss for every trainable leaf on the tape.

    Args:
        tape (Tape): the tape the loss was recorded on
        loss (Tensor): a single-element output

    Returns:
        dict: parameter name to gradient array (zeros when the loss does not depend on it)
    '''
    if loss.tape is not tape:
        raise GradientException("The loss was not recorded on this tape.")
    if loss.data.size != 1:
        raise GradientException(f"backward needs a scalar loss, got shape {loss.shape}.")
    if not np.all(np.isfinite(loss.data)):
        raise GradientException(f"The loss is not finite ({float(loss.data.reshape(-1)[0])}).")

    grads = {loss.id: np.ones_like(loss.data)}
    for out, inputs, grad_fn in reversed(tape._records):
        g = grads.pop(out.id, None)
        if g is None:
            continue
        for t, gi in zip(inputs, grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            grads[t.id] = grads[t.id] + gi if t.id in grads else gi

    return {name: grads.get(t.id, np.zeros_like(t.data)) for name, t in tape.params.items()}


##############
# Grad check #
##############

LossFn = Callable[[Tape, Dict[str, Tensor]], Tensor]


def evaluate_loss(f: LossFn, params: Dict[str, np.ndarray]) -> float:
    tape = Tape()
    loss = f(tape, {name: tape.constant(value, name) for name, value in params.items()})
    return float(loss.data.reshape(-1)[0])


def grad_check(f: LossFn, params: Dict[str, np.ndarray], h: float = 1e-5, tol: float = 1e-5,
               entries: Optional[int] = None, seed: int = 0, floor: float = GRAD_CHECK_FLOOR) -> GradCheckReport:
    '''Compare tape gradients with central finite differences.

    Args:
        f: builds a scalar loss on the given tape from the given parameter tensors
        params (dict): parameter name to value; not modified
        h (float): finite-difference step, in [1e-7, 1e-3]
        tol (float): relative tolerance, applied to every checked entry
        entries (int, optional): perturb only this many seeded-random entries per tensor
        seed (int): seed for the entry sample
        floor (float): smallest denominator |g_ad| + |g_fd| of an entry's relative error

    Returns:
        GradCheckReport: one ParamCheck per tensor, holding its worst entry
    '''
    if not 1e-7 <= h <= 1e-3:
        raise ValidationException(f"grad_check step h must lie in [1e-7, 1e-3], got {h}.")
    work = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    tape = Tape()
    tensors = {name: tape.param(name, value) for name, value in work.items()}
    loss = f(tape, tensors)
    analytic = backward(tape, loss)

    first = float(loss.data.reshape(-1)[0])
    if evaluate_loss(f, work) != first or evaluate_loss(f, work) != first:
        raise GradientException("grad_check: two forward passes disagree, f is not deterministic.")

    rng = np.random.default_rng(seed)
    checks = []
    for name, value in work.items():
        flat = value.reshape(-1)
        if entries is None or entries >= flat.size:
            picked = np.arange(flat.size)
        else:
            picked = np.sort(rng.choice(flat.size, size=entries, replace=False))

        g_ad = analytic[name].reshape(-1)[picked]
        g_fd = np.empty(picked.size)
        for n, idx in enumerate(picked):
            saved = flat[idx]
            flat[idx] = saved + h
            plus = evaluate_loss(f, work)
            flat[idx] = saved - h
            minus = evaluate_loss(f, work)
            flat[idx] = saved
            g_fd[n] = (plus - minus) / (2.0 * h)

        if picked.size:
            scale = np.maximum(floor, np.abs(g_ad) + np.abs(g_fd))
            error = float(np.max(np.abs(g_ad - g_fd) / scale))
        else:
            error = 0.0
        if not math.isfinite(error):
            error = math.inf
        checks.append(ParamCheck(name, error, int(picked.size), error <= tol))
        logger.debug("grad_check %s: relative error %.3e over %d entries", name, error, picked.size)

    report = GradCheckReport(checks, tol, h)
    logger.info("grad_check over %d tensors: max relative error %.3e (%s)",
                len(checks), report.max_relative_error, "pass" if report.passed else "FAIL")
    return report
