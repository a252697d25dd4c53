"""Differentiable array operations used by every other module.

Arrays are ``torch.Tensor`` objects; reverse-mode differentiation is torch
autograd. What this module adds on top is shape validation with readable
diagnostics, a registry of operation kinds (``forward_op``), a strict
``backward`` helper and an independent central-difference ``gradcheck``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

Array = torch.Tensor


class ShapeError(ValueError):
    """Raised when an operation receives inputs of incompatible shapes."""

    def __init__(self, op: str, detail: str, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: {detail} (shapes: {shown})")
        self.op = op


def _shape(x) -> tuple:
    return tuple(x.shape)


# ---------------------------------------------------------------------------
# elementary operations


def matmul(a: Array, b: Array) -> Array:
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError("matmul", "operands must have at least one dim", a.shape, b.shape)
    ka = a.shape[-1]
    kb = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if ka != kb:
        raise ShapeError("matmul", f"inner extents differ ({ka} vs {kb})", a.shape, b.shape)
    try:
        return torch.matmul(a, b)
    except RuntimeError as err:
        raise ShapeError("matmul", "batch dims do not broadcast", a.shape, b.shape) from err


def linear(x: Array, weight: Array, bias: Array | None = None) -> Array:
    """``x @ weight.T + bias`` with weight laid out as (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError("linear", "input width differs from weight fan-in", x.shape, weight.shape)
    if bias is not None and bias.shape != weight.shape[:1]:
        raise ShapeError("linear", "bias must match fan-out", weight.shape, bias.shape)
    return F.linear(x, weight, bias)


def conv2d(x: Array, weight: Array, bias: Array | None = None, stride: int = 1,
           padding: int = 0) -> Array:
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError("conv2d", "expected NCHW input and OIHW weight", x.shape, weight.shape)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", "input channels differ from weight", x.shape, weight.shape)
    k_h, k_w = weight.shape[2:]
    if x.shape[2] + 2 * padding < k_h or x.shape[3] + 2 * padding < k_w:
        raise ShapeError("conv2d", "kernel larger than padded input", x.shape, weight.shape)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def max_pool2d(x: Array, kernel: int, stride: int | None = None) -> Array:
    if x.dim() != 4:
        raise ShapeError("max_pool2d", "expected NCHW input", x.shape)
    return F.max_pool2d(x, kernel, stride)


def add(a: Array, b: Array) -> Array:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as err:
        raise ShapeError("add", "operands do not broadcast", a.shape, b.shape) from err
    return a + b


def mul(a: Array, b: Array) -> Array:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as err:
        raise ShapeError("mul", "operands do not broadcast", a.shape, b.shape) from err
    return a * b


def broadcast(x: Array, shape: Sequence[int]) -> Array:
    try:
        return x.expand(*shape)
    except RuntimeError as err:
        raise ShapeError("broadcast", f"cannot expand to {tuple(shape)}", x.shape) from err


def concat(xs: Sequence[Array], dim: int = 0) -> Array:
    if not xs:
        raise ShapeError("concat", "nothing to concatenate")
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(ref, other)) if i != dim % len(ref)
        ):
            raise ShapeError("concat", f"non-concat dims differ (dim={dim})", *[t.shape for t in xs])
    return torch.cat(list(xs), dim=dim)


def slice_(x: Array, dim: int, start: int, stop: int) -> Array:
    n = x.shape[dim]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice", f"range [{start}, {stop}) outside extent {n} on dim {dim}", x.shape)
    return x.narrow(dim, start, stop - start)


def sum_(x: Array, dim=None, keepdim: bool = False) -> Array:
    return x.sum() if dim is None else x.sum(dim=dim, keepdim=keepdim)


def mean(x: Array, dim=None, keepdim: bool = False) -> Array:
    return x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)


def softmax(x: Array, dim: int = -1, mask: Array | None = None) -> Array:
    """Softmax along ``dim``; positions where ``mask`` is False get weight exactly 0."""
    if mask is not None:
        try:
            torch.broadcast_shapes(mask.shape, x.shape)
        except RuntimeError as err:
            raise ShapeError("softmax", "mask does not broadcast", x.shape, mask.shape) from err
        x = x.masked_fill(~mask, float("-inf"))
    return torch.softmax(x, dim=dim)


def sigmoid(x: Array) -> Array:
    return torch.sigmoid(x)


def gelu(x: Array) -> Array:
    return F.gelu(x)


def relu(x: Array) -> Array:
    return torch.relu(x)


def layer_norm(x: Array, weight: Array, bias: Array, eps: float = 1e-5) -> Array:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", "affine params must match last dim", x.shape, weight.shape, bias.shape)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def batch_norm(x: Array, running_mean: Array, running_var: Array, weight: Array,
               bias: Array, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Array:
    """Per-channel batch normalization over (N, H, W) for NCHW input.

    In training mode the running statistics are updated in place with an
    exponential moving average; in evaluation mode the op is a fixed
    per-channel affine map.
    """
    c = x.shape[1] if x.dim() > 1 else -1
    for name, t in (("running_mean", running_mean), ("running_var", running_var),
                    ("weight", weight), ("bias", bias)):
        if t.shape != (c,):
            raise ShapeError("batch_norm", f"{name} must have one entry per channel", x.shape, t.shape)
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


def sinusoidal_table(length: int, dim: int, dtype=torch.float32) -> Array:
    """Interleaved sin/cos positional table of shape (length, dim)."""
    if dim % 2:
        raise ShapeError("sinusoidal_table", "embedding width must be even", (length, dim))
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(dtype)


def embedding(ids: Array, table: Array) -> Array:
    """Row lookup ``table[ids]``; also used for positional tables."""
    if ids.dtype not in (torch.int64, torch.int32):
        raise ShapeError("embedding", f"ids must be integer, got {ids.dtype}", ids.shape)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError("embedding", "id out of table range", ids.shape, table.shape)
    return F.embedding(ids, table)


# ---------------------------------------------------------------------------
# registry

KINDS: dict[str, Callable[..., Array]] = {
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "add": add,
    "mul": mul,
    "broadcast": broadcast,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "relu": relu,
    "layer_norm": layer_norm,
    "batch_norm": batch_norm,
    "embedding": embedding,
}


def forward_op(kind: str, *inputs, **kwargs) -> Array:
    """Dispatch a registered operation by name."""
    try:
        fn = KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(loss: Array, params: Mapping[str, Array]) -> dict[str, Array]:
    """Gradients of a scalar ``loss`` for every named parameter.

    Parameters the loss does not depend on receive an explicit zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names],
                                allow_unused=True)
    return {n: torch.zeros_like(params[n]) if g is None else g
            for n, g in zip(names, grads)}


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(fn: Callable[[], Array], x: Array, h: float = 1e-5) -> Array:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``x``.

    ``x`` is perturbed in place and restored afterwards.
    """
    grad = torch.zeros_like(x)
    flat = x.detach().view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: Array, numeric: Array) -> float:
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)``.

    Both gradients vanishing counts as agreement.
    """
    scale = max(analytic.abs().max().item(), numeric.abs().max().item())
    diff = (analytic - numeric).abs().max().item()
    if scale == 0.0:
        return diff
    return diff / scale


@dataclass
class GradcheckReport:
    kind: str
    trials: int
    tolerance: float
    errors: list[float] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"{self.kind:<12} trials={self.trials:<3} "
                f"max_rel_err={self.max_error:.3e} tol={self.tolerance:.0e} {status}")


def _rand_shape(g: torch.Generator, ndim: int, lo: int = 1, hi: int = 4) -> list[int]:
    return torch.randint(lo, hi + 1, (ndim,), generator=g).tolist()


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_()


def _case(kind: str, g: torch.Generator):
    """Build (callable, differentiable inputs) for one random trial of ``kind``."""
    if kind == "matmul":
        m, k, n = _rand_shape(g, 3)
        a, b = _randn(g, m, k), _randn(g, k, n)
        return (lambda: matmul(a, b)), [a, b]
    if kind == "linear":
        m, i, o = _rand_shape(g, 3)
        x, w, b = _randn(g, m, i), _randn(g, o, i), _randn(g, o)
        return (lambda: linear(x, w, b)), [x, w, b]
    if kind == "conv2d":
        n, ci, co = _rand_shape(g, 3, 1, 3)
        side = int(torch.randint(3, 5, (1,), generator=g))
        k = int(torch.randint(1, 4, (1,), generator=g))
        stride = int(torch.randint(1, 3, (1,), generator=g))
        pad = int(torch.randint(0, 2, (1,), generator=g))
        x, w = _randn(g, n, ci, side, side), _randn(g, co, ci, k, k)
        return (lambda: conv2d(x, w, None, stride, pad)), [x, w]
    if kind == "max_pool2d":
        n, c = _rand_shape(g, 2, 1, 3)
        x = _randn(g, n, c, 4, 4)
        return (lambda: max_pool2d(x, 2)), [x]
    if kind in ("add", "mul"):
        shape = _rand_shape(g, 2)
        a = _randn(g, *shape)
        b = _randn(g, 1, shape[1])  # exercises broadcasting
        fn = add if kind == "add" else mul
        return (lambda: fn(a, b)), [a, b]
    if kind == "broadcast":
        r, c = _rand_shape(g, 2)
        x = _randn(g, 1, c)
        return (lambda: broadcast(x, (r, c))), [x]
    if kind == "concat":
        r1, r2, c = _rand_shape(g, 3)
        a, b = _randn(g, r1, c), _randn(g, r2, c)
        return (lambda: concat([a, b], 0)), [a, b]
    if kind == "slice":
        r, c = _rand_shape(g, 2, 2, 4)
        x = _randn(g, r, c)
        return (lambda: slice_(x, 1, 1, c)), [x]
    if kind in ("sum", "mean"):
        shape = _rand_shape(g, 3)
        x = _randn(g, *shape)
        fn = sum_ if kind == "sum" else mean
        return (lambda: fn(x, dim=1)), [x]
    if kind == "softmax":
        r, c = _rand_shape(g, 2, 2, 4)
        x = _randn(g, r, c)
        mask = torch.ones(r, c, dtype=torch.bool)
        mask[:, -1] = False
        return (lambda: softmax(x, -1, mask)), [x]
    if kind in ("sigmoid", "gelu", "relu"):
        shape = _rand_shape(g, 2)
        x = _randn(g, *shape)
        return (lambda: KINDS[kind](x)), [x]
    if kind == "layer_norm":
        r, c = _rand_shape(g, 2, 2, 4)
        x, w, b = _randn(g, r, c), _randn(g, c), _randn(g, c)
        return (lambda: layer_norm(x, w, b)), [x, w, b]
    if kind == "batch_norm":
        n, c = _rand_shape(g, 2, 2, 4)
        x = _randn(g, n, c, 2, 2)
        w, b = _randn(g, c), _randn(g, c)
        stats = (torch.zeros(c, dtype=torch.float64), torch.ones(c, dtype=torch.float64))

        def run():
            # fresh buffers each call keep the evaluation pure
            return batch_norm(x, stats[0].clone(), stats[1].clone(), w, b, training=True)
        return run, [x, w, b]
    if kind == "embedding":
        n, d = _rand_shape(g, 2, 2, 4)
        table = _randn(g, n, d)
        ids = torch.randint(0, n, (3,), generator=g)
        return (lambda: embedding(ids, table)), [table]
    raise ValueError(f"no gradcheck case for {kind!r}")


def check_inputs(fn: Callable[[], Array], inputs: Sequence[Array], g: torch.Generator,
                 h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences for ``fn``."""
    out = fn()
    weights = torch.randn(out.shape, generator=g, dtype=out.dtype)

    def scalar():
        return (fn() * weights).sum()

    analytic = torch.autograd.grad(scalar(), list(inputs), allow_unused=True)
    worst = 0.0
    for x, a in zip(inputs, analytic):
        a = torch.zeros_like(x) if a is None else a
        worst = max(worst, relative_error(a, numerical_grad(scalar, x, h)))
    return worst


def gradcheck(kind: str, trials: int = 20, tolerance: float = 1e-4, seed: int = 0,
              h: float = 1e-5) -> GradcheckReport:
    """Compare autograd against central differences on random small cases."""
    g = torch.Generator().manual_seed(seed)
    report = GradcheckReport(kind, trials, tolerance)
    for _ in range(trials):
        fn, inputs = _case(kind, g)
        report.errors.append(check_inputs(fn, inputs, g, h))
    return report
