"""Central finite-difference checks for every differentiable op.

Each case builds a scalar ``sum(op(inputs) * R)`` with a fixed random
projection ``R``. Autodiff runs in float32; the finite differences are
evaluated in float64 so their own rounding stays far below the tolerance.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as tc

H = 1e-3
TOL = 1e-3


@dataclass
class OpReport:
    op: str
    trials: int
    max_error: float
    passed: bool


def _project(out: tc.Tensor, r: np.ndarray) -> tc.Tensor:
    return tc.total(tc.elementwise(out, tc.Tensor(r), "mul"))


def _uniform(rng, shape, margin: float = 0.0):
    x = rng.uniform(-1, 1, size=shape)
    if margin:
        x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)
    return x


# each case: rng -> (inputs, fn) where fn(list[Tensor]) -> Tensor (any shape)
def _elementwise(rng):
    kind = ("add", "sub", "mul")[rng.integers(3)]
    shape = (2, 3, 4)
    bshape = tuple(s if rng.random() < 0.5 else 1 for s in shape)
    return [_uniform(rng, shape), _uniform(rng, bshape)], lambda t: tc.elementwise(t[0], t[1], kind)


def _conv(rng):
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    return ([_uniform(rng, (2, 5, 5)), _uniform(rng, (3, 2, 3, 3)), _uniform(rng, (3,))],
            lambda t: tc.conv2d(t[0], t[1], t[2], stride=stride, pad=pad))


def _relu(rng):
    # keep inputs away from the kink so the finite difference is well defined
    return [_uniform(rng, (3, 4, 4), margin=5 * H)], lambda t: tc.relu(t[0])


def _resize(rng):
    oh, ow = (int(v) for v in rng.integers(1, 9, size=2))
    return [_uniform(rng, (2, 3, 4))], lambda t: tc.bilinear_resize(t[0], oh, ow)


def _pool(rng):
    mask = (rng.random((1, 4, 4)) < 0.5).astype(float)
    mask[0, 0, 0] = 1.0
    return [_uniform(rng, (3, 4, 4))], lambda t: tc.masked_global_pool(t[0], tc.Tensor(mask))


def _tile(rng):
    return [_uniform(rng, (3, 1, 1))], lambda t: tc.tile_spatial(t[0], 3, 2)


def _cross_entropy(rng):
    target = (rng.random((1, 3, 3)) < 0.5).astype(float)
    return [_uniform(rng, (2, 3, 3))], lambda t: tc.softmax_cross_entropy(t[0], tc.Tensor(target))


def _concat(rng):
    return [_uniform(rng, (2, 3, 3)), _uniform(rng, (1, 3, 3))], lambda t: tc.concat(t, axis=0)


def _scale(rng):
    c = float(rng.uniform(-2, 2))
    return [_uniform(rng, (2, 3))], lambda t: tc.scale(t[0], c)


def _total(rng):
    return [_uniform(rng, (2, 3))], lambda t: tc.total(t[0])


def _add_n(rng):
    return [_uniform(rng, (2, 2)) for _ in range(3)], lambda t: tc.add_n(t)


CASES: dict[str, Callable] = {
    "elementwise": _elementwise,
    "conv2d": _conv,
    "relu": _relu,
    "bilinear_resize": _resize,
    "masked_global_pool": _pool,
    "tile_spatial": _tile,
    "softmax_cross_entropy": _cross_entropy,
    "concat": _concat,
    "scale": _scale,
    "total": _total,
    "add_n": _add_n,
}


def numeric_grad(f: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray], h: float = H) -> list[np.ndarray]:
    """Central differences of ``f`` with respect to every element of every input."""
    grads = []
    for x in inputs:
        g = np.zeros_like(x, dtype=np.float64)
        flat = x.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(inputs)
            flat[i] = old - h
            down = f(inputs)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest ``|a - n| / (1 + |n|)``; below ``TOL`` means agreement."""
    return float(np.max(np.abs(analytic - numeric) / (1.0 + np.abs(numeric)), initial=0.0))


def check_case(build: Callable, rng: np.random.Generator) -> float:
    inputs, fn = build(rng)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    out_shape = fn([tc.Tensor(x) for x in inputs]).shape
    proj = rng.uniform(-1, 1, size=out_shape)

    leaves = [tc.Tensor(x.astype(np.float32), requires_grad=True) for x in inputs]
    _project(fn(leaves), proj.astype(np.float32)).backward()
    analytic = [l.grad if l.grad is not None else np.zeros(l.shape) for l in leaves]

    def f64(xs):
        with tc.precision(np.float64):
            return _project(fn([tc.Tensor(x) for x in xs]), proj).item()

    numeric = numeric_grad(f64, [x.copy() for x in inputs])
    return max(max_error(a, n) for a, n in zip(analytic, numeric))


def run(seed: int = 0, trials: int = 100, cases: dict[str, Callable] | None = None) -> list[OpReport]:
    reports = []
    for name, build in (cases or CASES).items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = max(check_case(build, rng) for _ in range(trials))
        reports.append(OpReport(op=name, trials=trials, max_error=worst, passed=worst < TOL))
    return reports


def format_table(reports: list[OpReport]) -> str:
    lines = [f"{'op':<24}{'trials':>8}{'max error':>14}  result"]
    for r in reports:
        lines.append(f"{r.op:<24}{r.trials:>8}{r.max_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
