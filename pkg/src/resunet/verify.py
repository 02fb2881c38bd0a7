"""Self-checks: finite-difference gradients, Table I shape audit, parameter counts.

Gradient checks run the primitives in float64 and compare the analytic
backward against central differences of ``sum(G * f(x))`` for a random
cotangent ``G``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model, ops
from .train import mse_loss

FD_STEP = 1e-3
# Through the whole network a 1e-3 nudge often pushes some BN-normalized
# activation across a ReLU kink; the composite check uses a finer step.
MODEL_FD_STEP = 1e-5
PRIMITIVE_TOL = 1e-3
MODEL_TOL = 1e-2
MAIN_PATH_CONV_PARAMS = 7_780_096
TOTAL_PARAM_RANGE = (7_400_000, 8_400_000)

# "Output size" column of the architecture table, as (C, H, W) for a 224x224x3 input.
TABLE_I_SHAPES = {
    "conv1": (64, 224, 224), "conv2": (64, 224, 224),
    "conv3": (128, 112, 112), "conv4": (128, 112, 112),
    "conv5": (256, 56, 56), "conv6": (256, 56, 56),
    "conv7": (512, 28, 28), "conv8": (512, 28, 28),
    "conv9": (256, 56, 56), "conv10": (256, 56, 56),
    "conv11": (128, 112, 112), "conv12": (128, 112, 112),
    "conv13": (64, 224, 224), "conv14": (64, 224, 224),
    "conv15": (1, 224, 224),
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max over elements of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place and restored).

    ``index`` restricts the probe to a list of flat indices; other entries stay 0.
    """
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    indices = range(flat.size) if index is None else index
    for i in indices:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


def _dot(g: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(g.astype(np.float64) * y.astype(np.float64)))


def _random_shape(rng: np.random.Generator, max_c: int = 4, max_hw: int = 8):
    return (int(rng.integers(1, 3)), int(rng.integers(1, max_c + 1)),
            int(rng.integers(2, max_hw + 1)), int(rng.integers(2, max_hw + 1)))


# Each primitive check returns the max relative error over everything it probes.


def grad_error_conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, c, h, w = _random_shape(rng)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    x = rng.uniform(-1, 1, (n, c, h, w))
    p = ops.ConvParams(rng.uniform(-1, 1, (int(rng.integers(1, 5)), c, k, k)), stride)
    g = rng.standard_normal(ops.conv2d_forward(x, p).shape)
    gx, gk = ops.conv2d_backward(x, p, g)
    f = lambda: _dot(g, ops.conv2d_forward(x, p))
    return max(rel_error(gx, numerical_grad(f, x)), rel_error(gk, numerical_grad(f, p.kernel)))


def grad_error_batchnorm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, c, h, w = _random_shape(rng)
    x = rng.standard_normal((n, c, h, w)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
    st = ops.BNState.fresh(c, np.float64)
    st.gamma[:] = rng.uniform(0.5, 2, c)
    st.beta[:] = rng.uniform(-1, 1, c)
    g = rng.standard_normal(x.shape)
    gx, gg, gb = ops.batchnorm_backward(x, st, g)
    f = lambda: _dot(g, ops.batchnorm_forward(x, st))
    return max(
        rel_error(gx, numerical_grad(f, x)),
        rel_error(gg, numerical_grad(f, st.gamma)),
        rel_error(gb, numerical_grad(f, st.beta)),
    )


def grad_error_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, _random_shape(rng))
    # Keep every entry away from the kink so +-step never crosses 0.
    x = np.where(np.abs(x) < 1e-2, 0.5, x)
    g = rng.standard_normal(x.shape)
    f = lambda: _dot(g, ops.relu_forward(x))
    return rel_error(ops.relu_backward(x, g), numerical_grad(f, x))


def grad_error_sigmoid(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-4, 4, _random_shape(rng))
    g = rng.standard_normal(x.shape)
    f = lambda: _dot(g, ops.sigmoid_forward(x))
    return rel_error(ops.sigmoid_backward(ops.sigmoid_forward(x), g), numerical_grad(f, x))


def grad_error_upsample(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(_random_shape(rng))
    g = rng.standard_normal(ops.upsample2x_forward(x).shape)
    f = lambda: _dot(g, ops.upsample2x_forward(x))
    return rel_error(ops.upsample2x_backward(g), numerical_grad(f, x))


def grad_error_concat_add(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, c, h, w = _random_shape(rng)
    a = rng.standard_normal((n, c, h, w))
    b = rng.standard_normal((n, int(rng.integers(1, 5)), h, w))
    b2 = rng.standard_normal(a.shape)
    g = rng.standard_normal((n, a.shape[1] + b.shape[1], h, w))
    ga, gb = ops.concat_backward(g, a.shape[1])
    fc = lambda: _dot(g, ops.concat_channels(a, b))
    g2 = rng.standard_normal(a.shape)
    fa = lambda: _dot(g2, ops.add(a, b2))
    return max(
        rel_error(ga, numerical_grad(fc, a)),
        rel_error(gb, numerical_grad(fc, b)),
        rel_error(g2, numerical_grad(fa, a)),
        rel_error(g2, numerical_grad(fa, b2)),
    )


PRIMITIVE_CHECKS = {
    "conv2d": grad_error_conv,
    "batchnorm": grad_error_batchnorm,
    "relu": grad_error_relu,
    "sigmoid": grad_error_sigmoid,
    "upsample2x": grad_error_upsample,
    "concat/add": grad_error_concat_add,
}


def check_primitives(seeds=range(20), tol: float = PRIMITIVE_TOL) -> list[CheckResult]:
    results = []
    for name, fn in PRIMITIVE_CHECKS.items():
        worst = max(fn(int(s)) for s in seeds)
        results.append(CheckResult(f"gradient {name}", worst < tol, f"max rel err {worst:.2e} over {len(seeds)} seeds"))
    return results


def to_float64(store: model.ParamStore) -> model.ParamStore:
    return model.ParamStore(
        {k: v.astype(np.float64) for k, v in store.params.items()},
        {k: v.astype(np.float64) for k, v in store.buffers.items()},
        dict(store.meta),
    )


def model_grad_error(seed: int = 0, n_samples: int = 30, width_scale: float = 1 / 16, size: int = 16) -> float:
    """Full-network check on a width-reduced float64 copy, ``n_samples`` random scalars."""
    rng = np.random.default_rng(seed)
    store = to_float64(model.init_params(seed, width_scale))
    x = rng.uniform(0, 1, (2, 3, size, size))
    target = (rng.uniform(0, 1, (2, 1, size, size)) > 0.7).astype(np.float64)

    def loss() -> float:
        return mse_loss(model.forward(x, store, model.TRAINING), target)[0]

    pred, cache = model.forward_with_cache(x, store, model.TRAINING)
    _, g = mse_loss(pred, target)
    grads = model.backward(g, cache, store)

    names = list(store.params)
    worst = 0.0
    for _ in range(n_samples):
        name = names[int(rng.integers(len(names)))]
        i = int(rng.integers(store.params[name].size))
        num = numerical_grad(loss, store.params[name], MODEL_FD_STEP, index=[i]).reshape(-1)[i]
        worst = max(worst, rel_error(grads[name].reshape(-1)[i], num, floor=1e-9))
    return worst


def check_model_grad(seed: int = 0, tol: float = MODEL_TOL) -> CheckResult:
    err = model_grad_error(seed)
    return CheckResult("gradient full model (width 1/16)", err < tol, f"max rel err {err:.2e} over 30 parameters")


def audit_shapes(seed: int = 0) -> CheckResult:
    store = model.init_params(seed)
    trace: list = []
    x = np.random.default_rng(seed).uniform(0, 1, (1, 3, 224, 224)).astype(np.float32)
    model.forward(x, store, model.INFERENCE, trace=trace)
    got = {name: tuple(shape[1:]) for name, shape in trace}
    bad = [f"{k}: {got.get(k)} != {v}" for k, v in TABLE_I_SHAPES.items() if got.get(k) != v]
    return CheckResult("Table I shape audit", not bad and len(trace) == 15, "; ".join(bad) or "15/15 conv outputs match")


def audit_counts(seed: int = 0) -> list[CheckResult]:
    store = model.init_params(seed)
    main = model.count_main_path_conv(store)
    total = model.count_params(store)
    lo, hi = TOTAL_PARAM_RANGE
    return [
        CheckResult("main-path conv parameters", main == MAIN_PATH_CONV_PARAMS, f"{main:,}"),
        CheckResult("total learnable parameters", lo <= total <= hi, f"{total:,}"),
    ]


def run_all(seed: int = 0, seeds: int = 20) -> list[CheckResult]:
    results = check_primitives(range(seed, seed + seeds))
    results.append(check_model_grad(seed))
    results.append(audit_shapes(seed))
    results.extend(audit_counts(seed))
    return results
