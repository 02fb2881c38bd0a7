"""The 7-level residual U-Net: graph description, parameters, forward and backward.

Level k (1..7) owns two 3x3 convolutions, numbered ``2k-1`` and ``2k``; the
output head is ``conv15``. The batch norm feeding convolution ``n`` is named
``bn{n}``. Level 1 has no ``bn1`` because its first convolution sees raw RGB.
Shortcuts that change shape use a 1x1 projection ``proj{k}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import BNState, ConvParams

LEVEL_WIDTHS = (64, 128, 256, 512, 256, 128, 64)
SKIP_PAIRS = ((1, 7), (2, 6), (3, 5))
SCHEMA_VERSION = 1
TRAINING = "training"
INFERENCE = "inference"


@dataclass(frozen=True)
class ResidualUnitSpec:
    in_channels: int
    out_channels: int
    first_stride: int = 1
    preactivate_first: bool = True

    @property
    def has_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.first_stride != 1


@dataclass(frozen=True)
class ModelGraph:
    units: tuple[ResidualUnitSpec, ...]
    in_channels: int = 3
    width_scale: float = 1.0

    @property
    def head_in(self) -> int:
        return self.units[-1].out_channels


def scaled_widths(width_scale: float = 1.0) -> tuple[int, ...]:
    if width_scale <= 0:
        raise ValueError(f"width_scale must be positive, got {width_scale}")
    return tuple(max(1, int(round(c * width_scale))) for c in LEVEL_WIDTHS)


def build_graph(width_scale: float = 1.0) -> ModelGraph:
    w = scaled_widths(width_scale)
    units = [ResidualUnitSpec(3, w[0], 1, preactivate_first=False)]
    for lvl in (2, 3, 4):
        units.append(ResidualUnitSpec(w[lvl - 2], w[lvl - 1], 2))
    # Decoder input = upsampled lower level + paired encoder output.
    for lvl, enc in ((5, 3), (6, 2), (7, 1)):
        units.append(ResidualUnitSpec(w[lvl - 2] + w[enc - 1], w[lvl - 1], 1))
    return ModelGraph(tuple(units), width_scale=width_scale)


# ------------------------------------------------------------------ parameters


@dataclass
class ParamStore:
    """Learnable tensors, BN running statistics and scalar metadata, in a fixed order."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def items(self):
        """All tensors, learnable first, in stable order."""
        yield from self.params.items()
        yield from self.buffers.items()

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            dict(self.meta),
        )

    def bn(self, n: int, mode: str) -> BNState:
        return BNState(
            self.params[f"bn{n}.gamma"], self.params[f"bn{n}.beta"],
            self.buffers[f"bn{n}.running_mean"], self.buffers[f"bn{n}.running_var"],
            momentum=self.meta.get("bn_momentum", ops.BN_MOMENTUM),
            eps=self.meta.get("bn_eps", ops.BN_EPS),
            training=(mode == TRAINING),
        )

    def graph(self) -> ModelGraph:
        return build_graph(self.meta.get("width_scale", 1.0))


def unit_tensor_shapes(level: int, spec: ResidualUnitSpec):
    """Yield (name, shape, kind) for every tensor owned by one residual unit."""
    na, nb = 2 * level - 1, 2 * level
    if spec.preactivate_first:
        yield from _bn_shapes(na, spec.in_channels)
    yield f"conv{na}.kernel", (spec.out_channels, spec.in_channels, 3, 3), "conv"
    yield from _bn_shapes(nb, spec.out_channels)
    yield f"conv{nb}.kernel", (spec.out_channels, spec.out_channels, 3, 3), "conv"
    if spec.has_projection:
        yield f"proj{level}.kernel", (spec.out_channels, spec.in_channels, 1, 1), "linear"


def _bn_shapes(n: int, c: int):
    yield f"bn{n}.gamma", (c,), "gamma"
    yield f"bn{n}.beta", (c,), "beta"
    yield f"bn{n}.running_mean", (c,), "running_mean"
    yield f"bn{n}.running_var", (c,), "running_var"


def tensor_shapes(graph: ModelGraph):
    for level, spec in enumerate(graph.units, start=1):
        yield from unit_tensor_shapes(level, spec)
    yield "conv15.kernel", (1, graph.head_in, 1, 1), "linear"


def _new_store(entries, rng: np.random.Generator, meta: dict) -> ParamStore:
    store = ParamStore(meta=meta)
    for name, shape, kind in entries:
        if kind in ("conv", "linear"):
            # He gain 2 compensates a preceding ReLU; shortcuts and the head see none.
            gain = 2.0 if kind == "conv" else 1.0
            fan_in = shape[1] * shape[2] * shape[3]
            t = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
            store.params[name] = t.astype(np.float32)
        elif kind == "gamma":
            store.params[name] = np.ones(shape, np.float32)
        elif kind == "beta":
            store.params[name] = np.zeros(shape, np.float32)
        elif kind == "running_mean":
            store.buffers[name] = np.zeros(shape, np.float32)
        else:
            store.buffers[name] = np.ones(shape, np.float32)
    return store


def default_meta(width_scale: float = 1.0) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "width_scale": width_scale,
        "bn_eps": ops.BN_EPS,
        "bn_momentum": ops.BN_MOMENTUM,
        "input_scaling": "rgb/255",
    }


def init_params(seed: int, width_scale: float = 1.0) -> ParamStore:
    """He-normal 3x3 kernels, unit-gain 1x1 kernels, identity BN. Deterministic per seed."""
    graph = build_graph(width_scale)
    rng = np.random.default_rng(seed)
    return _new_store(tensor_shapes(graph), rng, default_meta(width_scale))


def init_unit_params(spec: ResidualUnitSpec, seed: int = 0, level: int = 1) -> ParamStore:
    """Parameters for a single standalone residual unit."""
    rng = np.random.default_rng(seed)
    return _new_store(unit_tensor_shapes(level, spec), rng, default_meta())


def count_params(store: ParamStore) -> int:
    """Learnable scalars only; running statistics are excluded."""
    return int(sum(v.size for v in store.params.values()))


def count_main_path_conv(store: ParamStore) -> int:
    return int(sum(store.params[f"conv{n}.kernel"].size for n in range(1, 16) if f"conv{n}.kernel" in store.params))


# -------------------------------------------------------------- residual unit


@dataclass
class _UnitCache:
    x: np.ndarray
    bn_a_out: np.ndarray | None
    r_a: np.ndarray
    c_a: np.ndarray
    bn_b_out: np.ndarray
    r_b: np.ndarray


def _conv(store: ParamStore, name: str, stride: int = 1) -> ConvParams:
    return ConvParams(store.params[name], stride)


def _unit_forward(x, spec: ResidualUnitSpec, store: ParamStore, level: int, mode: str, trace=None):
    if x.shape[1] != spec.in_channels:
        raise ops.ShapeError(
            f"level {level} unit expects {spec.in_channels} input channels, got shape {x.shape}"
        )
    na, nb = 2 * level - 1, 2 * level
    if spec.preactivate_first:
        bn_a_out = ops.batchnorm_forward(x, store.bn(na, mode))
        r_a = ops.relu_forward(bn_a_out)
    else:
        bn_a_out, r_a = None, x
    c_a = ops.conv2d_forward(r_a, _conv(store, f"conv{na}.kernel", spec.first_stride))
    bn_b_out = ops.batchnorm_forward(c_a, store.bn(nb, mode))
    r_b = ops.relu_forward(bn_b_out)
    c_b = ops.conv2d_forward(r_b, _conv(store, f"conv{nb}.kernel"))
    if spec.has_projection:
        short = ops.conv2d_forward(x, _conv(store, f"proj{level}.kernel", spec.first_stride))
    else:
        short = x
    if trace is not None:
        trace.append((f"conv{na}", c_a.shape))
        trace.append((f"conv{nb}", c_b.shape))
    return ops.add(short, c_b), _UnitCache(x, bn_a_out, r_a, c_a, bn_b_out, r_b)


def _unit_backward(gy, cache: _UnitCache, spec: ResidualUnitSpec, store: ParamStore, level: int, grads: dict):
    na, nb = 2 * level - 1, 2 * level
    g_rb, grads[f"conv{nb}.kernel"] = ops.conv2d_backward(cache.r_b, _conv(store, f"conv{nb}.kernel"), gy)
    g = ops.relu_backward(cache.bn_b_out, g_rb)
    g_ca, grads[f"bn{nb}.gamma"], grads[f"bn{nb}.beta"] = ops.batchnorm_backward(
        cache.c_a, store.bn(nb, TRAINING), g
    )
    g_ra, grads[f"conv{na}.kernel"] = ops.conv2d_backward(
        cache.r_a, _conv(store, f"conv{na}.kernel", spec.first_stride), g_ca
    )
    if spec.preactivate_first:
        g = ops.relu_backward(cache.bn_a_out, g_ra)
        gx, grads[f"bn{na}.gamma"], grads[f"bn{na}.beta"] = ops.batchnorm_backward(
            cache.x, store.bn(na, TRAINING), g
        )
    else:
        gx = g_ra
    if spec.has_projection:
        g_short, grads[f"proj{level}.kernel"] = ops.conv2d_backward(
            cache.x, _conv(store, f"proj{level}.kernel", spec.first_stride), gy
        )
    else:
        g_short = gy
    return gx + g_short


def residual_unit_forward(x, spec: ResidualUnitSpec, store: ParamStore, level: int = 1, mode: str = INFERENCE):
    """h(x) + F(x) for one full pre-activation unit."""
    return _unit_forward(x, spec, store, level, mode)[0]


def residual_unit_grads(x, spec: ResidualUnitSpec, store: ParamStore, grad_out, level: int = 1):
    """Training-mode gradients of sum(grad_out * unit(x)); returns (grad_x, param grads)."""
    _, cache = _unit_forward(x, spec, store, level, TRAINING)
    grads: dict[str, np.ndarray] = {}
    gx = _unit_backward(grad_out, cache, spec, store, level, grads)
    return gx, grads


# --------------------------------------------------------------- whole network


@dataclass
class ForwardCache:
    graph: ModelGraph
    units: list
    skip_channels: list
    head_in: np.ndarray
    out: np.ndarray


def _check_input(x: np.ndarray, graph: ModelGraph) -> None:
    if x.ndim != 4 or x.shape[1] != graph.in_channels:
        raise ops.ShapeError(f"expected input (N, {graph.in_channels}, H, W), got {x.shape}")
    h, w = x.shape[2:]
    if h % 8 or w % 8 or h < 16 or w < 16:
        raise ops.ShapeError(f"input height and width must be multiples of 8 and >= 16, got {h}x{w}")


def _run(x, store: ParamStore, mode: str, trace=None):
    if mode not in (TRAINING, INFERENCE):
        raise ValueError(f"mode must be {TRAINING!r} or {INFERENCE!r}, got {mode!r}")
    graph = store.graph()
    _check_input(x, graph)
    caches, skips, outs = [], [], {}
    h = x
    for level, spec in enumerate(graph.units, start=1):
        if level >= 5:
            enc = outs[8 - level]
            up = ops.upsample2x_forward(h)
            skips.append(up.shape[1])
            h = ops.concat_channels(up, enc)
        h, cache = _unit_forward(h, spec, store, level, mode, trace)
        caches.append(cache)
        outs[level] = h
    logits = ops.conv2d_forward(h, _conv(store, "conv15.kernel"))
    if trace is not None:
        trace.append(("conv15", logits.shape))
    out = ops.sigmoid_forward(logits)
    # float32 sigmoid rounds to exactly 0 or 1 past |logit| ~ 17; keep the open interval.
    lo, hi = np.nextafter(out.dtype.type(0), out.dtype.type(1)), np.nextafter(out.dtype.type(1), out.dtype.type(0))
    np.clip(out, lo, hi, out=out)
    return out, ForwardCache(graph, caches, skips, h, out)


def forward(x: np.ndarray, store: ParamStore, mode: str = INFERENCE, trace: list | None = None) -> np.ndarray:
    """Probability map (N, 1, H, W). ``trace`` collects (conv name, output shape)."""
    return _run(x, store, mode, trace)[0]


def forward_with_cache(x: np.ndarray, store: ParamStore, mode: str = TRAINING):
    """Forward pass that retains activations for ``backward``."""
    return _run(x, store, mode)


def backward(loss_grad: np.ndarray, cache: ForwardCache | None, store: ParamStore) -> dict[str, np.ndarray]:
    """Gradients for every learnable tensor, keyed like ``store.params``."""
    if cache is None:
        raise RuntimeError("backward needs the cache from forward_with_cache")
    if loss_grad.shape != cache.out.shape:
        raise ops.ShapeError(f"loss_grad shape {loss_grad.shape} != output shape {cache.out.shape}")
    grads: dict[str, np.ndarray] = {}
    g = ops.sigmoid_backward(cache.out, loss_grad)
    g, grads["conv15.kernel"] = ops.conv2d_backward(cache.head_in, _conv(store, "conv15.kernel"), g)
    enc_grads: dict[int, np.ndarray] = {}
    for level in range(7, 0, -1):
        spec = cache.graph.units[level - 1]
        if level in enc_grads:
            g = g + enc_grads[level]
        g = _unit_backward(g, cache.units[level - 1], spec, store, level, grads)
        if level >= 5:
            g_up, g_enc = ops.concat_backward(g, cache.skip_channels[level - 5])
            enc_grads[8 - level] = g_enc
            g = ops.upsample2x_backward(g_up)
    return {name: grads[name] for name in store.params}
