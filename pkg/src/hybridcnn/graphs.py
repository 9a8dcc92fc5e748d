"""Declarative model graphs.

A :class:`ModelGraph` is an ordered list of typed :class:`LayerSpec` entries
plus named parameter tensors. Every graph is shape-checked symbolically at
construction, before any parameter tensor is allocated, so configuration
errors surface instantly and parameter totals can be reported without
touching data.

Builders:

* :func:`build_custom_cnn` - the fixed 9-conv / 3-dense network with an
  intersect marker after the fifth batch norm (the feature-fusion point).
* :func:`build_compact_cnn` - the same topology scaled down for 64x64 inputs,
  used for fast desk-scale training runs.
* :func:`build_branch` - a configurable residual bottleneck backbone with a
  binary head and a feature tap, one per binary subtask.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Iterable, NamedTuple

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import Tensor

__all__ = [
    "LayerSpec", "ModelGraph", "LayerRow", "BranchConfig",
    "build_custom_cnn", "build_compact_cnn", "build_branch",
    "graph_from_config", "GRAPH_SCHEMA_VERSION",
    "CLASS_LABELS", "TASK_CLASSES",
]

GRAPH_SCHEMA_VERSION = 1

CLASS_LABELS = ("Normal", "Stone", "Cyst", "Tumor")

TASK_CLASSES = {
    "normal_vs_stone": ("Normal", "Stone"),
    "cyst_vs_tumor": ("Cyst", "Tumor"),
}

_BASE_NAMES = {
    "conv": "conv2d",
    "batchnorm": "batch_normalization",
    "maxpool": "max_pooling2d",
    "dense": "dense",
    "dropout": "dropout",
    "flatten": "flatten",
    "relu": "relu",
    "residual_block": "residual_block",
    "intersect_marker": "intersect_features",
    "global_avg_pool": "global_average_pooling2d",
}


@dataclass(frozen=True)
class LayerSpec:
    """One typed layer configuration; geometry fields apply per kind.

    `expect_shape`, when set, pins the layer's output shape: the symbolic
    shape pass fails on the first layer whose computed shape drifts from it.
    Builders pin the downsampling anchors (pools, flatten) this way so a
    corrupted config is caught before any tensor is allocated.
    """

    kind: str
    filters: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: str = "valid"
    units: int | None = None
    pool: int | None = None
    rate: float | None = None
    activation: str | None = None
    use_bias: bool = True
    momentum: float = 0.99
    eps: float = 1e-3
    expect_shape: tuple[int, ...] | None = None

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v != f.default:
                d[f.name] = list(v) if f.name == "expect_shape" else v
        d["kind"] = self.kind
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        known = {f.name for f in fields(LayerSpec)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown layer fields {sorted(extra)}")
        if d.get("expect_shape") is not None:
            d = {**d, "expect_shape": tuple(d["expect_shape"])}
        return LayerSpec(**d)


class LayerRow(NamedTuple):
    """One line of the architecture table: name, kind, shape, param counts."""

    name: str
    kind: str
    output_shape: tuple[int, ...]
    params_total: int
    params_trainable: int
    params_non_trainable: int


# ---------------------------------------------------------------------------
# symbolic shape / parameter algebra

def _bottleneck_mid(filters: int) -> int:
    return max(filters // 4, 1)


def _conv_params(k: int, cin: int, cout: int, use_bias: bool) -> int:
    return cout * (k * k * cin + (1 if use_bias else 0))


def _infer_layer(spec: LayerSpec, in_shape: tuple[int, ...], name: str):
    """Return (out_shape, [(param_suffix, shape, trainable)]) for one layer."""
    kind = spec.kind
    if kind == "conv":
        if len(in_shape) != 3:
            raise ConfigurationError(f"{name}: conv needs a (H, W, C) input, got {in_shape}")
        h, w, cin = in_shape
        k = spec.kernel
        if not k or not spec.filters:
            raise ConfigurationError(f"{name}: conv needs kernel and filters")
        try:
            oh = ops.conv_out_size(h, k, spec.stride, spec.padding)
            ow = ops.conv_out_size(w, k, spec.stride, spec.padding)
        except ConfigurationError as e:
            raise ConfigurationError(f"{name}: {e}") from None
        params = [("kernel", (k, k, cin, spec.filters), True)]
        if spec.use_bias:
            params.append(("bias", (spec.filters,), True))
        return (oh, ow, spec.filters), params
    if kind == "batchnorm":
        if len(in_shape) != 3:
            raise ConfigurationError(f"{name}: batchnorm needs a (H, W, C) input, got {in_shape}")
        c = in_shape[2]
        return in_shape, [("gamma", (c,), True), ("beta", (c,), True),
                          ("moving_mean", (c,), False), ("moving_var", (c,), False)]
    if kind == "maxpool":
        if len(in_shape) != 3:
            raise ConfigurationError(f"{name}: maxpool needs a (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        if not spec.pool:
            raise ConfigurationError(f"{name}: maxpool needs a pool size")
        try:
            oh = ops.pool_out_size(h, spec.pool, spec.stride, spec.padding)
            ow = ops.pool_out_size(w, spec.pool, spec.stride, spec.padding)
        except ConfigurationError as e:
            raise ConfigurationError(f"{name}: {e}") from None
        if oh < 1 or ow < 1:
            raise ConfigurationError(f"{name}: pooling empties the spatial extent {in_shape}")
        return (oh, ow, c), []
    if kind == "dense":
        if len(in_shape) != 1:
            raise ConfigurationError(f"{name}: dense needs a flat input, got {in_shape}")
        if not spec.units:
            raise ConfigurationError(f"{name}: dense needs units")
        d = in_shape[0]
        return (spec.units,), [("kernel", (d, spec.units), True), ("bias", (spec.units,), True)]
    if kind == "dropout":
        if spec.rate is None or not 0.0 <= spec.rate < 1.0:
            raise ConfigurationError(f"{name}: dropout rate must be in [0, 1)")
        return in_shape, []
    if kind == "flatten":
        return (int(np.prod(in_shape)),), []
    if kind == "relu":
        return in_shape, []
    if kind == "intersect_marker":
        if len(in_shape) != 3:
            raise ConfigurationError(f"{name}: fusion point needs a (H, W, C) activation")
        return in_shape, []
    if kind == "global_avg_pool":
        if len(in_shape) != 3:
            raise ConfigurationError(f"{name}: global pooling needs a (H, W, C) input")
        return (in_shape[2],), []
    if kind == "residual_block":
        if len(in_shape) != 3:
            raise ConfigurationError(f"{name}: residual block needs a (H, W, C) input")
        h, w, cin = in_shape
        cout = spec.filters
        if not cout:
            raise ConfigurationError(f"{name}: residual block needs filters")
        mid = _bottleneck_mid(cout)
        try:
            oh = ops.conv_out_size(h, 3, spec.stride, "same")
            ow = ops.conv_out_size(w, 3, spec.stride, "same")
        except ConfigurationError as e:
            raise ConfigurationError(f"{name}: {e}") from None
        params = [
            ("conv1/kernel", (1, 1, cin, mid), True),
            ("bn1/gamma", (mid,), True), ("bn1/beta", (mid,), True),
            ("bn1/moving_mean", (mid,), False), ("bn1/moving_var", (mid,), False),
            ("conv2/kernel", (3, 3, mid, mid), True),
            ("bn2/gamma", (mid,), True), ("bn2/beta", (mid,), True),
            ("bn2/moving_mean", (mid,), False), ("bn2/moving_var", (mid,), False),
            ("conv3/kernel", (1, 1, mid, cout), True),
            ("bn3/gamma", (cout,), True), ("bn3/beta", (cout,), True),
            ("bn3/moving_mean", (cout,), False), ("bn3/moving_var", (cout,), False),
        ]
        if cin != cout or spec.stride != 1:
            params += [
                ("shortcut/kernel", (1, 1, cin, cout), True),
                ("shortcut_bn/gamma", (cout,), True), ("shortcut_bn/beta", (cout,), True),
                ("shortcut_bn/moving_mean", (cout,), False), ("shortcut_bn/moving_var", (cout,), False),
            ]
        return (oh, ow, cout), params
    raise ConfigurationError(f"{name}: unknown layer kind {spec.kind!r}")


# ---------------------------------------------------------------------------

class ModelGraph:
    """An ordered, shape-checked stack of layers with named parameters.

    Construction runs the symbolic shape pass and computes all parameter
    shapes; no tensor is allocated until :meth:`initialize` (or a checkpoint
    load) provides values. A built graph is immutable apart from its
    parameter data and safe to share for read-only inference.
    """

    def __init__(self, input_shape: tuple[int, int, int], layers: Iterable[LayerSpec],
                 classes: tuple[str, ...], taps: dict[str, str] | None = None):
        if len(input_shape) != 3 or any(d < 1 for d in input_shape):
            raise ConfigurationError(f"input shape must be (H, W, C), got {input_shape}")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.classes = tuple(classes)
        self.layers: list[LayerSpec] = list(layers)
        self.layer_names: list[str] = self._assign_names(self.layers)

        self._shapes: list[tuple[int, ...]] = []
        self._param_specs: list[list[tuple[str, tuple[int, ...], bool]]] = []
        shape = self.input_shape
        for spec, name in zip(self.layers, self.layer_names):
            shape, params = _infer_layer(spec, shape, name)
            if spec.expect_shape is not None and tuple(spec.expect_shape) != shape:
                raise ConfigurationError(
                    f"{name}: computed output shape {shape}, config expects "
                    f"{tuple(spec.expect_shape)} (shape drift upstream)")
            self._shapes.append(shape)
            self._param_specs.append([(f"{name}/{suffix}", pshape, tr) for suffix, pshape, tr in params])
        self.output_shape = shape

        markers = [n for n, s in zip(self.layer_names, self.layers) if s.kind == "intersect_marker"]
        if len(markers) > 1:
            raise ConfigurationError("a graph may contain at most one fusion point")
        self.taps: dict[str, str] = dict(taps or {})
        if markers:
            self.taps.setdefault("fusion_point", markers[0])

        self.params: dict[str, Tensor] = {}

    @staticmethod
    def _assign_names(layers: Iterable[LayerSpec]) -> list[str]:
        counters: dict[str, int] = {}
        names = []
        for spec in layers:
            base = _BASE_NAMES.get(spec.kind)
            if base is None:
                raise ConfigurationError(f"unknown layer kind {spec.kind!r}")
            n = counters.get(base, 0)
            counters[base] = n + 1
            names.append(base if n == 0 else f"{base}_{n}")
        return names

    # -- reporting ----------------------------------------------------------

    def symbolic_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return list(zip(self.layer_names, self._shapes))

    def rows(self) -> list[LayerRow]:
        out = []
        for name, spec, shape, params in zip(self.layer_names, self.layers,
                                             self._shapes, self._param_specs):
            total = sum(int(np.prod(s)) for _, s, _ in params)
            trainable = sum(int(np.prod(s)) for _, s, tr in params if tr)
            out.append(LayerRow(name, spec.kind, shape, total, trainable, total - trainable))
        return out

    def parameter_vector(self) -> list[int]:
        """Per-layer total parameter counts, fusion markers excluded."""
        return [r.params_total for r in self.rows() if r.kind != "intersect_marker"]

    def parameter_totals(self) -> tuple[int, int]:
        """(trainable, non_trainable) totals."""
        rows = self.rows()
        return (sum(r.params_trainable for r in rows),
                sum(r.params_non_trainable for r in rows))

    # -- parameters ----------------------------------------------------------

    def parameter_shapes(self) -> dict[str, tuple[tuple[int, ...], bool]]:
        out: dict[str, tuple[tuple[int, ...], bool]] = {}
        for specs in self._param_specs:
            for name, shape, tr in specs:
                out[name] = (shape, tr)
        return out

    def initialize(self, seed: int = 0) -> "ModelGraph":
        """He-uniform kernels, zero biases, batch-norm (gamma, beta) = (1, 0)
        and moving stats (0, 1); deterministic in `seed`."""
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, (shape, trainable) in self.parameter_shapes().items():
            leaf = name.rsplit("/", 1)[-1]
            if leaf == "kernel":
                fan_in = int(np.prod(shape[:-1]))
                limit = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
            elif leaf in ("bias", "beta", "moving_mean"):
                data = np.zeros(shape, dtype=np.float32)
            elif leaf in ("gamma", "moving_var"):
                data = np.ones(shape, dtype=np.float32)
            else:
                raise ConfigurationError(f"unknown parameter suffix in {name}")
            self.params[name] = Tensor(data, trainable=trainable, name=name)
        return self

    def set_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        shapes = self.parameter_shapes()
        missing = set(shapes) - set(arrays)
        if missing:
            raise ConfigurationError(f"missing parameters: {sorted(missing)[:3]} ...")
        self.params = {}
        for name, (shape, trainable) in shapes.items():
            arr = arrays[name]
            if tuple(arr.shape) != shape:
                raise ConfigurationError(
                    f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(np.asarray(arr, dtype=np.float32), trainable=trainable, name=name)

    def named_parameters(self) -> dict[str, Tensor]:
        self._require_params()
        return dict(self.params)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.trainable}

    def _require_params(self) -> None:
        if not self.params:
            raise ConfigurationError("graph parameters not initialized; call initialize() or load a checkpoint")

    # -- execution -----------------------------------------------------------

    def forward(self, x, *, mode: str = "infer", rng: np.random.Generator | None = None,
                fusion_fn: Callable[[Tensor], Tensor] | None = None) -> Tensor:
        out, _ = self.forward_collect(x, (), mode=mode, rng=rng, fusion_fn=fusion_fn)
        return out

    def forward_collect(self, x, capture: Iterable[str], *, mode: str = "infer",
                        rng: np.random.Generator | None = None,
                        fusion_fn: Callable[[Tensor], Tensor] | None = None,
                        ) -> tuple[Tensor, dict[str, Tensor]]:
        """Run the graph, capturing the post-activation output of the named
        layers. At the fusion marker the captured value is the graph's own
        activation, before `fusion_fn` (if any) replaces it."""
        self._require_params()
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != len(self.input_shape) + 1:
            raise ConfigurationError(
                f"expected batched input of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigurationError(
                f"input shape {tuple(x.shape[1:])} does not match graph input {self.input_shape}")
        wanted = set(capture)
        if mode == "train" and rng is None:
            rng = np.random.default_rng(0)

        captured: dict[str, Tensor] = {}
        cur = x
        for spec, name in zip(self.layers, self.layer_names):
            cur = self._run_layer(spec, name, cur, mode, rng)
            if name in wanted:
                captured[name] = cur
            if spec.kind == "intersect_marker" and fusion_fn is not None:
                cur = fusion_fn(cur)
        unknown = wanted - set(captured)
        if unknown:
            raise ConfigurationError(f"no such layer to capture: {sorted(unknown)}")
        return cur, captured

    def _p(self, layer: str, suffix: str) -> Tensor:
        return self.params[f"{layer}/{suffix}"]

    def _run_layer(self, spec: LayerSpec, name: str, cur: Tensor, mode: str,
                   rng: np.random.Generator | None) -> Tensor:
        kind = spec.kind
        if kind == "conv":
            bias = self._p(name, "bias") if spec.use_bias else None
            cur = ops.conv2d(cur, self._p(name, "kernel"), bias,
                             stride=spec.stride, padding=spec.padding, name=name)
        elif kind == "batchnorm":
            cur = ops.batchnorm(cur, self._p(name, "gamma"), self._p(name, "beta"),
                                self._p(name, "moving_mean"), self._p(name, "moving_var"),
                                mode=mode, momentum=spec.momentum, eps=spec.eps, name=name)
        elif kind == "maxpool":
            cur = ops.maxpool2d(cur, pool=spec.pool, stride=spec.stride,
                                padding=spec.padding, name=name)
        elif kind == "dense":
            cur = ops.dense(cur, self._p(name, "kernel"), self._p(name, "bias"), name=name)
        elif kind == "dropout":
            cur = ops.dropout(cur, spec.rate, mode=mode, rng=rng, name=name)
        elif kind == "flatten":
            cur = ops.flatten(cur, name=name)
        elif kind == "relu":
            cur = ops.relu(cur, name=name)
        elif kind == "global_avg_pool":
            cur = ops.global_avg_pool(cur, name=name)
        elif kind == "intersect_marker":
            pass
        elif kind == "residual_block":
            cur = self._run_block(spec, name, cur, mode)
        else:
            raise ConfigurationError(f"{name}: unknown layer kind {kind!r}")
        if spec.activation == "relu":
            cur = ops.relu(cur, name=f"{name}/relu")
        elif spec.activation is not None:
            raise ConfigurationError(f"{name}: unknown activation {spec.activation!r}")
        return cur

    def _run_block(self, spec: LayerSpec, name: str, x: Tensor, mode: str) -> Tensor:
        def bn(t: Tensor, sub: str) -> Tensor:
            return ops.batchnorm(t, self._p(name, f"{sub}/gamma"), self._p(name, f"{sub}/beta"),
                                 self._p(name, f"{sub}/moving_mean"), self._p(name, f"{sub}/moving_var"),
                                 mode=mode, momentum=spec.momentum, eps=spec.eps, name=f"{name}/{sub}")

        r = ops.conv2d(x, self._p(name, "conv1/kernel"), None, stride=1, padding="same",
                       name=f"{name}/conv1")
        r = ops.relu(bn(r, "bn1"))
        r = ops.conv2d(r, self._p(name, "conv2/kernel"), None, stride=spec.stride,
                       padding="same", name=f"{name}/conv2")
        r = ops.relu(bn(r, "bn2"))
        r = ops.conv2d(r, self._p(name, "conv3/kernel"), None, stride=1, padding="same",
                       name=f"{name}/conv3")
        r = bn(r, "bn3")
        if f"{name}/shortcut/kernel" in self.params:
            sc = ops.conv2d(x, self._p(name, "shortcut/kernel"), None, stride=spec.stride,
                            padding="same", name=f"{name}/shortcut")
            sc = bn(sc, "shortcut_bn")
        else:
            sc = x
        return ops.relu(ops.add(r, sc, name=f"{name}/add"))

    # -- serialization -------------------------------------------------------

    def to_config(self) -> dict:
        return {
            "version": GRAPH_SCHEMA_VERSION,
            "input_shape": list(self.input_shape),
            "classes": list(self.classes),
            "layers": [spec.to_dict() for spec in self.layers],
            "taps": dict(self.taps),
        }


def graph_from_config(cfg: dict) -> ModelGraph:
    if not isinstance(cfg, dict):
        raise ConfigurationError("model config must be a JSON object")
    version = cfg.get("version")
    if version != GRAPH_SCHEMA_VERSION:
        raise ConfigurationError(
            f"unsupported model config version {version!r}, this build reads version {GRAPH_SCHEMA_VERSION}")
    for key in ("input_shape", "classes", "layers"):
        if key not in cfg:
            raise ConfigurationError(f"model config missing {key!r}")
    layers = [LayerSpec.from_dict(d) for d in cfg["layers"]]
    return ModelGraph(tuple(cfg["input_shape"]), layers, tuple(cfg["classes"]),
                      taps=cfg.get("taps"))


# ---------------------------------------------------------------------------
# builders

def _conv_bn(filters: int, kernel: int, stride: int = 1, padding: str = "valid",
             momentum: float = 0.99) -> list[LayerSpec]:
    return [
        LayerSpec("conv", filters=filters, kernel=kernel, stride=stride, padding=padding),
        LayerSpec("batchnorm", activation="relu", momentum=momentum),
    ]


def _pin_anchor_shapes(g: ModelGraph) -> ModelGraph:
    """Stamp the computed shapes of pools and flatten into the specs, so a
    later config edit that drifts the geometry fails the shape pass there."""
    pinned = []
    for spec, (_, shape) in zip(g.layers, g.symbolic_shapes()):
        if spec.kind in ("maxpool", "flatten"):
            spec = LayerSpec(**{**spec.to_dict(), "expect_shape": shape})
        pinned.append(spec)
    return ModelGraph(g.input_shape, pinned, g.classes, taps=g.taps)


def build_custom_cnn(input_shape: tuple[int, int, int] = (224, 224, 3),
                     classes: tuple[str, ...] = CLASS_LABELS) -> ModelGraph:
    """The reference stack: 8x8/s3 stem, 5x5 then 3x3/1x1 interior convs at
    stride 1 with same padding, three 512-wide blocks, and a 1024-1024-K
    dense head with 0.5 dropout. The fusion marker sits after the fifth
    batch norm. At 224x224x3 this graph has 15,605,124 trainable and 6,400
    non-trainable parameters."""
    if input_shape[0] < 8 or input_shape[1] < 8:
        raise ConfigurationError(f"input shape {input_shape} too small, need at least 8x8")
    layers = (
        _conv_bn(128, 8, stride=3)
        + _conv_bn(256, 5, padding="same")
        + [LayerSpec("maxpool", pool=3, stride=3)]
        + _conv_bn(256, 3, padding="same")
        + _conv_bn(256, 1)
        + _conv_bn(256, 1)
        + [LayerSpec("intersect_marker")]
        + _conv_bn(512, 3, padding="same")
        + [LayerSpec("maxpool", pool=2, stride=2)]
        + _conv_bn(512, 3, padding="same")
        + _conv_bn(512, 3, padding="same")
        + [LayerSpec("maxpool", pool=2, stride=2)]
        + _conv_bn(512, 3, padding="same")
        + [LayerSpec("maxpool", pool=2, stride=2),
           LayerSpec("flatten"),
           LayerSpec("dense", units=1024, activation="relu"),
           LayerSpec("dropout", rate=0.5),
           LayerSpec("dense", units=1024, activation="relu"),
           LayerSpec("dropout", rate=0.5),
           LayerSpec("dense", units=len(classes))]
    )
    g = _pin_anchor_shapes(ModelGraph(input_shape, layers, classes))
    g.taps["penultimate_dense"] = _penultimate_dense(g)
    return g


def build_compact_cnn(input_shape: tuple[int, int, int] = (64, 64, 3),
                      classes: tuple[str, ...] = CLASS_LABELS) -> ModelGraph:
    """Same topology as :func:`build_custom_cnn` scaled for small inputs:
    narrower widths, a 5x5/s2 stem, a 128-wide dense head, and faster
    batch-norm momentum (short desk-scale runs take few optimizer steps, so
    the moving statistics must converge quickly for inference to track
    training)."""
    m = 0.9
    layers = (
        _conv_bn(16, 5, stride=2, momentum=m)
        + _conv_bn(32, 3, padding="same", momentum=m)
        + [LayerSpec("maxpool", pool=3, stride=3)]
        + _conv_bn(32, 3, padding="same", momentum=m)
        + _conv_bn(32, 1, momentum=m)
        + _conv_bn(32, 1, momentum=m)
        + [LayerSpec("intersect_marker")]
        + _conv_bn(64, 3, padding="same", momentum=m)
        + [LayerSpec("maxpool", pool=2, stride=2)]
        + _conv_bn(64, 3, padding="same", momentum=m)
        + _conv_bn(64, 3, padding="same", momentum=m)
        + [LayerSpec("maxpool", pool=2, stride=2)]
        + _conv_bn(64, 3, padding="same", momentum=m)
        + [LayerSpec("maxpool", pool=2, stride=2),
           LayerSpec("flatten"),
           LayerSpec("dense", units=128, activation="relu"),
           LayerSpec("dropout", rate=0.5),
           LayerSpec("dense", units=128, activation="relu"),
           LayerSpec("dropout", rate=0.5),
           LayerSpec("dense", units=len(classes))]
    )
    g = _pin_anchor_shapes(ModelGraph(input_shape, layers, classes))
    g.taps["penultimate_dense"] = _penultimate_dense(g)
    return g


def _penultimate_dense(g: ModelGraph) -> str:
    dense_names = [n for n, s in zip(g.layer_names, g.layers) if s.kind == "dense"]
    if len(dense_names) < 2:
        raise ConfigurationError("graph has no penultimate dense layer")
    return dense_names[-2]


@dataclass(frozen=True)
class BranchConfig:
    """Residual backbone settings for one binary subtask.

    `stage_widths` are per-stage output channel counts (bottleneck mid width
    is a quarter of that); `blocks` counts residual units per stage. The stem
    halves the spatial extent twice (7x7/s2 conv, then 3x3/s2 pool), putting
    stage-1 activations at 56x56 for a 224 input. `tap_stage` picks which
    stage's output feeds feature fusion (1-based).
    """

    task: str
    stage_widths: tuple[int, ...] = (64, 256, 512)
    blocks: tuple[int, ...] = (2, 2, 2)
    tap_stage: int = 2
    bn_momentum: float = 0.99

    def __post_init__(self):
        if self.task not in TASK_CLASSES:
            raise ConfigurationError(
                f"unknown branch task {self.task!r}, expected one of {sorted(TASK_CLASSES)}")
        if len(self.stage_widths) != len(self.blocks) or not self.stage_widths:
            raise ConfigurationError("stage_widths and blocks must be equal-length and non-empty")
        if any(b < 1 for b in self.blocks):
            raise ConfigurationError("every stage needs at least one block")
        if list(self.stage_widths) != sorted(self.stage_widths):
            raise ConfigurationError("stage widths must be monotone non-decreasing")
        if not 1 <= self.tap_stage <= len(self.stage_widths):
            raise ConfigurationError(
                f"tap stage {self.tap_stage} out of range 1..{len(self.stage_widths)}")

    def to_dict(self) -> dict:
        return {"task": self.task, "stage_widths": list(self.stage_widths),
                "blocks": list(self.blocks), "tap_stage": self.tap_stage,
                "bn_momentum": self.bn_momentum}

    @staticmethod
    def from_dict(d: dict) -> "BranchConfig":
        return BranchConfig(task=d["task"], stage_widths=tuple(d["stage_widths"]),
                            blocks=tuple(d["blocks"]), tap_stage=int(d["tap_stage"]),
                            bn_momentum=float(d.get("bn_momentum", 0.99)))


COMPACT_BRANCH_WIDTHS = (16, 32, 64)
COMPACT_BRANCH_BLOCKS = (1, 1, 1)


def build_branch(config: BranchConfig, input_shape: tuple[int, int, int] = (224, 224, 3),
                 num_classes: int = 2) -> ModelGraph:
    """Residual bottleneck backbone with a global-average-pool binary head.

    Emits a `stage_tap` capture point at the last block of the configured
    stage; that activation map is what feature fusion consumes.
    """
    stem = config.stage_widths[0]
    m = config.bn_momentum
    layers: list[LayerSpec] = [
        LayerSpec("conv", filters=stem, kernel=7, stride=2, padding="same", use_bias=False),
        LayerSpec("batchnorm", activation="relu", momentum=m),
        LayerSpec("maxpool", pool=3, stride=2, padding="same"),
    ]
    tap_index = None
    for stage, (width, n_blocks) in enumerate(zip(config.stage_widths, config.blocks), start=1):
        for j in range(n_blocks):
            stride = 2 if (stage > 1 and j == 0) else 1
            layers.append(LayerSpec("residual_block", filters=width, stride=stride, momentum=m))
        if stage == config.tap_stage:
            tap_index = len(layers) - 1
    layers += [LayerSpec("global_avg_pool"), LayerSpec("dense", units=num_classes)]

    classes = TASK_CLASSES[config.task]
    if num_classes != len(classes):
        classes = tuple(f"class_{i}" for i in range(num_classes))
    g = ModelGraph(input_shape, layers, classes)
    g.taps["stage_tap"] = g.layer_names[tap_index]
    return g
