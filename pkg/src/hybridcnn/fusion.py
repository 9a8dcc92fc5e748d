"""Feature-intersection fusion and the hybrid model.

The hybrid forward pass runs the custom CNN up to its fusion point, taps
both residual branches, merges the two branch maps, projects them onto the
custom feature geometry (1x1 conv + bilinear resize), and blends them into
the custom features channel-by-channel wherever the cosine similarity
clears the threshold. Channels below the threshold keep the custom
features unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError
from .graphs import ModelGraph
from .tensor import Tensor, active_tape, ensure_finite

__all__ = ["FusionConfig", "intersect_features", "merge_features", "HybridModel", "build_hybrid"]


@dataclass(frozen=True)
class FusionConfig:
    """Similarity threshold and merge rule for the two branch feature maps."""

    tau: float = 0.5
    merge: str = "mean"

    def __post_init__(self):
        if not -1.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"similarity threshold must be in [-1, 1], got {self.tau}")
        if self.merge not in ("mean", "max"):
            raise ConfigurationError(f"merge rule must be 'mean' or 'max', got {self.merge!r}")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "merge": self.merge}

    @staticmethod
    def from_dict(d: dict) -> "FusionConfig":
        return FusionConfig(tau=float(d.get("tau", 0.5)), merge=d.get("merge", "mean"))


def intersect_features(a: Tensor, b: Tensor, tau: float, *,
                       name: str = "intersect_features") -> tuple[Tensor, np.ndarray]:
    """Cosine-gated channel blend of two equally shaped NHWC maps.

    Per sample and channel, the similarity is the cosine between the two
    flattened channel maps (0 when either has zero norm). Channels at or
    above `tau` become the mean of both maps, channels below keep `a`.
    Returns the blended map and the boolean accept mask of shape (N, C).
    The mask is treated as a constant by the backward pass: gradients flow
    through the blend arithmetic only.
    """
    if not -1.0 <= tau <= 1.0:
        raise ConfigurationError(f"{name}: threshold must be in [-1, 1], got {tau}")
    if a.ndim != 4 or b.ndim != 4:
        raise ConfigurationError(f"{name}: expected 4-D NHWC maps, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ConfigurationError(f"{name}: shape mismatch {a.shape} vs {b.shape}")

    dots = np.einsum("nhwc,nhwc->nc", a.data, b.data)
    sq_a = np.einsum("nhwc,nhwc->nc", a.data, a.data)
    sq_b = np.einsum("nhwc,nhwc->nc", b.data, b.data)
    # sqrt(sq*sq) == sq exactly in IEEE arithmetic, so cosine(v, v) is
    # exactly 1 and cosine(v, -v) exactly -1; the clip guards tau = -1
    denom = np.sqrt(sq_a * sq_b)
    sim = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    np.clip(sim, -1.0, 1.0, out=sim)
    mask = sim >= tau
    m4 = mask[:, None, None, :]
    out_data = np.where(m4, (a.data + b.data) * np.asarray(0.5, dtype=a.dtype), a.data)
    out = Tensor(ensure_finite(out_data, name), dtype=out_data.dtype)

    def rule(g: np.ndarray):
        half = np.asarray(0.5, dtype=g.dtype)
        da = np.where(m4, g * half, g)
        db = np.where(m4, g * half, np.zeros((), dtype=g.dtype))
        return [da, db]

    tape = active_tape()
    if tape is not None:
        tape.record(out, (a, b), rule, name)
    return out, mask


def merge_features(a: Tensor, b: Tensor, rule: str = "mean", *,
                   name: str = "merge_features") -> Tensor:
    """Elementwise mean or max of the two branch taps (same shape)."""
    if a.shape != b.shape:
        raise ConfigurationError(f"{name}: branch feature maps differ in shape, {a.shape} vs {b.shape}")
    if rule == "mean":
        out = Tensor((a.data + b.data) * np.asarray(0.5, dtype=a.dtype))

        def back(g: np.ndarray):
            half = np.asarray(0.5, dtype=g.dtype)
            return [g * half, g * half]
    elif rule == "max":
        pick_a = a.data >= b.data
        out = Tensor(np.where(pick_a, a.data, b.data))

        def back(g: np.ndarray):
            zero = np.zeros((), dtype=g.dtype)
            return [np.where(pick_a, g, zero), np.where(pick_a, zero, g)]
    else:
        raise ConfigurationError(f"{name}: unknown merge rule {rule!r}")

    tape = active_tape()
    if tape is not None:
        tape.record(out, (a, b), back, name)
    return out


class HybridModel:
    """Custom CNN + two frozen-or-tunable residual branches + fusion.

    Exposes the same forward/parameter surface as :class:`ModelGraph` so the
    training loop, checkpointing, and evaluation treat both uniformly.
    """

    def __init__(self, custom: ModelGraph, branch_ns: ModelGraph, branch_ct: ModelGraph,
                 fusion: FusionConfig):
        for g, label in ((branch_ns, "normal-stone branch"), (branch_ct, "cyst-tumor branch")):
            if g.input_shape != custom.input_shape:
                raise ConfigurationError(
                    f"{label} input shape {g.input_shape} differs from custom CNN {custom.input_shape}")
            if "stage_tap" not in g.taps:
                raise ConfigurationError(f"{label} exposes no stage tap for fusion")
        if "fusion_point" not in custom.taps:
            raise ConfigurationError("custom CNN has no fusion point marker")

        self.custom = custom
        self.branch_ns = branch_ns
        self.branch_ct = branch_ct
        self.fusion = fusion
        self.classes = custom.classes
        self.input_shape = custom.input_shape
        self.freeze_branches = True
        self.last_mask: np.ndarray | None = None

        shapes_ns = dict(branch_ns.symbolic_shapes())[branch_ns.taps["stage_tap"]]
        shapes_ct = dict(branch_ct.symbolic_shapes())[branch_ct.taps["stage_tap"]]
        if shapes_ns != shapes_ct:
            raise ConfigurationError(
                f"branch taps disagree in shape: {shapes_ns} vs {shapes_ct}")
        target = dict(custom.symbolic_shapes())[custom.taps["fusion_point"]]
        self.tap_shape = shapes_ns
        self.target_shape = target
        self._proj_kernel_shape = (1, 1, shapes_ns[2], target[2])
        self.proj_kernel: Tensor | None = None
        self.proj_bias: Tensor | None = None

    # -- parameters -----------------------------------------------------------

    def initialize_projection(self, seed: int = 0) -> "HybridModel":
        rng = np.random.default_rng(seed)
        fan_in = self._proj_kernel_shape[2]
        limit = np.sqrt(6.0 / fan_in)
        self.proj_kernel = Tensor(rng.uniform(-limit, limit, self._proj_kernel_shape).astype(np.float32),
                                  trainable=True, name="fusion/projection/kernel")
        self.proj_bias = Tensor(np.zeros(self.target_shape[2], dtype=np.float32),
                                trainable=True, name="fusion/projection/bias")
        return self

    def initialize(self, seed: int = 0) -> "HybridModel":
        self.custom.initialize(seed)
        self.branch_ns.initialize(seed + 1)
        self.branch_ct.initialize(seed + 2)
        return self.initialize_projection(seed + 3)

    def named_parameters(self) -> dict[str, Tensor]:
        if self.proj_kernel is None:
            raise ConfigurationError("projection parameters not initialized")
        out: dict[str, Tensor] = {}
        for prefix, graph in (("custom", self.custom), ("branch_ns", self.branch_ns),
                              ("branch_ct", self.branch_ct)):
            for k, v in graph.named_parameters().items():
                out[f"{prefix}/{k}"] = v
        out["fusion/projection/kernel"] = self.proj_kernel
        out["fusion/projection/bias"] = self.proj_bias
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        frozen = ("branch_ns/", "branch_ct/") if self.freeze_branches else ()
        return {k: v for k, v in self.named_parameters().items()
                if v.trainable and not k.startswith(frozen)}

    def parameter_totals(self) -> tuple[int, int]:
        tr, non = 0, 0
        for g in (self.custom, self.branch_ns, self.branch_ct):
            t, n = g.parameter_totals()
            tr, non = tr + t, non + n
        tr += int(np.prod(self._proj_kernel_shape)) + self.target_shape[2]
        return tr, non

    def set_projection(self, kernel: np.ndarray, bias: np.ndarray) -> None:
        if tuple(kernel.shape) != self._proj_kernel_shape:
            raise ConfigurationError(
                f"projection kernel shape {kernel.shape}, expected {self._proj_kernel_shape}")
        self.proj_kernel = Tensor(np.asarray(kernel, dtype=np.float32), trainable=True,
                                  name="fusion/projection/kernel")
        self.proj_bias = Tensor(np.asarray(bias, dtype=np.float32), trainable=True,
                                name="fusion/projection/bias")

    # -- execution -------------------------------------------------------------

    def branch_features(self, x: Tensor, *, mode: str = "infer") -> Tensor:
        """Merged branch taps, projected to the custom fusion geometry."""
        tap_ns = self._tap(self.branch_ns, x, mode)
        tap_ct = self._tap(self.branch_ct, x, mode)
        merged = merge_features(tap_ns, tap_ct, self.fusion.merge)
        proj = ops.conv2d(merged, self.proj_kernel, self.proj_bias, stride=1,
                          padding="same", name="fusion/projection")
        th, tw, _ = self.target_shape
        if proj.shape[1:3] != (th, tw):
            proj = ops.bilinear_resize(proj, th, tw, name="fusion/resize")
        return proj

    def _tap(self, graph: ModelGraph, x: Tensor, mode: str) -> Tensor:
        tap_name = graph.taps["stage_tap"]
        branch_mode = "infer" if self.freeze_branches else mode
        if self.freeze_branches and active_tape() is not None:
            # frozen branches contribute no gradients; keep them off the tape
            with _tape_paused():
                _, caps = graph.forward_collect(x, (tap_name,), mode=branch_mode)
        else:
            _, caps = graph.forward_collect(x, (tap_name,), mode=branch_mode)
        return caps[tap_name]

    def forward(self, x, *, mode: str = "infer", rng: np.random.Generator | None = None,
                custom_only: bool = False, branch_override: Tensor | None = None) -> Tensor:
        out, _ = self.forward_collect(x, (), mode=mode, rng=rng, custom_only=custom_only,
                                      branch_override=branch_override)
        return out

    def forward_collect(self, x, capture, *, mode: str = "infer",
                        rng: np.random.Generator | None = None, custom_only: bool = False,
                        branch_override: Tensor | None = None,
                        ) -> tuple[Tensor, dict[str, Tensor]]:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if custom_only:
            return self.custom.forward_collect(x, capture, mode=mode, rng=rng)
        branch = branch_override if branch_override is not None else self.branch_features(x, mode=mode)
        self.last_mask = None

        def fuse(custom_feats: Tensor) -> Tensor:
            fused, mask = intersect_features(custom_feats, branch, self.fusion.tau)
            self.last_mask = mask
            return fused

        return self.custom.forward_collect(x, capture, mode=mode, rng=rng, fusion_fn=fuse)

    @property
    def taps(self) -> dict[str, str]:
        return self.custom.taps

    # -- serialization ----------------------------------------------------------

    def to_config(self) -> dict:
        return {
            "version": 1,
            "kind": "hybrid",
            "fusion": self.fusion.to_dict(),
            "custom": self.custom.to_config(),
            "branch_ns": self.branch_ns.to_config(),
            "branch_ct": self.branch_ct.to_config(),
        }


class _tape_paused:
    """Temporarily detach the active tape so wrapped ops go unrecorded."""

    def __enter__(self):
        from . import tensor as _t
        self._saved = _t._ACTIVE_TAPE
        _t._ACTIVE_TAPE = None

    def __exit__(self, exc_type, exc, tb):
        from . import tensor as _t
        _t._ACTIVE_TAPE = self._saved


def build_hybrid(custom: ModelGraph, branch_ns: ModelGraph, branch_ct: ModelGraph,
                 fusion: FusionConfig | None = None) -> HybridModel:
    """Compose the three sub-graphs into the fused four-way classifier."""
    return HybridModel(custom, branch_ns, branch_ct, fusion or FusionConfig())
