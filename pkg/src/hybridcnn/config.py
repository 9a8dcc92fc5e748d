"""Pipeline configuration: the custom graph, two branch configs, and fusion
settings, resolvable from a preset name or a JSON file.

Presets:

* ``canonical`` - the full 224x224 reference architecture (the one whose
  parameter table the inspect command reproduces).
* ``compact``   - the proportionally scaled 64x64 variant for desk-scale
  training runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .fusion import FusionConfig, HybridModel, build_hybrid
from .graphs import (BranchConfig, COMPACT_BRANCH_BLOCKS, COMPACT_BRANCH_WIDTHS,
                     ModelGraph, build_branch, build_compact_cnn, build_custom_cnn,
                     graph_from_config)

__all__ = ["PipelineConfig", "resolve_pipeline", "PRESETS"]

PIPELINE_SCHEMA_VERSION = 1


@dataclass
class PipelineConfig:
    """Everything needed to build the custom CNN, both branches, and fusion."""

    custom_cfg: dict
    branch_ns: BranchConfig
    branch_ct: BranchConfig
    fusion: FusionConfig
    name: str = "custom"

    def build_custom(self) -> ModelGraph:
        return graph_from_config(self.custom_cfg)

    def build_branches(self) -> tuple[ModelGraph, ModelGraph]:
        shape = tuple(self.custom_cfg["input_shape"])
        return (build_branch(self.branch_ns, input_shape=shape),
                build_branch(self.branch_ct, input_shape=shape))

    def build_hybrid(self, custom: ModelGraph, ns: ModelGraph, ct: ModelGraph,
                     tau: float | None = None) -> HybridModel:
        fusion = self.fusion if tau is None else FusionConfig(tau=tau, merge=self.fusion.merge)
        return build_hybrid(custom, ns, ct, fusion)

    def to_dict(self) -> dict:
        return {
            "version": PIPELINE_SCHEMA_VERSION,
            "custom": self.custom_cfg,
            "branches": {
                "normal_vs_stone": self.branch_ns.to_dict(),
                "cyst_vs_tumor": self.branch_ct.to_dict(),
            },
            "fusion": self.fusion.to_dict(),
        }


def _canonical_preset() -> PipelineConfig:
    return PipelineConfig(
        custom_cfg=build_custom_cnn().to_config(),
        branch_ns=BranchConfig(task="normal_vs_stone"),
        branch_ct=BranchConfig(task="cyst_vs_tumor"),
        fusion=FusionConfig(),
        name="canonical",
    )


def _compact_preset() -> PipelineConfig:
    return PipelineConfig(
        custom_cfg=build_compact_cnn().to_config(),
        branch_ns=BranchConfig(task="normal_vs_stone", stage_widths=COMPACT_BRANCH_WIDTHS,
                               blocks=COMPACT_BRANCH_BLOCKS, bn_momentum=0.9),
        branch_ct=BranchConfig(task="cyst_vs_tumor", stage_widths=COMPACT_BRANCH_WIDTHS,
                               blocks=COMPACT_BRANCH_BLOCKS, bn_momentum=0.9),
        fusion=FusionConfig(),
        name="compact",
    )


PRESETS = {"canonical": _canonical_preset, "compact": _compact_preset}


def resolve_pipeline(spec: str | Path) -> PipelineConfig:
    """Turn a preset name or JSON file path into a PipelineConfig.

    A file may hold either a full pipeline config or a bare model-graph
    config (a `layers` list); the latter gets default branches and fusion
    sized to its input shape.
    """
    key = str(spec)
    if key in PRESETS:
        return PRESETS[key]()
    p = Path(spec)
    if not p.exists():
        raise ConfigurationError(
            f"model config {spec!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor a file")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{p}: invalid JSON ({e.msg})") from None
    if "layers" in cfg:
        graph_from_config(cfg)  # validate eagerly
        small = max(cfg["input_shape"][:2]) < 128
        base = _compact_preset() if small else _canonical_preset()
        return PipelineConfig(custom_cfg=cfg, branch_ns=base.branch_ns,
                              branch_ct=base.branch_ct, fusion=base.fusion, name=p.stem)
    version = cfg.get("version")
    if version != PIPELINE_SCHEMA_VERSION:
        raise ConfigurationError(
            f"{p}: pipeline config version {version!r}, this build reads version {PIPELINE_SCHEMA_VERSION}")
    for key_ in ("custom", "branches", "fusion"):
        if key_ not in cfg:
            raise ConfigurationError(f"{p}: pipeline config missing {key_!r}")
    graph_from_config(cfg["custom"])  # validate eagerly
    branches = cfg["branches"]
    try:
        ns = BranchConfig.from_dict(branches["normal_vs_stone"])
        ct = BranchConfig.from_dict(branches["cyst_vs_tumor"])
    except KeyError as e:
        raise ConfigurationError(f"{p}: branches section missing {e}") from None
    return PipelineConfig(custom_cfg=cfg["custom"], branch_ns=ns, branch_ct=ct,
                          fusion=FusionConfig.from_dict(cfg["fusion"]), name=p.stem)
