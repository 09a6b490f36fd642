"""Single-modality static/dynamic network.

Three ResNet-style branches share one layer table but no weights:

* static  - stem + res1..res4 over the RGB/depth/IR frame,
* dynamic - stem + res1..res4 over the rank-pooled dynamic image,
* fused   - res2..res4 only, fed with the elementwise sum of the static and
  dynamic level-1 features.

Feature level ``t`` is the output of module ``t``: level 1 is stem + res1,
levels 2-4 are res2-res4.  Each branch ends in GAP and a one-logit head; a
fourth head reads the elementwise sum of the three GAP vectors.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import PRESETS, BackboneSpec, Dense, ParameterStore, Stage, Stem
from .tensor import ShapeError, Tensor

MODALITIES = ("color", "depth", "ir")
BRANCHES = ("static", "dynamic", "fused")
HEADS = ("static", "dynamic", "fused", "summed")
LEVELS = (1, 2, 3, 4)


@dataclass(frozen=True)
class SDNetConfig:
    modality: str = "color"
    preset: str = "toy"
    norm: str = "batch"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.norm not in ("batch", "none"):
            raise ValueError(f"norm must be 'batch' or 'none', got {self.norm!r}")

    @property
    def backbone(self) -> BackboneSpec:
        return PRESETS[self.preset]

    @property
    def input_size(self) -> int:
        return self.backbone.input_size


class Trunk:
    """The modules of one branch, addressable by feature level."""

    def __init__(self, store: ParameterStore, prefix: str, spec: BackboneSpec, norm: str, levels=LEVELS):
        self.prefix = prefix
        self.levels = tuple(levels)
        self.modules: dict[int, object] = {}
        w = spec.widths
        for t in self.levels:
            name = f"{prefix}.{t}"
            if t == 1:
                stem = Stem(store, f"{name}.stem", spec.in_channels, w[0], spec.stem_kernel, spec.stem_stride, spec.pool, norm)
                res = Stage(store, f"{name}.res", w[0], w[0], 1, spec.blocks, norm)
                self.modules[1] = (stem, res)
            else:
                self.modules[t] = Stage(store, f"{name}.res", w[t - 2], w[t - 1], 2, spec.blocks, norm)

    def level(self, t: int, x: Tensor, train: bool, tag: str | None = None) -> Tensor:
        if t == 1:
            stem, res = self.modules[1]
            y = res(stem(x, train), train)
        else:
            y = self.modules[t](x, train)
        y.tag = tag
        return y


@dataclass
class SDNetActivations:
    xs: dict[int, Tensor] = field(default_factory=dict)
    xd: dict[int, Tensor] = field(default_factory=dict)
    xf: dict[int, Tensor] = field(default_factory=dict)
    gap: dict[str, Tensor] = field(default_factory=dict)
    logits: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class Loss:
    total: Tensor
    parts: dict[str, Tensor]

    def values(self) -> dict[str, float]:
        out = {k: v.item() for k, v in self.parts.items()}
        out["total"] = self.total.item()
        return out


class SDNet:
    def __init__(self, cfg: SDNetConfig, store: ParameterStore | None = None, prefix: str | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore(np.random.default_rng(seed))
        self.prefix = prefix or f"sdnet.{cfg.modality}"
        spec = cfg.backbone
        self.trunks = {
            "static": Trunk(self.store, f"{self.prefix}.static", spec, cfg.norm),
            "dynamic": Trunk(self.store, f"{self.prefix}.dynamic", spec, cfg.norm),
            "fused": Trunk(self.store, f"{self.prefix}.fused", spec, cfg.norm, levels=(2, 3, 4)),
        }
        width = spec.widths[-1]
        self.heads = {h: Dense(self.store, f"{self.prefix}.head.{h}", width, 1) for h in HEADS}

    @property
    def modalities(self) -> tuple[str, ...]:
        return (self.cfg.modality,)

    def check_input(self, x: Tensor, what: str):
        s = self.cfg.input_size
        if x.data.ndim != 4 or x.shape[1:] != (self.cfg.backbone.in_channels, s, s):
            raise ShapeError(f"{what}: expected (N, 3, {s}, {s}), got {x.shape}")

    def level1(self, static: Tensor, dynamic: Tensor, train: bool):
        self.check_input(static, "static image")
        self.check_input(dynamic, "dynamic image")
        if static.shape != dynamic.shape:
            raise ShapeError(f"static {static.shape} and dynamic {dynamic.shape} batch differ")
        p = self.prefix
        xs = self.trunks["static"].level(1, static, train, tag=f"{p}.static.X1")
        xd = self.trunks["dynamic"].level(1, dynamic, train, tag=f"{p}.dynamic.X1")
        xf = T.residual_add(xs, xd, tag=f"{p}.fused.X1")
        return xs, xd, xf

    def level(self, branch: str, t: int, x: Tensor, train: bool) -> Tensor:
        return self.trunks[branch].level(t, x, train, tag=f"{self.prefix}.{branch}.X{t}")

    def apply_heads(self, acts: SDNetActivations):
        p = self.prefix
        for b in BRANCHES:
            source = {"static": acts.xs, "dynamic": acts.xd, "fused": acts.xf}[b]
            acts.gap[b] = T.global_avg_pool(source[4], tag=f"{p}.{b}.gap")
        acts.gap["summed"] = T.add_n([acts.gap[b] for b in BRANCHES], tag=f"{p}.summed.gap")
        for h in HEADS:
            acts.logits[h] = self.heads[h](acts.gap[h])
            acts.logits[h].tag = f"{p}.logit.{h}"

    def forward(self, static: Tensor, dynamic: Tensor, train: bool = True) -> SDNetActivations:
        acts = SDNetActivations()
        acts.xs[1], acts.xd[1], acts.xf[1] = self.level1(static, dynamic, train)
        for t in (2, 3, 4):
            acts.xs[t] = self.level("static", t, acts.xs[t - 1], train)
            acts.xd[t] = self.level("dynamic", t, acts.xd[t - 1], train)
            acts.xf[t] = self.level("fused", t, acts.xf[t - 1], train)
        self.apply_heads(acts)
        return acts

    # uniform model interface shared with PSMMNet
    def forward_inputs(self, inputs: Mapping[str, tuple[Tensor, Tensor]], train: bool = True) -> SDNetActivations:
        if self.cfg.modality not in inputs:
            raise KeyError(f"missing input for modality {self.cfg.modality!r}")
        static, dynamic = inputs[self.cfg.modality]
        return self.forward(static, dynamic, train)

    def loss(self, acts: SDNetActivations, label) -> Loss:
        return sd_loss(acts, label)

    def score_logit(self, acts: SDNetActivations) -> Tensor:
        return acts.logits["summed"]


def sd_loss(acts: SDNetActivations, label, prefix: str = "") -> Loss:
    """Sum of the four head BCE losses of one SD-Net."""
    parts = {f"{prefix}{h}": T.sigmoid_bce_loss(acts.logits[h], label) for h in HEADS}
    total = T.add_n(list(parts.values()), tag="loss.sdnet")
    return Loss(total, parts)

