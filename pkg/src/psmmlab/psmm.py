"""Partially shared multi-modal network and its two fusion ablations.

Variants:

``psmm``
    One SD-Net per modality plus a shared res2..res4 trunk.  The shared
    block at level ``t+1`` consumes ``S~t = sum_k Xs[t] + sum_k Xd[t] + S[t]``
    for t = 1, 2, 3 (with ``S[1] = 0``), and the shared outputs are added
    back onto the static and dynamic features at t = 2, 3 before they enter
    the next SD-Net module.  The fused branch never sees shared features.
``psmm_wobf``
    As ``psmm`` without the add-back.
``nhf``
    Per-modality level-1 modules only; their static and dynamic outputs
    are summed once and run through a single shared res2..res4 trunk.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Dense, ParameterStore
from .sdnet import MODALITIES, SDNet, SDNetActivations, SDNetConfig, Loss, Trunk, sd_loss
from .tensor import ShapeError, Tensor

VARIANTS = ("psmm", "psmm_wobf", "nhf")
FORWARD_FEED_LEVELS = (1, 2, 3)
BACKWARD_FEED_LEVELS = (2, 3)


def canonical_modalities(modalities: Sequence[str]) -> tuple[str, ...]:
    mods = set(modalities)
    unknown = mods - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    return tuple(m for m in MODALITIES if m in mods)


@dataclass(frozen=True)
class PSMMConfig:
    modalities: tuple[str, ...] = MODALITIES
    variant: str = "psmm"
    preset: str = "toy"
    norm: str = "batch"
    # False reuses the first modality's summed-feature head for the whole-network logit
    dedicated_whole_head: bool = True

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("PSMM needs at least one modality")
        object.__setattr__(self, "modalities", canonical_modalities(self.modalities))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")

    def sd_config(self, modality: str) -> SDNetConfig:
        return SDNetConfig(modality=modality, preset=self.preset, norm=self.norm)


def forward_feed_fuse(xs: Sequence[Tensor], xd: Sequence[Tensor], s: Tensor, tag=None) -> Tensor:
    """``S~ = sum(xs) + sum(xd) + s``, accumulated in that order."""
    return T.add_n([*xs, *xd, s], tag=tag)


def backward_feed_fuse(xs: Tensor, xd: Tensor, s: Tensor, tags=(None, None)) -> tuple[Tensor, Tensor]:
    return T.residual_add(xs, s, tag=tags[0]), T.residual_add(xd, s, tag=tags[1])


@dataclass
class PSMMActivations:
    sd: dict[str, SDNetActivations] = field(default_factory=dict)
    shared: dict[int, Tensor] = field(default_factory=dict)  # S[t], t = 1..4
    shared_in: dict[int, Tensor] = field(default_factory=dict)  # S~[t], t = 1..3
    fed_back: dict[tuple[str, str, int], Tensor] = field(default_factory=dict)
    whole_gap: Tensor | None = None
    whole_logit: Tensor | None = None


class PSMMNet:
    def __init__(self, cfg: PSMMConfig, store: ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore(np.random.default_rng(seed))
        spec = cfg.sd_config(cfg.modalities[0]).backbone
        self.sdnets: dict[str, SDNet] = {}
        self.level1: dict[str, dict[str, Trunk]] = {}
        if cfg.variant == "nhf":
            for m in cfg.modalities:
                self.level1[m] = {
                    b: Trunk(self.store, f"psmm.{m}.{b}", spec, cfg.norm, levels=(1,)) for b in ("static", "dynamic")
                }
        else:
            for m in cfg.modalities:
                self.sdnets[m] = SDNet(cfg.sd_config(m), self.store, prefix=f"psmm.{m}")
        self.shared = Trunk(self.store, "psmm.shared", spec, cfg.norm, levels=(2, 3, 4))
        if cfg.dedicated_whole_head or cfg.variant == "nhf":
            self.whole_head = Dense(self.store, "psmm.whole.head", spec.widths[-1], 1)
        else:
            self.whole_head = self.sdnets[cfg.modalities[0]].heads["summed"]
        self.input_size = spec.input_size

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.cfg.modalities

    def _inputs(self, inputs):
        missing = [m for m in self.cfg.modalities if m not in inputs]
        if missing:
            raise KeyError(f"missing inputs for modalities {missing}")
        shapes = {inputs[m][0].shape for m in self.cfg.modalities} | {inputs[m][1].shape for m in self.cfg.modalities}
        if len(shapes) != 1:
            raise ShapeError(f"all modality inputs must share one shape, got {sorted(shapes)}")
        return [(m, *inputs[m]) for m in self.cfg.modalities]

    def forward(self, inputs: Mapping[str, tuple[Tensor, Tensor]], train: bool = True) -> PSMMActivations:
        if self.cfg.variant == "nhf":
            return self._forward_nhf(inputs, train)
        feedback = self.cfg.variant == "psmm"
        acts = PSMMActivations()
        mods = self.cfg.modalities
        for m, static, dynamic in self._inputs(inputs):
            a = SDNetActivations()
            a.xs[1], a.xd[1], a.xf[1] = self.sdnets[m].level1(static, dynamic, train)
            acts.sd[m] = a
        acts.shared[1] = T.zeros(acts.sd[mods[0]].xs[1].shape, tag="psmm.shared.S1")
        for t in FORWARD_FEED_LEVELS:
            s_in = forward_feed_fuse(
                [acts.sd[m].xs[t] for m in mods],
                [acts.sd[m].xd[t] for m in mods],
                acts.shared[t],
                tag=f"psmm.forward_feed.t{t}",
            )
            acts.shared_in[t] = s_in
            acts.shared[t + 1] = self.shared.level(t + 1, s_in, train, tag=f"psmm.shared.S{t + 1}")
            for m in mods:
                a, net = acts.sd[m], self.sdnets[m]
                xs_in, xd_in = a.xs[t], a.xd[t]
                if feedback and t in BACKWARD_FEED_LEVELS:
                    xs_in, xd_in = backward_feed_fuse(
                        xs_in,
                        xd_in,
                        acts.shared[t],
                        tags=(f"psmm.backward_feed.{m}.static.t{t}", f"psmm.backward_feed.{m}.dynamic.t{t}"),
                    )
                    acts.fed_back[(m, "static", t)] = xs_in
                    acts.fed_back[(m, "dynamic", t)] = xd_in
                a.xs[t + 1] = net.level("static", t + 1, xs_in, train)
                a.xd[t + 1] = net.level("dynamic", t + 1, xd_in, train)
                a.xf[t + 1] = net.level("fused", t + 1, a.xf[t], train)
        for m in mods:
            self.sdnets[m].apply_heads(acts.sd[m])
        shared_gap = T.global_avg_pool(acts.shared[4], tag="psmm.shared.gap")
        acts.whole_gap = T.add_n([acts.sd[m].gap["summed"] for m in mods] + [shared_gap], tag="psmm.whole.gap")
        acts.whole_logit = self.whole_head(acts.whole_gap)
        acts.whole_logit.tag = "psmm.logit.whole"
        return acts

    def _forward_nhf(self, inputs, train):
        acts = PSMMActivations()
        xs, xd = [], []
        for m, static, dynamic in self._inputs(inputs):
            if static.shape[1:] != (3, self.input_size, self.input_size):
                raise ShapeError(f"{m}: expected (N, 3, {self.input_size}, {self.input_size}), got {static.shape}")
            a = SDNetActivations()
            a.xs[1] = self.level1[m]["static"].level(1, static, train, tag=f"psmm.{m}.static.X1")
            a.xd[1] = self.level1[m]["dynamic"].level(1, dynamic, train, tag=f"psmm.{m}.dynamic.X1")
            acts.sd[m] = a
            xs.append(a.xs[1])
            xd.append(a.xd[1])
        acts.shared[1] = T.zeros(xs[0].shape, tag="psmm.shared.S1")
        acts.shared_in[1] = forward_feed_fuse(xs, xd, acts.shared[1], tag="psmm.nhf_fuse.t1")
        h = acts.shared_in[1]
        for t in (2, 3, 4):
            h = acts.shared[t] = self.shared.level(t, h, train, tag=f"psmm.shared.S{t}")
        acts.whole_gap = T.global_avg_pool(acts.shared[4], tag="psmm.whole.gap")
        acts.whole_logit = self.whole_head(acts.whole_gap)
        acts.whole_logit.tag = "psmm.logit.whole"
        return acts

    def forward_inputs(self, inputs, train: bool = True) -> PSMMActivations:
        return self.forward(inputs, train)

    def loss(self, acts: PSMMActivations, label) -> Loss:
        return psmm_loss(acts, label)

    def score_logit(self, acts: PSMMActivations) -> Tensor:
        return acts.whole_logit


def psmm_loss(acts: PSMMActivations, label) -> Loss:
    """Whole-network BCE plus the four-head SD-Net loss of each modality present."""
    parts = {"whole": T.sigmoid_bce_loss(acts.whole_logit, label)}
    for m in MODALITIES:
        a = acts.sd.get(m)
        if a is None or not a.logits:
            continue
        sub = sd_loss(a, label, prefix=f"{m}.")
        parts[m] = sub.total
        parts.update(sub.parts)
    totals = [parts["whole"]] + [parts[m] for m in MODALITIES if m in parts]
    return Loss(T.add_n(totals, tag="loss.psmm"), parts)
