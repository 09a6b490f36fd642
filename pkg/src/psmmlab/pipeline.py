"""Model construction, the training loop and clip-level scoring."""

from __future__ import annotations

import math
import zlib
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .augment import resize
from .loader import BatchLoader, ClipStore, group_samples
from .nn import ParameterStore
from .optim import Adam
from .protocols import ManifestRow
from .psmm import PSMMConfig, PSMMNet, canonical_modalities
from .rankpool import DEFAULT_K, window_starts
from .sdnet import SDNet, SDNetConfig

VARIANTS = ("psmm", "psmm-wobf", "nhf", "sdnet")
PAD = {"toy": 4, "resnet18": 8}


class NumericalError(RuntimeError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


def derive_seed(seed: int, name: str) -> int:
    """Fixed split of the run seed into a named sub-seed."""
    return int(np.random.SeedSequence([seed & (2**64 - 1), zlib.crc32(name.encode())]).generate_state(1)[0])


def build_model(variant: str, preset: str, modalities: Sequence[str], seed: int = 0, norm: str = "batch"):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    mods = canonical_modalities(modalities)
    store = ParameterStore(np.random.default_rng(derive_seed(seed, "init")))
    if variant == "sdnet":
        if len(mods) != 1:
            raise ValueError("the sdnet variant takes exactly one modality")
        return SDNet(SDNetConfig(mods[0], preset, norm), store)
    return PSMMNet(PSMMConfig(mods, variant.replace("-", "_"), preset, norm), store)


def input_size(model) -> int:
    return model.cfg.input_size if isinstance(model, SDNet) else model.input_size


def model_meta(variant: str, preset: str, model) -> dict[str, str]:
    return {"variant": variant, "preset": preset, "modalities": ",".join(model.modalities)}


def as_inputs(arrays: dict[str, tuple[np.ndarray, np.ndarray]]) -> dict[str, tuple[T.Tensor, T.Tensor]]:
    return {m: (T.constant(s), T.constant(d)) for m, (s, d) in arrays.items()}


@dataclass
class TrainConfig:
    epochs: int = 25
    batch: int = 64
    lr: float = 0.1
    decay_epochs: tuple[int, ...] = (15, 20)
    k: int = DEFAULT_K
    stride: int | None = None
    seed: int = 0
    augment: bool = True


@dataclass
class EpochLog:
    epoch: int
    lr: float
    steps: int
    losses: dict[str, float] = field(default_factory=dict)

    def line(self) -> str:
        parts = [f"epoch={self.epoch}", f"lr={self.lr:g}", f"steps={self.steps}"]
        parts += [f"{k}={v:.6g}" for k, v in self.losses.items()]
        return " ".join(parts)


def make_loader(root, manifest, model, cfg: TrainConfig, store: ClipStore | None = None) -> BatchLoader:
    preset = model.cfg.preset
    return BatchLoader(
        root,
        manifest,
        model.modalities,
        input_size(model),
        cfg.k,
        cfg.stride,
        augment=cfg.augment,
        pad=PAD.get(preset, 4),
        seed=derive_seed(cfg.seed, "data"),
        store=store,
    )


def train(model, loader: BatchLoader, cfg: TrainConfig, log: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """Adam over ``cfg.epochs`` passes; raises :class:`NumericalError` on a non-finite loss."""
    opt = Adam(list(model.store.params.values()), lr=cfg.lr, decay_epochs=cfg.decay_epochs)
    history = []
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        sums: dict[str, float] = {}
        steps = 0
        for batch in loader.epoch(epoch, cfg.batch):
            model.store.zero_grad()
            acts = model.forward_inputs(as_inputs(batch.inputs), train=True)
            loss = model.loss(acts, batch.labels)
            total = loss.total.item()
            if not math.isfinite(total):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {steps}")
            T.backward(loss.total)
            opt.step()
            for k, v in loss.values().items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        entry = EpochLog(epoch + 1, opt.lr, steps, {k: v / steps for k, v in sums.items()})
        history.append(entry)
        if log is not None:
            log(entry)
    return history


def save_model(directory, model, variant: str, extra: dict[str, str] | None = None):
    meta = model_meta(variant, model.cfg.preset, model)
    meta.update(extra or {})
    state = model.store.state()
    return checkpoint.save(directory, state, meta)


def load_model(directory, variant: str | None = None, preset: str | None = None, modalities=None):
    """Rebuild a model from a checkpoint, checking it against the requested configuration."""
    try:
        state, meta = checkpoint.load(directory)
    except checkpoint.CheckpointError as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    for key in ("variant", "preset", "modalities"):
        if key not in meta:
            raise IncompatibleCheckpoint(f"checkpoint lacks {key!r} metadata")
    want = {"variant": variant, "preset": preset}
    if modalities is not None:
        want["modalities"] = ",".join(canonical_modalities(modalities))
    for key, value in want.items():
        if value is not None and meta[key] != value:
            raise IncompatibleCheckpoint(f"checkpoint {key} is {meta[key]!r}, expected {value!r}")
    model = build_model(meta["variant"], meta["preset"], meta["modalities"].split(","))
    try:
        model.store.load_state(state, strict=True)
    except (KeyError, ValueError) as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    return model, meta


def score_samples(
    model,
    root,
    manifest: Sequence[ManifestRow],
    k: int = DEFAULT_K,
    stride: int | None = None,
    store: ClipStore | None = None,
    chunk: int = 32,
) -> list[tuple[str, float, int, str]]:
    """Clip scores: mean bona fide probability over the clip's windows.

    Each window contributes its first frame as the static image.  Models
    over several modalities score a sample from all of them together; a
    single-modality model scores every clip on its own, whatever its
    modality.  Returns ``(path, score, label, pai)`` per scored unit.
    """
    store = store if store is not None else ClipStore(root, k)
    size = input_size(model)
    mods = model.modalities
    units = []  # (path, label, pai, {model modality: clip path})
    if len(mods) == 1:
        for r in manifest:
            units.append((r.path, r.label, r.pai, {mods[0]: r.path}))
    else:
        for s in group_samples(manifest, mods):
            units.append((s.key, s.label, s.rows[mods[0]].pai, {m: s.rows[m].path for m in mods}))
    jobs = []  # (unit index, window start)
    for u, (_, _, _, paths) in enumerate(units):
        n = min(len(store.frames(p)) for p in paths.values())
        jobs.extend((u, s) for s in window_starts(n, k, stride))
    probs = np.zeros(len(jobs))
    for lo in range(0, len(jobs), chunk):
        part = jobs[lo : lo + chunk]
        arrays = {}
        for m in mods:
            st = [resize(store.frames(units[u][3][m])[s] / 255.0, size) for u, s in part]
            dy = [resize(store.dynamic(units[u][3][m], s), size) for u, s in part]
            arrays[m] = (np.stack(st).transpose(0, 3, 1, 2), np.stack(dy).transpose(0, 3, 1, 2))
        acts = model.forward_inputs(as_inputs(arrays), train=False)
        probs[lo : lo + len(part)] = T.sigmoid(model.score_logit(acts).data).reshape(-1)
    owner = np.array([u for u, _ in jobs])
    out = []
    for u, (path, label, pai, _) in enumerate(units):
        out.append((path, float(probs[owner == u].mean()), label, pai))
    return out
