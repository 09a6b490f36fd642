"""Batch assembly: frame sampling, dynamic images and shared augmentation.

Rows of a manifest that differ only in modality form one *sample*; a batch
draws samples, and every modality of a sample gets the same window, the
same frame and the same augmentation parameters so labels and geometry stay
aligned across streams.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rankpool
from .augment import AugmentParams, apply_params, resize, sample_params
from .dataset import MODALITIES, load_frames
from .protocols import ManifestRow


class LoaderError(ValueError):
    pass


def worker_count() -> int:
    """Worker threads allowed by ``PSMMLAB_THREADS`` (default 1)."""
    raw = os.environ.get("PSMMLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise LoaderError(f"PSMMLAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class Sample:
    key: str
    label: int
    rows: dict[str, ManifestRow]  # modality -> row


def group_samples(manifest: Sequence[ManifestRow], modalities: Sequence[str] | None = None) -> list[Sample]:
    """Group rows by sample; with ``modalities`` given, keep samples that have all of them."""
    groups: OrderedDict[str, Sample] = OrderedDict()
    for r in manifest:
        g = groups.setdefault(r.sample_key, Sample(r.sample_key, r.label, {}))
        if g.label != r.label:
            raise LoaderError(f"sample {r.sample_key} mixes labels across modalities")
        g.rows[r.modality] = r
    out = list(groups.values())
    if modalities is not None:
        out = [g for g in out if all(m in g.rows for m in modalities)]
    return out


@dataclass
class Batch:
    inputs: dict[str, tuple[np.ndarray, np.ndarray]]  # modality -> (static, dynamic), each (B, 3, S, S)
    labels: np.ndarray  # (B, 1)
    keys: list[str]
    window_starts: list[int]
    frame_indices: list[int]
    augment: list[AugmentParams | None] = field(default_factory=list)

    def __len__(self):
        return len(self.keys)


class ClipStore:
    """Frame and dynamic-image cache over one dataset root."""

    def __init__(self, root, k: int = rankpool.DEFAULT_K, tol: float = 1e-9):
        if k < 1:
            raise LoaderError("k must be >= 1")
        self.root = root
        self.k = k
        self.tol = tol
        self._frames: dict[str, np.ndarray] = {}
        self._dyn: dict[tuple[str, int], np.ndarray] = {}

    def frames(self, path: str) -> np.ndarray:
        if path not in self._frames:
            self._frames[path] = load_frames(self.root, path)
        return self._frames[path]

    def dynamic(self, path: str, start: int) -> np.ndarray:
        key = (path, start)
        if key not in self._dyn:
            self._dyn[key] = rankpool.dynamic_image(self.frames(path), self.k, start, self.tol)
        return self._dyn[key]

    def precompute(self, paths: Sequence[str], stride: int | None = None, workers: int | None = None):
        """Fill the dynamic-image cache for every window of ``paths``."""
        jobs = []
        for p in paths:
            n = len(self.frames(p))
            jobs.extend((p, s) for s in rankpool.window_starts(n, self.k, stride) if (p, s) not in self._dyn)
        workers = worker_count() if workers is None else workers
        fn = lambda job: rankpool.dynamic_image(self._frames[job[0]], self.k, job[1], self.tol)  # noqa: E731
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(fn, jobs))
        else:
            results = [fn(j) for j in jobs]
        self._dyn.update(zip(jobs, results))


def to_chw(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2))


class BatchLoader:
    """Seed-deterministic batches of ``(static, dynamic)`` pairs per modality."""

    def __init__(
        self,
        root,
        manifest: Sequence[ManifestRow],
        modalities: Sequence[str],
        size: int,
        k: int = rankpool.DEFAULT_K,
        stride: int | None = None,
        augment: bool = True,
        pad: int = 4,
        seed: int = 0,
        store: ClipStore | None = None,
    ):
        if not manifest:
            raise LoaderError("manifest is empty")
        unknown = [m for m in modalities if m not in MODALITIES]
        if unknown:
            raise LoaderError(f"unknown modalities {unknown}")
        self.modalities = tuple(modalities)
        self.samples = group_samples(manifest, self.modalities)
        if not self.samples:
            raise LoaderError(f"no sample in the manifest has all of {list(self.modalities)}")
        self.size = size
        self.k = k
        self.stride = k if stride is None else stride
        self.augment = augment
        self.pad = pad
        self.seed = seed
        self.store = store if store is not None else ClipStore(root, k)
        if self.store.k != k:
            raise LoaderError("clip store was built for a different K")

    def __len__(self):
        return len(self.samples)

    def _prepare(self, img: np.ndarray, params: AugmentParams | None) -> np.ndarray:
        if params is None:
            return resize(img, self.size)
        return apply_params(img, params, self.size, self.pad)

    def sample(self, index: int, rng: np.random.Generator, start: int | None = None, frame: int | None = None):
        """One sample's ``{modality: (static, dynamic)}`` in HWC plus the draws used."""
        s = self.samples[index]
        first = self.store.frames(s.rows[self.modalities[0]].path)
        n = len(first)
        if start is None:
            start = int(rng.choice(rankpool.window_starts(n, self.k, self.stride)))
        if frame is None:
            frame = start + int(rng.integers(0, min(self.k, n - start)))
        params = sample_params(rng, self.pad) if self.augment else None
        out = {}
        for m in self.modalities:
            path = s.rows[m].path
            frames = self.store.frames(path)
            f = min(frame, len(frames) - 1)
            st = min(start, len(frames) - 1)
            static = self._prepare(frames[f] / 255.0, params)
            dynamic = self._prepare(self.store.dynamic(path, st), params)
            out[m] = (static, dynamic)
        return out, start, frame, params

    def batch(self, indices: Sequence[int], rng: np.random.Generator) -> Batch:
        per_mod: dict[str, tuple[list, list]] = {m: ([], []) for m in self.modalities}
        starts, frames, params = [], [], []
        for i in indices:
            imgs, st, fr, p = self.sample(int(i), rng)
            for m in self.modalities:
                per_mod[m][0].append(imgs[m][0])
                per_mod[m][1].append(imgs[m][1])
            starts.append(st)
            frames.append(fr)
            params.append(p)
        inputs = {m: (to_chw(a), to_chw(b)) for m, (a, b) in per_mod.items()}
        labels = np.array([[self.samples[int(i)].label] for i in indices], dtype=np.float64)
        keys = [self.samples[int(i)].key for i in indices]
        return Batch(inputs, labels, keys, starts, frames, params)

    def epoch(self, epoch: int, batch_size: int, drop_last: bool = False) -> Iterator[Batch]:
        """Shuffled batches for one epoch; the order depends only on ``(seed, epoch)``."""
        if batch_size < 1:
            raise LoaderError("batch size must be >= 1")
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.samples))
        for b, lo in enumerate(range(0, len(order), batch_size)):
            idx = order[lo : lo + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.batch(idx, np.random.default_rng([self.seed, epoch, b]))

    def random_batch(self, step: int, batch_size: int) -> Batch:
        """A batch of ``batch_size`` samples drawn with replacement, keyed by step."""
        rng = np.random.default_rng([self.seed, 1 << 20, step])
        idx = rng.integers(0, len(self.samples), size=batch_size)
        return self.batch(idx, rng)


def load_batch(
    root,
    manifest: Sequence[ManifestRow],
    batch_size: int,
    k: int = rankpool.DEFAULT_K,
    seed: int = 0,
    size: int = 32,
    modalities: Sequence[str] | None = None,
    augment: bool = False,
) -> Batch:
    """Draw one batch of ``batch_size`` samples without replacement (with it if the manifest is smaller)."""
    if modalities is None:
        modalities = [m for m in MODALITIES if any(r.modality == m for r in manifest)]
    loader = BatchLoader(root, manifest, modalities, size, k, augment=augment, seed=seed)
    rng = np.random.default_rng(seed)
    replace = batch_size > len(loader)
    idx = rng.choice(len(loader), size=batch_size, replace=replace)
    return loader.batch(idx, rng)
