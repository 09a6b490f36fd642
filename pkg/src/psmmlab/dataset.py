"""On-disk clip layout, the synthetic generator and the catalog scanner.

Layout::

    root/<ethnicity>_<subject>/<pai>_<k>/<modality>/frame_%04d.png

``ethnicity`` is one of A (African), C (Central Asian), E (East Asian);
``subject`` is zero-padded to four digits.  Every modality is stored as an
8-bit RGB PNG; depth and IR are grey replicated over three channels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

ETHNICITIES = ("A", "C", "E")
MODALITIES = ("color", "depth", "ir")
PAIS_2D = ("real", "print", "replay")
PAIS_3D = ("mask3d", "silica")
PAIS = PAIS_2D + PAIS_3D

# per-subject samples of the 2D subset: one real, print indoor/outdoor, one replay
SAMPLES_2D = (("real", 1, "indoor"), ("print", 1, "indoor"), ("print", 2, "outdoor"), ("replay", 1, "indoor"))
MASK_LIGHTING = ("outdoor-sun", "outdoor-shade", "indoor-side", "indoor-front", "indoor-back", "indoor-regular")
MASK_STYLES = ("mask-only", "wig-glasses", "wig-no-glasses")
SILICA_LIGHTING = ("indoor-side", "indoor-front", "indoor-back", "indoor-normal")
SILICA_STYLES = ("wig-glasses", "wig-no-glasses")
FIRST_3D_SUBJECT = 501

FRAME_RE = re.compile(r"^frame_(\d{4})\.png$")
SUBJECT_RE = re.compile(r"^([ACE])_(\d{4})$")
SAMPLE_RE = re.compile(r"^(real|print|replay|mask3d|silica)_(\d+)$")


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class ClipRecord:
    subject_id: int
    ethnicity: str
    modality: str
    pai: str
    sample: int
    lighting: str
    path: str  # relative to the dataset root, '/'-separated
    frame_count: int

    @property
    def label(self) -> int:
        """1 = bona fide, 0 = attack."""
        return int(self.pai == "real")

    @property
    def sample_key(self) -> str:
        return self.path.rsplit("/", 1)[0]


def clip_path(ethnicity: str, subject: int, pai: str, k: int, modality: str) -> str:
    return f"{ethnicity}_{subject:04d}/{pai}_{k}/{modality}"


def lighting_for(pai: str, k: int) -> str:
    if pai == "mask3d":
        return f"{MASK_STYLES[(k - 1) // 6 % 3]}/{MASK_LIGHTING[(k - 1) % 6]}"
    if pai == "silica":
        return f"{SILICA_STYLES[(k - 1) // 4 % 2]}/{SILICA_LIGHTING[(k - 1) % 4]}"
    return dict(((p, kk), light) for p, kk, light in SAMPLES_2D).get((pai, k), "indoor")


def synthetic_layout(
    subjects_per_ethnicity: int, mask_subjects: int = 0, silica_subjects: int = 0, subject_ids=None
):
    """Yield ``(ethnicity, subject, pai, k, modality)`` for every clip the generator writes.

    ``subject_ids`` replaces the default ids ``1..subjects_per_ethnicity``.
    """
    ids = range(1, subjects_per_ethnicity + 1) if subject_ids is None else sorted(set(subject_ids))
    if any(not 1 <= i < FIRST_3D_SUBJECT for i in ids):
        raise ValueError(f"2D subject ids must lie in 1..{FIRST_3D_SUBJECT - 1}")
    for eth in ETHNICITIES:
        for subject in ids:
            for pai, k, _ in SAMPLES_2D:
                for mod in MODALITIES:
                    yield eth, subject, pai, k, mod
    sid = FIRST_3D_SUBJECT
    for pai, n_subjects, n_samples in (("mask3d", mask_subjects, 18), ("silica", silica_subjects, 8)):
        for i in range(n_subjects):
            eth = ETHNICITIES[i % 3]
            for k in range(1, n_samples + 1):
                for mod in MODALITIES:
                    yield eth, sid, pai, k, mod
            sid += 1


# --------------------------------------------------------------------------
# procedural textures
# --------------------------------------------------------------------------


def _grid(side):
    yy, xx = np.mgrid[0:side, 0:side] / side
    return yy, xx


def _face_bump(side, cy, cx, r):
    yy, xx = _grid(side)
    return np.clip(1.0 - ((yy - cy) ** 2 + (xx - cx) ** 2) / r**2, 0.0, 1.0)


def render_clip(pai: str, modality: str, frames: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """``(frames, side, side, 3)`` uint8 frames whose statistics depend on the PAI.

    bona fide: low-frequency gradient drifting over time (plus a depth bump);
    print: a fixed high-frequency texture; replay: moving content under a
    per-frame brightness flicker and screen stripes; 3D masks: a static
    relief with little motion.
    """
    yy, xx = _grid(side)
    colour = rng.uniform(0.5, 1.0, size=3)
    phase = rng.uniform(0, 2 * np.pi)
    fy, fx = rng.uniform(0.6, 1.4, size=2)
    speed = rng.uniform(0.35, 0.6)
    cy, cx = rng.uniform(0.4, 0.6, size=2)
    bump = _face_bump(side, cy, cx, rng.uniform(0.3, 0.4))
    texture = rng.random((side, side))
    out = np.empty((frames, side, side, 3))
    for f in range(frames):
        noise = rng.normal(0.0, 0.01, size=(side, side))
        drift = 0.5 + 0.35 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase + speed * f)
        if pai == "real":
            base = {"color": drift, "depth": 0.2 + 0.7 * bump * (0.95 + 0.05 * np.sin(speed * f)), "ir": 0.3 + 0.5 * bump * drift}[modality]
        elif pai == "print":
            flat = 0.3 + 0.4 * texture
            base = {"color": flat, "depth": 0.2 + 0.05 * xx, "ir": 0.2 + 0.3 * texture}[modality]
        elif pai == "replay":
            flicker = 0.25 if f % 2 else -0.25
            stripes = 0.15 * np.sin(2 * np.pi * side / 3 * yy)
            base = {"color": drift + flicker + stripes, "depth": 0.2 + 0.05 * yy, "ir": 0.08 + 0.1 * (f % 2)}[modality]
            base = np.broadcast_to(base, (side, side))
        else:
            relief = 0.2 + 0.6 * bump
            scale = 0.8 if pai == "mask3d" else 0.6
            base = {"color": scale * relief + 0.1 * texture, "depth": relief, "ir": 0.5 * relief}[modality]
        img = np.clip(base + noise, 0.0, 1.0)
        if modality == "color":
            out[f] = img[..., None] * colour
        else:
            out[f] = img[..., None]
    return np.round(out * 255).astype(np.uint8)


def _clip_rng(seed, eth, subject, pai, k, mod):
    return np.random.default_rng([seed, ETHNICITIES.index(eth), subject, PAIS.index(pai), k, MODALITIES.index(mod)])


def generate_synthetic(
    root,
    subjects_per_ethnicity: int = 2,
    frames_per_clip: int = 14,
    side: int = 32,
    seed: int = 0,
    mask_subjects: int = 0,
    silica_subjects: int = 0,
    subject_ids=None,
) -> Path:
    """Write a structure-faithful synthetic dataset under ``root``; deterministic per seed."""
    if side < 8:
        raise ValueError("side must be >= 8")
    if frames_per_clip < 2:
        raise ValueError("frames_per_clip must be >= 2")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CatalogError(f"cannot create dataset root {root}: {exc}") from exc
    for eth, subject, pai, k, mod in synthetic_layout(
        subjects_per_ethnicity, mask_subjects, silica_subjects, subject_ids
    ):
        clip_dir = root / clip_path(eth, subject, pai, k, mod)
        clip_dir.mkdir(parents=True, exist_ok=True)
        frames = render_clip(pai, mod, frames_per_clip, side, _clip_rng(seed, eth, subject, pai, k, mod))
        for i, frame in enumerate(frames):
            Image.fromarray(frame, "RGB").save(clip_dir / f"frame_{i:04d}.png", optimize=False)
    return root


# --------------------------------------------------------------------------
# catalog
# --------------------------------------------------------------------------


def frame_files(clip_dir: Path) -> list[Path]:
    return sorted(p for p in clip_dir.iterdir() if p.is_file() and FRAME_RE.match(p.name))


def scan_catalog(root, min_frames: int = 2) -> list[ClipRecord]:
    """One :class:`ClipRecord` per clip directory, sorted by path."""
    root = Path(root)
    if not root.is_dir():
        raise CatalogError(f"dataset root {root} does not exist")
    records = []
    for subj_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        m = SUBJECT_RE.match(subj_dir.name)
        if not m:
            raise CatalogError(f"malformed subject directory name: {subj_dir}")
        eth, subject = m.group(1), int(m.group(2))
        for sample_dir in sorted(p for p in subj_dir.iterdir() if p.is_dir()):
            s = SAMPLE_RE.match(sample_dir.name)
            if not s:
                raise CatalogError(f"malformed sample directory name: {sample_dir}")
            pai, k = s.group(1), int(s.group(2))
            for mod_dir in sorted(p for p in sample_dir.iterdir() if p.is_dir()):
                if mod_dir.name not in MODALITIES:
                    raise CatalogError(f"unknown modality directory: {mod_dir}")
                n = len(frame_files(mod_dir))
                if n < min_frames:
                    raise CatalogError(f"clip directory {mod_dir} has {n} frames (need >= {min_frames})")
                rel = mod_dir.relative_to(root).as_posix()
                records.append(ClipRecord(subject, eth, mod_dir.name, pai, k, lighting_for(pai, k), rel, n))
    return records


def load_frames(root, rel_path: str) -> np.ndarray:
    """``(n, H, W, 3)`` float64 frames in raw intensity units (0-255)."""
    clip_dir = Path(root) / rel_path
    files = frame_files(clip_dir)
    if not files:
        raise CatalogError(f"no frames in {clip_dir}")
    return np.stack([np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) for f in files])


@dataclass
class Clip:
    frames: np.ndarray
    record: ClipRecord | None = None

    def __len__(self):
        return len(self.frames)
