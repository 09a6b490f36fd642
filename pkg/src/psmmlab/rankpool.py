"""Rank pooling: summarise a frame window as one image-shaped vector ``d``.

``d`` minimises the RankSVM objective

    f(d) = 1/2 |d|^2 + delta * sum_{i>j} max(0, 1 - d . (V_i - V_j)),
    delta = 2 / (K (K - 1)),

where ``V_i`` is the mean of the first ``i`` vectorised frames.  The
solver works on the dual box QP over the ``K(K-1)/2`` pair multipliers

    max_a  sum(a) - 1/2 a^T G a,   0 <= a <= delta,   G = A A^T,

by exact coordinate ascent, with ``d = A^T a``.  The primal-dual gap bounds
``f(d) - f*`` from above and is the stopping criterion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_K = 7


class RankPoolError(ValueError):
    pass


@dataclass
class DynamicImage:
    d: np.ndarray  # flat, length H*W*C
    shape: tuple[int, ...]
    objective_value: float
    solver_iterations: int
    converged: bool
    gap: float

    def image(self) -> np.ndarray:
        return self.d.reshape(self.shape)


def _as_frames(clip) -> np.ndarray:
    frames = getattr(clip, "frames", clip)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim < 2:
        frames = frames.reshape(len(frames), 1)
    return frames


def prefix_means(frames) -> np.ndarray:
    """Row ``i`` is the mean of vectorised frames ``0..i``."""
    frames = _as_frames(frames)
    if len(frames) == 0:
        raise RankPoolError("prefix_means: empty window")
    flat = frames.reshape(len(frames), -1)
    return np.cumsum(flat, axis=0) / np.arange(1, len(flat) + 1)[:, None]


def pair_delta(k: int) -> float:
    return 2.0 / (k * (k - 1))


def _pair_differences(V: np.ndarray) -> np.ndarray:
    k = len(V)
    i, j = np.tril_indices(k, -1)  # all i > j
    return V[i] - V[j]


def ranksvm_objective(d, V) -> float:
    """Primal objective with the optimal slacks ``max(0, 1 - d.(V_i - V_j))``."""
    V = np.asarray(V, dtype=np.float64)
    V = V.reshape(len(V), -1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.shape[0] != V.shape[1]:
        raise RankPoolError(f"dimension mismatch: d has {d.shape[0]}, V rows have {V.shape[1]}")
    k = len(V)
    if k < 2:
        return 0.5 * float(d @ d)
    A = _pair_differences(V)
    slack = np.maximum(0.0, 1.0 - A @ d)
    return 0.5 * float(d @ d) + pair_delta(k) * float(slack.sum())


def rank_pool_exact(V, tol: float = 1e-9, max_iter: int = 5000) -> DynamicImage:
    """Solve the RankSVM problem for prefix means ``V`` (shape ``(K, dim)``).

    ``max_iter`` caps full coordinate sweeps; hitting it leaves
    ``converged=False`` on the result.
    """
    V = np.asarray(V, dtype=np.float64)
    shape = V.shape[1:]
    V = V.reshape(len(V), -1)
    if not np.all(np.isfinite(V)):
        raise RankPoolError("rank_pool_exact: non-finite frame values")
    if tol <= 0:
        raise RankPoolError("rank_pool_exact: tol must be positive")
    k, dim = V.shape
    if k < 2:
        return DynamicImage(np.zeros(dim), shape, 0.0, 0, True, 0.0)

    A = _pair_differences(V)
    delta = pair_delta(k)
    G = A @ A.T
    diag = np.diag(G).copy()
    n = len(A)
    alpha = np.zeros(n)
    u = np.zeros(n)  # G @ alpha, i.e. the margins A @ d
    # degenerate pairs (V_i == V_j) cannot move d; their multiplier sits at the bound
    flat = diag <= 1e-300
    alpha[flat] = delta

    def gap_of():
        q = float(alpha @ u)
        hinge = float(np.maximum(0.0, 1.0 - u).sum())
        return q + delta * hinge - float(alpha.sum())

    sweeps, gap = 0, gap_of()
    while gap > tol and sweeps < max_iter:
        sweeps += 1
        for p in range(n):
            if flat[p]:
                continue
            new = min(max(alpha[p] + (1.0 - u[p]) / diag[p], 0.0), delta)
            step = new - alpha[p]
            if step != 0.0:
                alpha[p] = new
                u += step * G[:, p]
        u = G @ alpha  # resync against drift
        gap = gap_of()

    d = A.T @ alpha
    obj = ranksvm_objective(d, V)
    return DynamicImage(d, shape, obj, sweeps, gap <= tol, max(gap, 0.0))


def pool_window(frames, tol: float = 1e-9, max_iter: int = 5000) -> DynamicImage:
    frames = _as_frames(frames)
    dyn = rank_pool_exact(prefix_means(frames), tol, max_iter)
    dyn.shape = frames.shape[1:]
    return dyn


def window_frames(clip, k: int, start: int) -> np.ndarray:
    """Frames ``start .. start+k-1``, repeating the clip's last frame past its end."""
    frames = _as_frames(clip)
    n = len(frames)
    if n == 0:
        raise RankPoolError("empty clip")
    if not 0 <= start < n:
        raise RankPoolError(f"frame index {start} out of range for clip of {n} frames")
    idx = np.minimum(np.arange(start, start + k), n - 1)
    return frames[idx]


def window_slice(clip, k: int = DEFAULT_K, stride: int | None = None) -> list[np.ndarray]:
    stride = k if stride is None else stride
    if stride < 1:
        raise RankPoolError("stride must be >= 1")
    n = len(_as_frames(clip))
    return [window_frames(clip, k, s) for s in range(0, n, stride)]


def window_starts(n_frames: int, k: int = DEFAULT_K, stride: int | None = None) -> list[int]:
    stride = k if stride is None else stride
    if stride < 1:
        raise RankPoolError("stride must be >= 1")
    return list(range(0, n_frames, stride))


def normalize_channels(img: np.ndarray) -> np.ndarray:
    """Min-max scale each channel of an ``H x W x C`` array to [0, 1]; flat channels become 0.5."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    rng = hi - lo
    safe = np.where(rng > 0, rng, 1.0)
    return np.where(rng > 0, (img - lo) / safe, 0.5)


def dynamic_image(clip, k: int = DEFAULT_K, frame_index: int = 0, tol: float = 1e-9) -> np.ndarray:
    """Normalised ``H x W x C`` dynamic image of the window starting at ``frame_index``."""
    dyn = pool_window(window_frames(clip, k, frame_index), tol)
    return normalize_channels(dyn.image())


def dynamic_images(clip, k: int = DEFAULT_K, stride: int | None = None, tol: float = 1e-9) -> dict[int, np.ndarray]:
    n = len(_as_frames(clip))
    return {s: dynamic_image(clip, k, s, tol) for s in window_starts(n, k, stride)}

