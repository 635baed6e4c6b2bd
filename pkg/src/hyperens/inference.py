"""Sliding-window prediction, ensemble marginalization, thresholding, entropy."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .losses import TverskyParams
from .models import HyperResUNet, Model, ResUNet

DEFAULT_OVERLAP = 0.8
DEFAULT_HYPER_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
ENTROPY_EPS = 5e-5

Predictor = Callable[[np.ndarray], np.ndarray]


def window_starts(n: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def window_stride(patch: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    return max(1, int(round(patch * (1.0 - overlap))))


def coverage_counts(shape: tuple[int, int], patch: int, overlap: float = DEFAULT_OVERLAP) -> np.ndarray:
    stride = window_stride(patch, overlap)
    counts = np.zeros(shape, dtype=np.int64)
    for y in window_starts(shape[0], patch, stride):
        for x in window_starts(shape[1], patch, stride):
            counts[y : y + patch, x : x + patch] += 1
    return counts


def sliding_window_predict(
    image: np.ndarray, predict: Predictor, patch_size: int, overlap: float = DEFAULT_OVERLAP, batch_size: int = 16
) -> np.ndarray:
    """Mean of all covering patch predictions for a [H,W] (or [C,H,W]) image.

    ``predict`` maps a [B,C,p,p] batch to [B,1,p,p] probabilities. The last
    window on each axis is clamped to the image edge, so every pixel is
    covered at least once.
    """
    img = image[None] if image.ndim == 2 else image
    h, w = img.shape[1:]
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch {patch_size} larger than image {h}x{w}")
    stride = window_stride(patch_size, overlap)
    coords = [(y, x) for y in window_starts(h, patch_size, stride) for x in window_starts(w, patch_size, stride)]
    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    for start in range(0, len(coords), batch_size):
        chunk = coords[start : start + batch_size]
        batch = np.stack([img[:, y : y + patch_size, x : x + patch_size] for y, x in chunk])
        out = predict(batch)
        for (y, x), p in zip(chunk, out):
            acc[y : y + patch_size, x : x + patch_size] += p[0]
            cnt[y : y + patch_size, x : x + patch_size] += 1.0
    return acc / cnt


def predictor(model: Model, h: TverskyParams | None = None) -> Predictor:
    """Eval-mode batch predictor; hyper models are frozen at ``h`` first."""
    if isinstance(model, HyperResUNet):
        if h is None:
            raise ValueError("hyper models need a TverskyParams to predict")
        model = model.export_plain(h)
    if not isinstance(model, ResUNet):
        raise TypeError(f"cannot predict with {type(model).__name__}")
    return model.predict


def average_probability_maps(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Uniform-weight mean with a fixed left-to-right summation order."""
    if len(maps) == 0:
        raise ValueError("need at least one probability map")
    shape = np.shape(maps[0])
    acc = np.zeros(shape)
    for m in maps:
        if np.shape(m) != shape:
            raise ValueError(f"map shape {np.shape(m)} differs from {shape}")
        acc += m
    return acc / len(maps)


def ensemble_predict(image: np.ndarray, models: Sequence[Model], patch_size: int, overlap: float = DEFAULT_OVERLAP) -> np.ndarray:
    return average_probability_maps(
        [sliding_window_predict(image, predictor(m), patch_size, overlap) for m in models]
    )


def hyper_ensemble_predict(
    image: np.ndarray,
    model: HyperResUNet,
    alphas: Sequence[float] = DEFAULT_HYPER_GRID,
    patch_size: int = 64,
    overlap: float = DEFAULT_OVERLAP,
) -> np.ndarray:
    """Average over one sliding-window pass per hyperparameter in ``alphas``.

    The mean is taken in ascending-alpha order so any permutation of the
    grid produces the same bits.
    """
    if len(alphas) == 0:
        raise ValueError("alpha grid is empty")
    maps = [
        sliding_window_predict(image, predictor(model, TverskyParams(a)), patch_size, overlap)
        for a in sorted(alphas)
    ]
    return average_probability_maps(maps)


def threshold_map(p: np.ndarray, tau: float) -> np.ndarray:
    """Binary label map, foreground where ``p >= tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {tau}")
    return (np.asarray(p) >= tau).astype(np.uint8)


def entropy_map(p: np.ndarray, eps: float = ENTROPY_EPS) -> np.ndarray:
    """Binary label entropy ``-sum_i (p_i + eps) ln(p_i + eps)`` over the two labels."""
    p = np.asarray(p, dtype=np.float64)
    fg, bg = p + eps, (1.0 - p) + eps
    return -(fg * np.log(fg) + bg * np.log(bg))


# ------------------------------------------------------------------ export


def write_map(path, values: np.ndarray) -> Path:
    """Raw little-endian float64 ``<path>.f64`` with a ``<path>.header`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(values, dtype="<f8")
    path.with_suffix(".f64").write_bytes(arr.tobytes())
    header = {"shape": list(arr.shape), "dtype": "<f8"}
    path.with_suffix(".header").write_text(json.dumps(header, sort_keys=True) + "\n")
    return path.with_suffix(".f64")


def read_map(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.with_suffix(".header").read_text())
    return np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype=header["dtype"]).reshape(header["shape"]).astype(np.float64)


def write_label_map(path, labels: np.ndarray) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    path.with_suffix(".u8").write_bytes(arr.tobytes())
    path.with_suffix(".header").write_text(json.dumps({"shape": list(arr.shape), "dtype": "u1"}, sort_keys=True) + "\n")
    return path.with_suffix(".u8")


def read_label_map(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.with_suffix(".header").read_text())
    return np.frombuffer(path.with_suffix(".u8").read_bytes(), dtype=np.uint8).reshape(header["shape"]).copy()


def write_pgm(path, values: np.ndarray) -> Path:
    """8-bit binary PGM (P5), linear map of [0, 1] onto [0, 255]."""
    path = Path(path)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("PGM export needs a 2-d map")
    pix = np.round(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w).copy()
