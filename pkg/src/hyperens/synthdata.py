"""Synthetic ambiguous-lesion images with a known foreground probability map.

Each sample is built from a hidden map ``p_true`` made of smooth elliptical
bumps. The image shows ``p_true`` through a monotone intensity plus texture,
noise and bright "confusers" that have zero lesion probability. The single
annotation is the superlevel set ``p_true >= tau_a`` for a per-sample
annotator threshold ``tau_a``, so different samples draw the ambiguous rim
differently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

GAMMA_RANGE = (0.5, 4.5)
FLIP_PROB = 0.1
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 200
    grid_size: int = 128
    blob_count: tuple[int, int] = (1, 3)
    blob_scale: tuple[float, float] = (0.05, 0.12)  # sigma as a fraction of grid_size
    blob_peak: tuple[float, float] = (1.2, 2.0)
    confuser_count: tuple[int, int] = (0, 2)
    confuser_scale: tuple[float, float] = (0.02, 0.05)
    confuser_contrast: tuple[float, float] = (0.2, 0.45)
    lesion_contrast: float = 0.5
    texture_std: float = 0.04
    noise_std: float = 0.04
    tau_range: tuple[float, float] = (0.3, 0.7)
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        for name in ("blob_count", "blob_scale", "blob_peak", "confuser_count", "confuser_scale",
                     "confuser_contrast", "tau_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (type(lo)(lo), type(hi)(hi)))
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.n_samples < 0:
            raise ValueError(f"n_samples must be >= 0, got {self.n_samples}")
        if self.grid_size < 4:
            raise ValueError("grid_size must be at least 4")
        if min(self.blob_count) < 0 or min(self.confuser_count) < 0:
            raise ValueError("blob and confuser counts must be non-negative")
        lo, hi = self.tau_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"tau_range must lie inside (0, 1), got {self.tau_range}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SyntheticSample:
    image: np.ndarray
    annotation: np.ndarray
    p_true: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream; parallel and serial generation agree."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _bump(yy, xx, cy, cx, sy, sx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def _rescale01(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def generate_sample(rng: np.random.Generator, config: DatasetConfig, tau: float | None = None) -> SyntheticSample:
    n = config.grid_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    n_blobs = int(rng.integers(config.blob_count[0], config.blob_count[1] + 1))
    field_ = np.zeros((n, n))
    for _ in range(n_blobs):
        sy, sx = rng.uniform(*config.blob_scale, size=2) * n
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        field_ += rng.uniform(*config.blob_peak) * _bump(yy, xx, cy, cx, sy, sx, rng.uniform(0, np.pi))
    p_true = np.clip(field_, 0.0, 1.0)

    n_conf = int(rng.integers(config.confuser_count[0], config.confuser_count[1] + 1))
    confusers = np.zeros((n, n))
    for _ in range(n_conf):
        sy, sx = rng.uniform(*config.confuser_scale, size=2) * n
        cy, cx = rng.uniform(0.1 * n, 0.9 * n, size=2)
        confusers += rng.uniform(*config.confuser_contrast) * _bump(yy, xx, cy, cx, sy, sx, rng.uniform(0, np.pi))

    texture = gaussian_filter(rng.normal(size=(n, n)), sigma=max(1.0, n / 16))
    texture *= config.texture_std / max(texture.std(), 1e-12)
    noise = rng.normal(0.0, config.noise_std, size=(n, n))
    image = _rescale01(0.2 + config.lesion_contrast * p_true + confusers + texture + noise)

    u = rng.uniform()
    if tau is None:
        lo, hi = config.tau_range
        tau = lo + u * (hi - lo)
    annotation = (p_true >= tau).astype(np.uint8)
    meta = {"n_blobs": n_blobs, "n_confusers": n_conf, "tau": float(tau)}
    return SyntheticSample(image=image, annotation=annotation, p_true=p_true, meta=meta)


def generate_dataset(config: DatasetConfig) -> list[SyntheticSample]:
    samples = []
    for i in range(config.n_samples):
        s = generate_sample(sample_rng(config.seed, i), config)
        s.meta.update(seed=config.seed, index=i, id=f"sample_{i:04d}")
        samples.append(s)
    return samples


# ------------------------------------------------------------------ augmentation


def random_gamma(image: np.ndarray, rng: np.random.Generator | None = None, gamma: float | None = None) -> np.ndarray:
    """Contrast jitter ``((I - min) / (max - min))**g * (max - min) + min``."""
    if gamma is None:
        gamma = rng.uniform(*GAMMA_RANGE)
    lo, hi = image.min(), image.max()
    if hi - lo <= 0:
        return image.copy()
    return ((image - lo) / (hi - lo)) ** gamma * (hi - lo) + lo


def random_flip(image, annotation, p_true, rng: np.random.Generator, p: float = FLIP_PROB, axis: int = -1):
    """Flip all three grids along the x axis together with probability ``p``."""
    if rng.uniform() < p:
        return (np.flip(image, axis).copy(), np.flip(annotation, axis).copy(), np.flip(p_true, axis).copy())
    return image, annotation, p_true


def random_crop(sample: SyntheticSample, patch_size: int, rng: np.random.Generator, fg_retries: int = 0):
    """Aligned crop of (image, annotation, p_true).

    With ``fg_retries > 0`` the position is redrawn up to that many times
    while the annotation patch is empty.
    """
    h, w = sample.shape
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch {patch_size} does not fit in a {h}x{w} grid")
    for attempt in range(fg_retries + 1):
        y = int(rng.integers(0, h - patch_size + 1))
        x = int(rng.integers(0, w - patch_size + 1))
        sl = (slice(y, y + patch_size), slice(x, x + patch_size))
        if attempt == fg_retries or sample.annotation[sl].any():
            break
    return sample.image[sl], sample.annotation[sl], sample.p_true[sl]


# ------------------------------------------------------------------ splits


def split_dataset(samples: list, train_fraction: float, seed: int) -> tuple[list, list]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_fraction * len(samples)))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def kfold_split(samples: list, k: int, seed: int) -> list[list]:
    if k < 1 or k > len(samples):
        raise ValueError(f"cannot make {k} folds from {len(samples)} samples")
    order = np.random.default_rng(seed).permutation(len(samples))
    return [[samples[i] for i in part] for part in np.array_split(order, k)]


# ------------------------------------------------------------------ storage


def save_dataset(samples: list[SyntheticSample], config: DatasetConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        sid = s.meta.get("id", f"sample_{len(ids):04d}")
        d = out / sid
        d.mkdir(exist_ok=True)
        (d / "image.f64").write_bytes(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        (d / "annotation.u8").write_bytes(np.ascontiguousarray(s.annotation, dtype=np.uint8).tobytes())
        (d / "ptrue.f64").write_bytes(np.ascontiguousarray(s.p_true, dtype="<f8").tobytes())
        header = {"shape": list(s.shape), "dtypes": {"image": "<f8", "annotation": "u1", "ptrue": "<f8"}, "meta": s.meta}
        (d / "header").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
        ids.append(sid)
    manifest = {"format_version": DATASET_FORMAT_VERSION, "config": config.to_dict(), "samples": ids}
    (out / "dataset.manifest").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> tuple[list[SyntheticSample], DatasetConfig]:
    path = Path(path)
    mf = path / "dataset.manifest"
    if not mf.is_file():
        raise FileNotFoundError(f"no dataset.manifest in {path}")
    manifest = json.loads(mf.read_text())
    config = DatasetConfig.from_dict(manifest["config"])
    samples = []
    for sid in manifest["samples"]:
        d = path / sid
        header = json.loads((d / "header").read_text())
        shape = tuple(header["shape"])
        image = np.frombuffer((d / "image.f64").read_bytes(), dtype="<f8").reshape(shape).astype(np.float64)
        ann = np.frombuffer((d / "annotation.u8").read_bytes(), dtype=np.uint8).reshape(shape).copy()
        pt_file = d / "ptrue.f64"
        pt = np.frombuffer(pt_file.read_bytes(), dtype="<f8").reshape(shape).astype(np.float64) if pt_file.exists() else None
        samples.append(SyntheticSample(image=image, annotation=ann, p_true=pt, meta=header["meta"]))
    return samples, config
