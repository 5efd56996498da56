"""Synthetic multi-scanner slides with pixel-exact correspondences.

A ``VirtualSlide`` is drawn once; every scanner domain is a deterministic
rendering of the same base image, so the ground-truth mask is shared
verbatim across domains.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, NumericError

BACKGROUND, TUMOR, NON_TUMOR = 0, 1, 2
CLASS_NAMES = ("background", "tumor", "non_tumor")
BACKGROUND_THRESHOLD = 235 / 255
MANIFEST_FORMAT = "barlowtuple-manifest"
MANIFEST_VERSION = 1


@dataclass
class VirtualSlide:
    base_image: np.ndarray  # [3, H, W] in [0, 1]
    mask: np.ndarray  # [H, W] uint8 class ids
    slide_id: int
    seed: int = 0

    @property
    def size(self) -> int:
        return self.mask.shape[0]


@dataclass
class ScannerProfile:
    name: str
    color_matrix: tuple[tuple[float, ...], ...] = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
    gamma: float = 1.0
    brightness: float = 0.0
    blur_sigma: float = 0.0
    scale: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.color_matrix = tuple(tuple(float(v) for v in row) for row in self.color_matrix)
        if np.asarray(self.color_matrix).shape != (3, 3):
            raise ValueError("color_matrix must be 3x3")
        if self.blur_sigma < 0 or self.noise_sigma < 0 or self.scale <= 0 or self.gamma <= 0:
            raise ValueError(f"invalid scanner profile {self.name}")

    @classmethod
    def identity(cls, name: str = "identity") -> ScannerProfile:
        return cls(name)


@dataclass
class PatchSample:
    image: np.ndarray  # [3, P, P]
    mask: np.ndarray  # [P, P]
    slide_id: int
    domain_id: int
    origin: tuple[int, int]  # (y, x)


@dataclass(frozen=True)
class PatchOrigin:
    slide_id: int
    y: int
    x: int
    patch_class: int


@dataclass
class SplitSpec:
    train: list[int]
    val: list[int]
    test: list[int]
    train_domains: list[int]
    heldout_domains: list[int]
    reference_domain: int = 0

    def __post_init__(self):
        ids = [*self.train, *self.val, *self.test]
        if len(ids) != len(set(ids)):
            raise DataError("train/val/test slide lists overlap")
        if set(self.train_domains) & set(self.heldout_domains):
            raise DataError("a domain cannot be both seen and held out")
        if self.reference_domain not in self.train_domains:
            raise DataError("reference domain must be a training domain")

    @property
    def all_domains(self) -> list[int]:
        return sorted({*self.train_domains, *self.heldout_domains})


# Five scanners: the reference, two seen during training, two held out. Scale
# factors follow the ratio of each scanner's resolution to 0.25 um/px. The
# held-out profiles apply three quarters of one seen scanner's color shift with
# their own blur and scale, so their shift is of a kind the seen scanners
# cover but never observed itself.
DEFAULT_PROFILES = (
    ScannerProfile("CS2", ((1.00, 0.00, 0.00), (0.00, 1.00, 0.00), (0.00, 0.00, 1.00)),
                   gamma=1.00, brightness=0.00, blur_sigma=0.8, scale=1.00, noise_sigma=0.010, seed=11),
    ScannerProfile("NZ210", ((0.86, 0.10, 0.04), (0.04, 0.86, 0.07), (0.04, 0.07, 0.96)),
                   gamma=0.86, brightness=0.03, blur_sigma=0.3, scale=0.88, noise_sigma=0.015, seed=12),
    ScannerProfile("NZ2.0", ((1.04, -0.04, 0.04), (0.04, 1.07, -0.04), (0.07, 0.04, 0.86)),
                   gamma=1.18, brightness=-0.02, blur_sigma=0.5, scale=0.92, noise_sigma=0.012, seed=13),
    ScannerProfile("P1000", ((0.895, 0.075, 0.03), (0.03, 0.895, 0.0525), (0.03, 0.0525, 0.97)),
                   gamma=0.895, brightness=0.0225, blur_sigma=0.55, scale=1.00, noise_sigma=0.012, seed=14),
    ScannerProfile("GT450", ((1.03, -0.03, 0.03), (0.03, 1.0525, -0.03), (0.0525, 0.03, 0.895)),
                   gamma=1.135, brightness=-0.015, blur_sigma=0.65, scale=1.04, noise_sigma=0.010, seed=15),
)


# --------------------------------------------------------------------------
# slide generation
# --------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def generate_slide(seed: int, size: int = 256, slide_id: int | None = None,
                   background_frac: float = 0.3, tumor_frac: float = 0.5) -> VirtualSlide:
    """Draw a slide: light background, tumor and non-tumor tissue textures.

    Class areas are set by quantiles of smooth random fields, so every class
    covers a predictable share of the slide (background ~30%, the tissue
    split evenly by default).
    """
    rng = np.random.default_rng(seed)
    shape = (size, size)
    tissue_field = _smooth_field(rng, shape, size / 10)
    tumor_field = _smooth_field(rng, shape, size / 14)

    tissue = tissue_field > np.quantile(tissue_field, background_frac)
    tumor = tissue & (tumor_field > np.quantile(tumor_field[tissue], 1.0 - tumor_frac))
    mask = np.full(shape, NON_TUMOR, dtype=np.uint8)
    mask[~tissue] = BACKGROUND
    mask[tumor] = TUMOR

    # non-tumor: pink stroma with elongated fibres
    fibres = _smooth_field(rng, shape, (0.8, 4.0))
    stroma = np.array([0.90, 0.64, 0.76])[:, None, None] + 0.07 * fibres[None] * np.array([1.0, 1.2, 0.8])[:, None, None]
    # tumor: violet cytoplasm densely packed with dark round nuclei
    nuclei = ndimage.gaussian_filter(rng.normal(size=shape), 1.2, mode="wrap")
    nuclei = np.clip((nuclei - 0.10) / 0.08, 0.0, 1.0)
    cyto = np.array([0.62, 0.38, 0.70])[:, None, None]
    dark = np.array([0.28, 0.14, 0.42])[:, None, None]
    tumor_tex = cyto * (1 - nuclei[None]) + dark * nuclei[None]
    # sparse nuclei in stroma as well, so color alone is not enough
    sparse = ndimage.gaussian_filter(rng.normal(size=shape), 1.2, mode="wrap")
    sparse = np.clip((sparse - 0.30) / 0.06, 0.0, 1.0)
    stroma = stroma * (1 - sparse[None]) + dark * sparse[None]
    paper = 0.965 + 0.01 * rng.normal(size=(3, *shape))

    image = np.where(mask[None] == TUMOR, tumor_tex, stroma)
    image = np.where(mask[None] == BACKGROUND, np.clip(paper, 0.935, 1.0), image)
    image = np.clip(image, 0.0, 1.0)
    return VirtualSlide(image, mask, seed if slide_id is None else slide_id, seed)


def label_background(image: np.ndarray, weights: Sequence[float] | None = None) -> np.ndarray:
    """True where grayscale is strictly above 235/255. Grayscale is the plain
    channel mean unless ``weights`` (e.g. Rec. 601 luma) are given."""
    image = np.asarray(image, dtype=np.float64)
    w = np.full(3, 1 / 3) if weights is None else np.asarray(weights, dtype=np.float64)
    gray = np.tensordot(w, image, axes=(0, 0))
    return gray > BACKGROUND_THRESHOLD


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _resample(img: np.ndarray, scale: float) -> np.ndarray:
    _, H, W = img.shape
    small = ndimage.zoom(img, (1, scale, scale), order=1, mode="nearest", grid_mode=True)
    back = ndimage.zoom(small, (1, H / small.shape[1], W / small.shape[2]), order=1,
                        mode="nearest", grid_mode=True)
    return back[:, :H, :W]


def render_domain(slide: VirtualSlide, profile: ScannerProfile) -> np.ndarray:
    """Render ``slide`` through ``profile``.

    Fixed order: scale-resample, blur, color matrix, gamma, brightness,
    noise, then clip to [0, 1]. Output size always equals the slide size.
    """
    img = np.array(slide.base_image, dtype=np.float64)
    if profile.scale != 1.0:
        img = _resample(img, profile.scale)
    if profile.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, (0, profile.blur_sigma, profile.blur_sigma), mode="nearest")
    m = np.asarray(profile.color_matrix)
    if not np.array_equal(m, np.eye(3)):
        img = np.tensordot(m, img, axes=(1, 0))
    if profile.gamma != 1.0:
        img = np.clip(img, 0.0, None) ** profile.gamma
    if profile.brightness:
        img = img + profile.brightness
    if profile.noise_sigma > 0:
        rng = np.random.default_rng([profile.seed, slide.seed])
        img = img + rng.normal(0.0, profile.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels, as stored on disk."""
    return np.round(np.clip(image, 0, 1) * 255.0) / 255.0


# --------------------------------------------------------------------------
# patch sampling
# --------------------------------------------------------------------------

def _window_class_counts(mask: np.ndarray, patch: int) -> np.ndarray:
    """[classes, H-P+1, W-P+1] pixel counts for every patch origin."""
    counts = []
    for c in range(len(CLASS_NAMES)):
        s = np.pad((mask == c).astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
        counts.append(s[patch:, patch:] - s[:-patch, patch:] - s[patch:, :-patch] + s[:-patch, :-patch])
    return np.stack(counts)


def patch_quota(per_slide: int, bg_frac: float, available: Iterable[int] = (0, 1, 2)) -> dict[int, int]:
    """Background gets ``round(bg_frac * n)``; tumor and non-tumor split the
    rest, tumor taking the odd one. The quota of an absent class goes to the
    remaining tissue classes, keeping them balanced, or to background when no
    tissue class is left."""
    available = set(available)
    n_bg = int(math.floor(bg_frac * per_slide + 0.5))
    rest = per_slide - n_bg
    quota = {BACKGROUND: n_bg, TUMOR: rest - rest // 2, NON_TUMOR: rest // 2}
    missing = [c for c in quota if c not in available]
    if not available:
        raise DataError("slide has no sampleable class")
    spill = sum(quota.pop(c) for c in missing)
    order = [c for c in (TUMOR, NON_TUMOR) if c in quota] or [BACKGROUND]
    for _ in range(spill):
        quota[min(order, key=lambda c: quota[c])] += 1  # smallest first, tumor wins ties
    return quota


def plan_patches(masks: dict[int, np.ndarray], epoch_seed: int, patch: int = 256, per_slide: int = 50,
                 bg_frac: float = 0.10, split_seed: int = 0) -> list[PatchOrigin]:
    """Choose class-guided patch origins for every slide, then shuffle.

    A patch's class is the majority pixel class inside it. ``(split_seed,
    epoch_seed)`` fully determine the result.
    """
    plan: list[PatchOrigin] = []
    for slide_id in sorted(masks):
        mask = masks[slide_id]
        if patch > min(mask.shape):
            raise DataError(f"patch {patch} larger than slide {mask.shape}")
        majority = _window_class_counts(mask, patch).argmax(axis=0)
        rng = np.random.default_rng([split_seed, epoch_seed, slide_id])
        present = [c for c in range(len(CLASS_NAMES)) if np.any(majority == c)]
        for cls, n in sorted(patch_quota(per_slide, bg_frac, present).items()):
            ys, xs = np.nonzero(majority == cls)
            pick = rng.integers(0, ys.size, size=n)
            plan.extend(PatchOrigin(slide_id, int(ys[i]), int(xs[i]), cls) for i in pick)
    order = np.random.default_rng([split_seed, epoch_seed, 2**31 - 1]).permutation(len(plan))
    return [plan[i] for i in order]


def crop(image: np.ndarray, origin: PatchOrigin, patch: int) -> np.ndarray:
    return image[..., origin.y:origin.y + patch, origin.x:origin.x + patch]


def sample_patches(dataset: SlideSet, slide_ids: Sequence[int], domain: int, epoch_seed: int,
                   patch: int = 256, per_slide: int = 50, bg_frac: float = 0.10,
                   split_seed: int = 0) -> list[PatchSample]:
    masks = {i: dataset.masks[i] for i in slide_ids}
    return [PatchSample(crop(dataset.image(o.slide_id, domain), o, patch), crop(masks[o.slide_id], o, patch),
                        o.slide_id, domain, (o.y, o.x))
            for o in plan_patches(masks, epoch_seed, patch, per_slide, bg_frac, split_seed)]


def plan_hash(plan: Iterable[PatchOrigin]) -> str:
    h = hashlib.sha256()
    for o in plan:
        h.update(f"{o.slide_id},{o.y},{o.x};".encode())
    return h.hexdigest()


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

@dataclass
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray


def zscore_stats(images: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> ZScoreStats:
    """Per-channel mean/std over tissue (non-background) pixels only."""
    pix = np.concatenate([img[:, m != BACKGROUND] for img, m in zip(images, masks)], axis=1)
    if pix.shape[1] == 0:
        raise NumericError("no tissue pixels for normalization statistics")
    mean, std = pix.mean(axis=1), pix.std(axis=1)
    if np.any(std == 0):
        raise NumericError("zero standard deviation in tissue pixels")
    return ZScoreStats(mean, std)


def normalize(patch: np.ndarray, stats: ZScoreStats) -> np.ndarray:
    shape = (-1,) + (1,) * (patch.ndim - 1) if patch.ndim == 3 else (1, -1, 1, 1)
    return (patch - stats.mean.reshape(shape)) / stats.std.reshape(shape)


# --------------------------------------------------------------------------
# datasets on disk
# --------------------------------------------------------------------------

@dataclass
class DataConfig:
    seed: int = 0
    slide_size: int = 256
    n_train: int = 12
    n_val: int = 3
    n_test: int = 5
    train_domains: list[int] = field(default_factory=lambda: [0, 1, 2])
    heldout_domains: list[int] = field(default_factory=lambda: [3, 4])
    reference_domain: int = 0
    profiles: list[ScannerProfile] = field(default_factory=lambda: list(DEFAULT_PROFILES))

    def __post_init__(self):
        self.profiles = [p if isinstance(p, ScannerProfile) else ScannerProfile(**p) for p in self.profiles]


@dataclass
class SlideSet:
    """All slides of an experiment with their quantized renderings."""

    split: SplitSpec
    profiles: list[ScannerProfile]
    masks: dict[int, np.ndarray]
    renders: dict[tuple[int, int], np.ndarray]
    slide_seeds: dict[int, int] = field(default_factory=dict)

    def image(self, slide_id: int, domain: int) -> np.ndarray:
        try:
            return self.renders[slide_id, domain]
        except KeyError:
            raise DataError(f"no rendering of slide {slide_id} in domain {domain}") from None

    @property
    def domain_names(self) -> list[str]:
        return [p.name for p in self.profiles]


def build_dataset(config: DataConfig) -> SlideSet:
    n = config.n_train + config.n_val + config.n_test
    ids = list(range(n))
    split = SplitSpec(ids[:config.n_train], ids[config.n_train:config.n_train + config.n_val],
                      ids[config.n_train + config.n_val:], list(config.train_domains),
                      list(config.heldout_domains), config.reference_domain)
    seeds = {i: int(np.random.default_rng([config.seed, i]).integers(2**31)) for i in ids}
    masks, renders = {}, {}
    for i in ids:
        slide = generate_slide(seeds[i], config.slide_size, slide_id=i)
        slide.seed = seeds[i]
        masks[i] = slide.mask
        for d in split.all_domains:
            renders[i, d] = quantize(render_domain(slide, config.profiles[d]))
    return SlideSet(split, list(config.profiles), masks, renders, seeds)


def _png_name(slide_id: int, domain: int | None) -> str:
    return f"slide{slide_id:03d}_mask.png" if domain is None else f"slide{slide_id:03d}_d{domain}.png"


def save_dataset(dataset: SlideSet, config: DataConfig, out_dir: str | Path) -> Path:
    """Write PNG renderings, PNG masks and ``manifest.json``; return the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, mask in dataset.masks.items():
        Image.fromarray(mask).save(out / "masks" / _png_name(i, None))
    for (i, d), img in dataset.renders.items():
        arr = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(out / "images" / _png_name(i, d))
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "data_config": {k: v for k, v in asdict(config).items() if k != "profiles"},
        "profiles": [asdict(p) for p in dataset.profiles],
        "split": asdict(dataset.split),
        "slide_seeds": {str(k): v for k, v in dataset.slide_seeds.items()},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path: str | Path) -> tuple[SlideSet, DataConfig]:
    path = Path(manifest_path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path} is not a {MANIFEST_FORMAT} file")
    profiles = [ScannerProfile(**p) for p in manifest["profiles"]]
    config = DataConfig(**manifest["data_config"], profiles=profiles)
    split = SplitSpec(**manifest["split"])
    root = path.parent
    masks, renders = {}, {}
    for i in [*split.train, *split.val, *split.test]:
        mpath = root / "masks" / _png_name(i, None)
        if not mpath.exists():
            raise DataError(f"missing mask {mpath}")
        masks[i] = np.asarray(Image.open(mpath), dtype=np.uint8)
        for d in split.all_domains:
            ipath = root / "images" / _png_name(i, d)
            if not ipath.exists():
                raise DataError(f"missing rendering {ipath}")
            renders[i, d] = np.asarray(Image.open(ipath), dtype=np.float64).transpose(2, 0, 1) / 255.0
    seeds = {int(k): v for k, v in manifest["slide_seeds"].items()}
    return SlideSet(split, profiles, masks, renders, seeds), config
