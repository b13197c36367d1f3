"""Synthetic multi-domain segmentation benchmark.

Each sample is one parametric lesion shape (family and texture chosen by
class) composited on a smooth background, then pushed through a site-specific
appearance transform. Transforms touch the image only, never the geometry, so
label maps are identical across domains for a fixed seed: the class signal is
domain-invariant by construction while appearance confounders vary per site.

Documented confounder parameter ranges: brightness gain in [0.5, 1.6],
per-channel color cast in [-0.15, 0.15], blur radius in {0, 1, 2}, noise
amplitude in [0, 0.12], occlusion probability in [0, 0.5].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .io import read_tensor, write_tensor
from .prompts import CLASS_NAMES

N_CLASSES = len(CLASS_NAMES)
AREA_HARD_MIN = 0.01
AREA_HARD_MAX = 0.50
DEFAULT_AREA_RANGE = (0.04, 0.32)
MAX_SHAPE_TRIES = 16


class DegenerateShapeError(RuntimeError):
    """Shape sampling failed the area bounds after the retry budget."""


@dataclass(frozen=True)
class DomainSpec:
    """Appearance confounders for one acquisition site."""

    site: str
    brightness: float
    color_cast: tuple[float, float, float]
    blur_radius: int
    noise_amp: float
    occlusion_prob: float

    def __post_init__(self):
        if not 0.5 <= self.brightness <= 1.6:
            raise ValueError(f"brightness {self.brightness} outside [0.5, 1.6]")
        if any(abs(c) > 0.15 for c in self.color_cast):
            raise ValueError("color cast component outside [-0.15, 0.15]")
        if self.blur_radius not in (0, 1, 2):
            raise ValueError("blur radius must be 0, 1 or 2")
        if not 0.0 <= self.noise_amp <= 0.12:
            raise ValueError("noise amplitude outside [0, 0.12]")
        if not 0.0 <= self.occlusion_prob <= 0.5:
            raise ValueError("occlusion probability outside [0, 0.5]")

    @classmethod
    def identity(cls, site: str = "identity") -> "DomainSpec":
        return cls(site, 1.0, (0.0, 0.0, 0.0), 0, 0.0, 0.0)

    def params_tuple(self) -> tuple:
        return (self.brightness, self.color_cast, self.blur_radius,
                self.noise_amp, self.occlusion_prob)


def default_domains() -> dict[str, DomainSpec]:
    """The five shipped sites; parameter tuples are pairwise distinct."""
    raw = json.loads(resources.files("mcdrl").joinpath("data/sites.json").read_text("utf-8"))
    domains = {
        site: DomainSpec(site=site, brightness=cfg["brightness"],
                         color_cast=tuple(cfg["color_cast"]),
                         blur_radius=cfg["blur_radius"], noise_amp=cfg["noise_amp"],
                         occlusion_prob=cfg["occlusion_prob"])
        for site, cfg in sorted(raw.items())
    }
    tuples = [d.params_tuple() for d in domains.values()]
    if len(set(tuples)) != len(tuples):
        raise ValueError("two sites share identical confounder parameters")
    return domains


@dataclass
class SegmentationSample:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64 in {0..K}
    class_id: int  # 1-based lesion class
    domain: str
    seed: int


# ---------------------------------------------------------------------------
# rendering

# per class: (axis ratio, lobe count, lobe amplitude)
_SHAPE_FAMILY = {
    1: (1.0, 0, 0.0),
    2: (2.2, 0, 0.0),
    3: (1.2, 5, 0.25),
    4: (1.0, 8, 0.12),
    5: (1.5, 3, 0.15),
}

_CLASS_TINTS = {
    1: (0.85, 0.45, 0.40),
    2: (0.55, 0.30, 0.30),
    3: (0.80, 0.60, 0.35),
    4: (0.60, 0.55, 0.75),
    5: (0.75, 0.75, 0.50),
}


def _texture(class_id: int, yy: np.ndarray, xx: np.ndarray, phase: float) -> np.ndarray:
    """Class-identifying local pattern in [0, 1]; survives brightness shifts."""
    if class_id == 1:
        pat = np.sin(2 * np.pi * xx / 4 + phase) * np.sin(2 * np.pi * yy / 4 + phase)
    elif class_id == 2:
        pat = np.sin(2 * np.pi * xx / 4 + phase)
    elif class_id == 3:
        pat = np.sin(2 * np.pi * (xx + yy) / 6 + phase)
    elif class_id == 4:
        pat = np.sin(2 * np.pi * yy / 4 + phase)
    else:
        r = np.sqrt(yy * yy + xx * xx)
        pat = np.sin(2 * np.pi * r / 8 + phase)
    return 0.5 + 0.5 * pat


def _rasterize_shape(class_id: int, h: int, w: int, rng: np.random.Generator,
                     area_range: tuple[float, float]) -> np.ndarray:
    ratio, lobes, amp = _SHAPE_FAMILY[class_id]
    target = rng.uniform(*area_range)
    cy = h / 2 + rng.uniform(-h / 6, h / 6)
    cx = w / 2 + rng.uniform(-w / 6, w / 6)
    ax = np.sqrt(target * h * w * ratio / np.pi)
    ay = ax / ratio
    angle = rng.uniform(0, np.pi)
    phi = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    yr = (ys - cy) * np.cos(angle) - (xs - cx) * np.sin(angle)
    xr = (ys - cy) * np.sin(angle) + (xs - cx) * np.cos(angle)
    radius = np.sqrt((xr / ax) ** 2 + (yr / ay) ** 2)
    boundary = 1.0
    if lobes:
        boundary = 1.0 + amp * np.cos(lobes * np.arctan2(yr, xr) + phi)
    return radius <= boundary


def _box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Separable box blur with edge replication; kernel width 2*radius + 1."""
    if radius == 0:
        return image
    out = image
    for axis in (0, 1):
        padded = np.concatenate(
            [np.repeat(out.take([0], axis=axis), radius, axis=axis), out,
             np.repeat(out.take([-1], axis=axis), radius, axis=axis)], axis=axis)
        csum = np.cumsum(padded, axis=axis, dtype=np.float64)
        width = 2 * radius + 1
        lead = csum.take(range(width - 1, padded.shape[axis]), axis=axis)
        lag = np.concatenate(
            [np.zeros_like(csum.take([0], axis=axis)),
             csum.take(range(0, padded.shape[axis] - width), axis=axis)], axis=axis)
        out = (lead - lag) / width
    return out


def apply_domain(image: np.ndarray, domain: DomainSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Site-specific appearance transform; geometry and labels are untouched."""
    out = image * domain.brightness + np.asarray(domain.color_cast)
    out = _box_blur(out, domain.blur_radius)
    noise = rng.standard_normal(out.shape)
    if domain.noise_amp:
        out = out + domain.noise_amp * noise
    occluded = rng.random() < domain.occlusion_prob
    oy, ox = rng.uniform(0, out.shape[0]), rng.uniform(0, out.shape[1])
    orad = rng.uniform(3.0, max(4.0, out.shape[0] / 4))
    if occluded:
        ys, xs = np.mgrid[0:out.shape[0], 0:out.shape[1]]
        dist = np.sqrt((ys - oy) ** 2 + (xs - ox) ** 2)
        shade = 1.0 - 0.8 * np.clip(1.0 - dist / orad, 0.0, 1.0)
        out = out * shade[:, :, None]
    return np.clip(out, 0.0, 1.0)


def generate_sample(rng_seed: int, class_k: int, domain: DomainSpec, height: int = 32,
                    width: int = 32,
                    area_range: tuple[float, float] = DEFAULT_AREA_RANGE) -> SegmentationSample:
    """Render one sample; fully determined by (seed, class, domain, dims)."""
    if not 1 <= class_k <= N_CLASSES:
        raise ValueError(f"class id {class_k} outside 1..{N_CLASSES}")
    if not AREA_HARD_MIN <= area_range[0] <= area_range[1] <= AREA_HARD_MAX:
        raise ValueError(f"area range {area_range} outside [{AREA_HARD_MIN}, {AREA_HARD_MAX}]")
    geo_ss, dom_ss = np.random.SeedSequence([0xbe9c, int(rng_seed)]).spawn(2)
    geo_rng = np.random.default_rng(geo_ss)

    mask = None
    for _ in range(MAX_SHAPE_TRIES):
        candidate = _rasterize_shape(class_k, height, width, geo_rng, area_range)
        frac = candidate.mean()
        if AREA_HARD_MIN <= frac <= AREA_HARD_MAX:
            mask = candidate
            break
    if mask is None:
        raise DegenerateShapeError(
            f"no shape within area bounds after {MAX_SHAPE_TRIES} tries (seed {rng_seed})")

    ys, xs = np.mgrid[0:height, 0:width]
    base = geo_rng.uniform(0.35, 0.55, size=3)
    fy, fx = geo_rng.uniform(0.5, 1.5, size=2)
    wave = 0.08 * np.cos(2 * np.pi * (fy * ys / height + fx * xs / width)
                         + geo_rng.uniform(0, 2 * np.pi))
    background = np.clip(base[None, None, :] + wave[:, :, None], 0.05, 0.95)

    cy, cx = ys - height / 2, xs - width / 2
    pattern = _texture(class_k, cy, cx, geo_rng.uniform(0, 2 * np.pi))
    tint = np.asarray(_CLASS_TINTS[class_k])
    lesion = tint[None, None, :] * (0.35 + 0.65 * pattern[:, :, None])

    image = np.where(mask[:, :, None], lesion, background)
    image = apply_domain(image, domain, np.random.default_rng(dom_ss))
    return SegmentationSample(image=image, labels=mask.astype(np.int64) * class_k,
                              class_id=class_k, domain=domain.site, seed=int(rng_seed))


# ---------------------------------------------------------------------------
# splits and persistence

@dataclass
class Dataset:
    samples: list[SegmentationSample]
    height: int
    width: int
    n_classes: int
    domains: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    def holdout(self, site: str) -> tuple["Dataset", "Dataset"]:
        """Leave-one-domain-out split: (train on the rest, test on ``site``)."""
        if site not in self.domains:
            raise ValueError(f"unknown site {site!r}; have {self.domains}")
        train = [s for s in self.samples if s.domain != site]
        test = [s for s in self.samples if s.domain == site]
        rest = [d for d in self.domains if d != site]
        return (Dataset(train, self.height, self.width, self.n_classes, rest),
                Dataset(test, self.height, self.width, self.n_classes, [site]))


def sample_seed(base_seed: int, domain_index: int, index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), int(domain_index), int(index)])
    return int(ss.generate_state(1)[0])


def generate_split(n_per_domain: int, seed: int,
                   domains: dict[str, DomainSpec] | None = None, height: int = 32,
                   width: int = 32,
                   area_range: tuple[float, float] = DEFAULT_AREA_RANGE) -> Dataset:
    """Balanced dataset: ``n_per_domain`` samples per site, classes cycled."""
    if n_per_domain < 1:
        raise ValueError("n_per_domain must be at least 1")
    domains = default_domains() if domains is None else domains
    samples = []
    for d_idx, site in enumerate(sorted(domains)):
        spec = domains[site]
        for i in range(n_per_domain):
            samples.append(generate_sample(sample_seed(seed, d_idx, i), 1 + i % N_CLASSES,
                                           spec, height, width, area_range))
    return Dataset(samples, height, width, N_CLASSES, sorted(domains))


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """One float32 tensor file per sample (RGB + label channel) plus a manifest."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(dataset.samples):
        rel = f"samples/{s.domain}_{i:05d}.mcdt"
        stacked = np.concatenate([s.image, s.labels[:, :, None].astype(np.float64)], axis=2)
        write_tensor(out / rel, stacked.astype(np.float32))
        entries.append({"path": rel, "class": s.class_id, "domain": s.domain,
                        "seed": s.seed})
    manifest = {
        "height": dataset.height, "width": dataset.width,
        "n_classes": dataset.n_classes, "domains": dataset.domains,
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")
    return out


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found at {manifest_path}")
    manifest = json.loads(manifest_path.read_text("utf-8"))
    samples = []
    for entry in manifest["samples"]:
        stacked = read_tensor(root / entry["path"]).astype(np.float64)
        samples.append(SegmentationSample(
            image=np.ascontiguousarray(stacked[:, :, :3]),
            labels=np.rint(stacked[:, :, 3]).astype(np.int64),
            class_id=entry["class"], domain=entry["domain"], seed=entry["seed"]))
    return Dataset(samples, manifest["height"], manifest["width"],
                   manifest["n_classes"], manifest["domains"])
