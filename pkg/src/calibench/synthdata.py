"""Procedural two-domain segmentation data.

Each image is a Voronoi partition whose cells are assigned classes according to
a class-ratio profile. Pixels take their class colour plus Gaussian texture noise.
The target domain applies an appearance offset, a noise change and a class-ratio
reweighting on top of the source description.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .numkit import calt
from .numkit.calt import FormatError
from .numkit.rng import generator
from .numkit.tensor import ConfigError, ContractError


@dataclass
class DomainSpec:
    num_classes: int = 4
    height: int = 32
    width: int = 32
    class_means: list[list[float]] = field(default_factory=lambda: [
        [0.2, 0.6, 0.2], [0.6, 0.3, 0.4], [0.3, 0.3, 0.7], [0.6, 0.6, 0.5]])
    noise_sigma: list[float] = field(default_factory=lambda: [0.12, 0.12, 0.12, 0.12])
    ratios: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    n_cells: int = 8
    # target-side shift
    appearance_offset: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    class_offsets: list[list[float]] | None = None
    noise_delta: float = 0.0
    ratio_weights: list[float] | None = None

    def validate(self) -> None:
        K = self.num_classes
        if K < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.height <= 0 or self.width <= 0 or self.n_cells < 1:
            raise ConfigError("image size and n_cells must be positive")
        means = np.asarray(self.class_means, dtype=float)
        if means.ndim != 2 or means.shape[0] != K:
            raise ConfigError(f"class_means must be {K} x C")
        if len(self.noise_sigma) != K or min(self.noise_sigma) <= 0:
            raise ConfigError("noise_sigma must hold K positive values")
        r = np.asarray(self.ratios, dtype=float)
        if r.shape != (K,) or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
            raise ConfigError("ratios must be K non-negative values summing to 1")
        if len(self.appearance_offset) != means.shape[1]:
            raise ConfigError("appearance_offset length must equal channel count")
        if self.class_offsets is not None and np.asarray(self.class_offsets).shape != means.shape:
            raise ConfigError("class_offsets must match class_means")
        if self.ratio_weights is not None:
            w = np.asarray(self.ratio_weights, dtype=float)
            if w.shape != (K,) or np.any(w < 0) or not np.any(w * r > 0):
                raise ConfigError("ratio_weights must be K non-negative values")
        if min(self.noise_sigma) + self.noise_delta <= 0:
            raise ConfigError("target noise must stay positive")

    @property
    def channels(self) -> int:
        return len(self.class_means[0])

    def domain_params(self, domain: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(means K x C, sigma K, ratios K) for ``"source"`` or ``"target"``."""
        means = np.asarray(self.class_means, dtype=float)
        sigma = np.asarray(self.noise_sigma, dtype=float)
        ratios = np.asarray(self.ratios, dtype=float)
        if domain == "source":
            return means, sigma, ratios
        means = means + np.asarray(self.appearance_offset, dtype=float)
        if self.class_offsets is not None:
            means = means + np.asarray(self.class_offsets, dtype=float)
        sigma = sigma + self.noise_delta
        if self.ratio_weights is not None:
            ratios = ratios * np.asarray(self.ratio_weights, dtype=float)
            ratios = ratios / ratios.sum()
        return means, sigma, ratios


@dataclass
class Dataset:
    spec: DomainSpec
    domain: str
    seed: int
    images: list[np.ndarray]
    labels: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def eval_only_labels(self) -> bool:
        return self.domain == "target"

    def class_ids(self, i: int) -> np.ndarray:
        return np.argmax(self.labels[i], axis=0)

    def manifest(self) -> dict:
        return {"count": len(self), "domain": self.domain, "seed": self.seed,
                "eval_only_labels": self.eval_only_labels, "spec": asdict(self.spec)}


def one_hot(ids: np.ndarray, K: int) -> np.ndarray:
    return (np.arange(K)[:, None, None] == ids[None]).astype(np.float64)


def region_map(spec: DomainSpec, ratios: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Voronoi partition of the image grid; each cell's class is drawn from ``ratios``."""
    H, W = spec.height, spec.width
    seeds = rng.uniform(0, 1, size=(spec.n_cells, 2)) * (H, W)
    cell_cls = rng.choice(spec.num_classes, size=spec.n_cells, p=ratios)
    rr, cc = np.mgrid[0:H, 0:W]
    d2 = (rr[None] + 0.5 - seeds[:, 0, None, None]) ** 2 + (cc[None] + 0.5 - seeds[:, 1, None, None]) ** 2
    return cell_cls[np.argmin(d2, axis=0)]


def render(ids: np.ndarray, means: np.ndarray, sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    C = means.shape[1]
    noise = rng.standard_normal((C, *ids.shape))
    return means[ids].transpose(2, 0, 1) + sigma[ids][None] * noise


def generate_domain(spec: DomainSpec, domain: str, n: int, seed: int) -> Dataset:
    spec.validate()
    if n < 1:
        raise ConfigError("need at least one sample")
    means, sigma, ratios = spec.domain_params(domain)
    images, labels = [], []
    for i in range(n):
        rng = generator(seed, domain, i)
        ids = region_map(spec, ratios, rng)
        images.append(render(ids, means, sigma, rng))
        labels.append(one_hot(ids, spec.num_classes))
    return Dataset(spec, domain, seed, images, labels)


def generate_domain_pair(spec: DomainSpec, n_source: int, n_target: int, seed: int) -> tuple[Dataset, Dataset]:
    return generate_domain(spec, "source", n_source, seed), generate_domain(spec, "target", n_target, seed)


def pixel_features(ds: Dataset, per_image: int = 64, seed: int = 0) -> np.ndarray:
    """Random pixel colour vectors from a dataset, as rows."""
    rng = generator(seed, "pixels", ds.domain)
    rows = []
    for x in ds.images:
        flat = x.reshape(x.shape[0], -1)
        idx = rng.choice(flat.shape[1], size=min(per_image, flat.shape[1]), replace=False)
        rows.append(flat[:, idx].T)
    return np.concatenate(rows)


# -- label remapping ---------------------------------------------------------------------

@dataclass
class LabelMap:
    mapping: dict[int, int]

    def __post_init__(self):
        groups = sorted(set(self.mapping.values()))
        if groups != list(range(len(groups))):
            raise ConfigError(f"group ids must be contiguous from 0, got {groups}")

    @property
    def num_groups(self) -> int:
        return len(set(self.mapping.values()))


def remap_labels(y: np.ndarray, label_map: LabelMap) -> np.ndarray:
    K = y.shape[0]
    missing = [k for k in range(K) if k not in label_map.mapping]
    if missing:
        raise ContractError(f"label map does not cover class ids {missing}")
    out = np.zeros((label_map.num_groups, *y.shape[1:]))
    for k in range(K):
        out[label_map.mapping[k]] += y[k]
    return out


# -- presets -----------------------------------------------------------------------------

def preset(name: str) -> DomainSpec:
    """Shipped benchmark domains, 16x16 with four Voronoi cells per image.

    ``mild-shift``: appearance change only (a blue cast), class proportions unchanged.
    ``hard-shift``: the same appearance change plus a strong class-ratio change.
    ``identical``: no shift at all.
    """
    base = DomainSpec(height=16, width=16, n_cells=4)
    if name == "identical":
        return base
    shifted = replace(base, appearance_offset=[0.0, 0.0, 0.27])
    if name == "mild-shift":
        return shifted
    if name == "hard-shift":
        return replace(shifted, ratio_weights=[6.0, 0.25, 3.0, 0.25])
    raise ConfigError(f"unknown preset {name!r}")


# -- I/O ---------------------------------------------------------------------------------

def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(ds.manifest(), indent=2, sort_keys=True))
    for i, (x, y) in enumerate(zip(ds.images, ds.labels)):
        calt.save(path / f"img_{i:06d}.calt", x)
        calt.save(path / f"lbl_{i:06d}.calt", y)


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        man = json.loads((path / "manifest.json").read_text())
        spec = DomainSpec(**man["spec"])
        count = int(man["count"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad manifest: {exc}", 0) from None
    present = sorted(path.glob("img_*.calt"))
    if len(present) != count or len(sorted(path.glob("lbl_*.calt"))) != count:
        raise FormatError(f"manifest lists {count} samples, found {len(present)}", 0)
    images, labels = [], []
    for i in range(count):
        images.append(calt.load(path / f"img_{i:06d}.calt"))
        labels.append(calt.load(path / f"lbl_{i:06d}.calt"))
    return Dataset(spec, man["domain"], man["seed"], images, labels)
