"""Synthetic standard-cell layouts and SEM-style renderings.

Layouts are Manhattan masks in two layer styles: metal (thin wires with
occasional L-bends) and diffusion (large blocky rectangles).  Each style comes
in a coarse and a fine node variant; the fine variant halves every feature
width and spacing.  Geometry parameters are given at a reference resolution of
64 px and scaled linearly with the requested size.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidConfigError, InvalidInputError

METAL = "metal"
DIFFUSION = "diffusion"
FINE = "fine"
COARSE = "coarse"
LAYER_CLASSES = (METAL, DIFFUSION)
NODE_CLASSES = (FINE, COARSE)
REFERENCE_SIZE = 64

# Geometry at the reference size for the coarse node: (min, max) in pixels.
_METAL_WIDTH = (4, 6)
_METAL_SPACING = 6
_METAL_COUNT = (3, 12)
_METAL_BEND_PROB = 0.35
_DIFF_SIDE = (10, 24)
_DIFF_SPACING = 6
_DIFF_COUNT = (2, 6)


def class_key(layer_class: str, node_class: str) -> str:
    return f"{layer_class}/{node_class}"


def parse_class_key(key: str) -> tuple[str, str]:
    try:
        layer, node = key.split("/")
    except ValueError:
        raise InvalidConfigError(f"class key must look like 'metal/coarse', got {key!r}") from None
    _check_classes(layer, node)
    return layer, node


def _check_classes(layer_class: str, node_class: str) -> None:
    if layer_class not in LAYER_CLASSES:
        raise InvalidConfigError(f"unknown layer class {layer_class!r}")
    if node_class not in NODE_CLASSES:
        raise InvalidConfigError(f"unknown node class {node_class!r}")


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class LayoutMask:
    pixels: np.ndarray
    layer_class: str
    node_class: str
    cell_id: str

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise InvalidInputError("layout mask must be 2D")
        if not np.isin(px, (0, 1)).all():
            raise InvalidInputError("layout mask must be binary")
        object.__setattr__(self, "pixels", px.astype(np.uint8))

    @property
    def class_key(self) -> str:
        return class_key(self.layer_class, self.node_class)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def foreground_fraction(self) -> float:
        return float(self.pixels.mean())


@dataclass(frozen=True)
class SemImage:
    pixels: np.ndarray
    source_cell_id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise InvalidInputError("SEM image must be 2D")
        if not np.isfinite(px).all() or px.min() < 0 or px.max() > 255:
            raise InvalidInputError("SEM intensities must be finite and within [0, 255]")
        object.__setattr__(self, "pixels", px)

    def as_unit(self) -> np.ndarray:
        """Intensities rescaled to [0, 1] for model ingestion."""
        return self.pixels / 255.0


@dataclass
class SynthesisParams:
    bg_mean: float = 75.0
    fg_mean: float = 135.0
    intensity_std: float = 20.0
    shot_noise_level: float = 20.0
    dwell_time_us_per_px: float = 10.0
    image_size: int = 256
    rng_seed: int = 0

    def __post_init__(self):
        if not self.fg_mean > self.bg_mean:
            raise InvalidConfigError("fg_mean must exceed bg_mean")
        if not self.intensity_std > 0:
            raise InvalidConfigError("intensity_std must be positive")
        if self.shot_noise_level < 0 or self.dwell_time_us_per_px <= 0:
            raise InvalidConfigError("shot_noise_level must be >= 0 and dwell time > 0")
        if not (_is_pow2(self.image_size) and self.image_size >= 32):
            raise InvalidConfigError(f"image_size must be a power of two >= 32, got {self.image_size}")


def _scaled(value: float, size: int, node_class: str) -> int:
    v = value * size / REFERENCE_SIZE
    if node_class == FINE:
        v /= 2
    return max(1, int(round(v)))


def _range(lo_hi: tuple[int, int], size: int, node_class: str) -> tuple[int, int]:
    lo, hi = (_scaled(v, size, node_class) for v in lo_hi)
    return lo, max(lo, hi)


def _free(occupied: np.ndarray, rects: list[tuple[int, int, int, int]], spacing: int) -> bool:
    n = occupied.shape[0]
    for r0, c0, r1, c1 in rects:
        if r0 < 0 or c0 < 0 or r1 > n or c1 > n:
            return False
        if occupied[max(0, r0 - spacing):r1 + spacing, max(0, c0 - spacing):c1 + spacing].any():
            return False
    return True


def _metal_shape(rng: np.random.Generator, size: int, width: int) -> list[tuple[int, int, int, int]]:
    length = int(rng.integers(size // 4, (3 * size) // 4 + 1))
    horizontal = bool(rng.integers(2))
    r = int(rng.integers(0, size - width + 1))
    c = int(rng.integers(0, size - length + 1))
    if horizontal:
        rects = [(r, c, r + width, c + length)]
    else:
        rects = [(c, r, c + length, r + width)]
    if rng.random() < _METAL_BEND_PROB:
        bend = int(rng.integers(size // 8, size // 3 + 1))
        r0, c0, r1, c1 = rects[0]
        at_end = bool(rng.integers(2))
        up = bool(rng.integers(2))
        if horizontal:
            cc = c1 - width if at_end else c0
            rects.append((r0 - bend, cc, r0 + width, cc + width) if up else (r0, cc, r0 + width + bend, cc + width))
        else:
            rr = r1 - width if at_end else r0
            rects.append((rr, c0 - bend, rr + width, c0 + width) if up else (rr, c0, rr + width, c0 + width + bend))
    return rects


def _diffusion_shape(rng: np.random.Generator, size: int, side: tuple[int, int]) -> list[tuple[int, int, int, int]]:
    h = int(rng.integers(side[0], side[1] + 1))
    w = int(rng.integers(side[0], side[1] + 1))
    r = int(rng.integers(0, size - h + 1))
    c = int(rng.integers(0, size - w + 1))
    return [(r, c, r + h, c + w)]


def generate_layout(layer_class: str, node_class: str, size: int, rng_seed: int, cell_id: str | None = None) -> LayoutMask:
    """Deterministic Manhattan layout mask for one cell."""
    _check_classes(layer_class, node_class)
    if not (_is_pow2(size) and size >= 32):
        raise InvalidConfigError(f"layout size must be a power of two >= 32, got {size}")
    rng = np.random.default_rng(rng_seed)
    occupied = np.zeros((size, size), dtype=bool)
    if layer_class == METAL:
        lo, hi = _METAL_COUNT
        spacing = _scaled(_METAL_SPACING, size, node_class)
        widths = _range(_METAL_WIDTH, size, node_class)

        def propose():
            return _metal_shape(rng, size, int(rng.integers(widths[0], widths[1] + 1)))
    else:
        lo, hi = _DIFF_COUNT
        spacing = _scaled(_DIFF_SPACING, size, node_class)
        sides = _range(_DIFF_SIDE, size, node_class)

        def propose():
            return _diffusion_shape(rng, size, sides)

    wanted = int(rng.integers(lo, hi + 1))
    placed = 0
    for _ in range(200 * hi):
        if placed == wanted:
            break
        rects = propose()
        if _free(occupied, rects, spacing):
            for r0, c0, r1, c1 in rects:
                occupied[r0:r1, c0:c1] = True
            placed += 1
    if placed < lo:
        raise InvalidConfigError(f"could not place {lo} {layer_class} shapes at size {size}")
    if cell_id is None:
        cell_id = f"{layer_class}-{node_class}-s{rng_seed}"
    return LayoutMask(occupied.astype(np.uint8), layer_class, node_class, cell_id)


def synthesize_sem(mask: LayoutMask, params: SynthesisParams, rng_seed: int) -> SemImage:
    """Render a layout as a noisy SEM-like image.

    Gaussian intensities per region, followed by a shot-noise term: the
    intensity is treated as a Poisson count with unit ``shot/dwell`` so that
    its mean is unchanged and its variance is ``intensity * shot/dwell``.
    """
    if mask.shape != (params.image_size, params.image_size):
        raise InvalidInputError(f"mask shape {mask.shape} does not match image_size {params.image_size}")
    rng = np.random.default_rng(rng_seed)
    fg = mask.pixels.astype(bool)
    img = np.where(fg, params.fg_mean, params.bg_mean).astype(np.float64)
    img = img + params.intensity_std * rng.standard_normal(img.shape)
    if params.shot_noise_level > 0:
        unit = params.shot_noise_level / params.dwell_time_us_per_px
        img = rng.poisson(np.clip(img, 0, None) / unit) * unit
    return SemImage(np.clip(img, 0.0, 255.0), mask.cell_id)


# --------------------------------------------------------------------------
# datasets


@dataclass
class ClientSpec:
    count: int
    classes: list[str]

    def __post_init__(self):
        if self.count < 1:
            raise InvalidConfigError("client sample count must be >= 1")
        if not self.classes:
            raise InvalidConfigError("client needs at least one class")
        for key in self.classes:
            parse_class_key(key)


@dataclass
class DatasetConfig:
    clients: list[ClientSpec]
    synthesis: SynthesisParams = field(default_factory=SynthesisParams)
    holdout_per_class: int = 10
    holdout_classes: list[str] | None = None
    library_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.clients:
            raise InvalidConfigError("dataset needs at least one client")
        if self.holdout_per_class < 0:
            raise InvalidConfigError("holdout_per_class must be >= 0")
        for key in self.holdout_classes or []:
            parse_class_key(key)

    @property
    def classes(self) -> list[str]:
        """All classes in play: client classes plus explicit holdout classes."""
        seen: list[str] = []
        for spec in self.clients:
            seen += [k for k in spec.classes if k not in seen]
        seen += [k for k in (self.holdout_classes or []) if k not in seen]
        return seen


@dataclass
class Sample:
    image: SemImage
    mask: LayoutMask

    @property
    def cell_id(self) -> str:
        return self.mask.cell_id


@dataclass
class Dataset:
    clients: list[list[Sample]]
    holdout: list[Sample]
    config: DatasetConfig

    def records(self) -> list[dict]:
        rows = []
        for k, samples in enumerate(self.clients):
            rows += [_record(s, f"client{k}", self.config.seed) for s in samples]
        rows += [_record(s, "holdout", self.config.seed) for s in self.holdout]
        return rows

    def client_classes(self, k: int) -> list[str]:
        return sorted({s.mask.class_key for s in self.clients[k]})


def _record(s: Sample, assignment: str, seed: int) -> dict:
    return {
        "cell_id": s.cell_id,
        "layer_class": s.mask.layer_class,
        "node_class": s.mask.node_class,
        "client": assignment,
        "seed": seed,
    }


_CLASS_CODES = {class_key(l, n): i for i, (l, n) in enumerate((l, n) for l in LAYER_CLASSES for n in NODE_CLASSES)}


def cell_seed(master_seed: int, key: str, index: int, stream: int = 0) -> int:
    """Derived seed for cell ``index`` of class ``key``; stream 0 = layout, 1 = SEM."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(_CLASS_CODES[key], index, stream))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_sample(key: str, index: int, config: DatasetConfig) -> Sample:
    layer, node = parse_class_key(key)
    cell_id = f"{layer}-{node}-{index:04d}"
    size = config.synthesis.image_size
    mask = generate_layout(layer, node, size, cell_seed(config.seed, key, index, 0), cell_id=cell_id)
    image = synthesize_sem(mask, config.synthesis, cell_seed(config.seed, key, index, 1))
    # quantise to 8 bits so the in-memory image equals its PNG
    return Sample(SemImage(np.round(image.pixels), cell_id), mask)


def build_dataset(config: DatasetConfig) -> Dataset:
    """Partition freshly generated cells across clients plus a held-out pool.

    Each class draws cells from its own library of ``library_size`` layouts in
    index order, so no cell can appear twice.
    """
    demand: dict[str, int] = {}
    plan: list[list[str]] = []
    for spec in config.clients:
        keys = [spec.classes[i % len(spec.classes)] for i in range(spec.count)]
        plan.append(keys)
        for key in keys:
            demand[key] = demand.get(key, 0) + 1
    holdout_keys = config.classes if config.holdout_classes is None else config.holdout_classes
    for key in holdout_keys:
        demand[key] = demand.get(key, 0) + config.holdout_per_class
    for key, n in demand.items():
        if n > config.library_size:
            raise InvalidConfigError(f"class {key} needs {n} cells but the library holds {config.library_size}")

    cursor = {key: 0 for key in demand}

    def take(key: str) -> Sample:
        idx = cursor[key]
        cursor[key] += 1
        return make_sample(key, idx, config)

    clients = [[take(key) for key in keys] for keys in plan]
    holdout = [take(key) for key in holdout_keys for _ in range(config.holdout_per_class)]
    return Dataset(clients, holdout, config)


def canonical_guide(key: str, size: int, seed: int = 12345) -> LayoutMask:
    """Reference layout the attacker uses as the guiding label for a class."""
    layer, node = parse_class_key(key)
    return generate_layout(layer, node, size, seed, cell_id=f"guide-{layer}-{node}-s{seed}")


# --------------------------------------------------------------------------
# on-disk layout


def save_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"))


def write_dataset(dataset: Dataset, data_dir: Path) -> Path:
    """Write PNGs per client plus ``dataset.json``; returns the manifest path."""
    data_dir = Path(data_dir)
    groups = [(f"client{k}", samples) for k, samples in enumerate(dataset.clients)]
    groups.append(("holdout", dataset.holdout))
    for name, samples in groups:
        d = data_dir / name
        d.mkdir(parents=True, exist_ok=True)
        for s in samples:
            save_png(d / f"{s.cell_id}_img.png", s.image.pixels)
            save_png(d / f"{s.cell_id}_mask.png", s.mask.pixels * 255)
    payload = {"cells": dataset.records(), "config": dataset_config_to_dict(dataset.config)}
    path = data_dir / "dataset.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")
    return path


def load_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    payload = json.loads((data_dir / "dataset.json").read_text(encoding="utf-8"))
    config = dataset_config_from_dict(payload["config"])
    clients: list[list[Sample]] = [[] for _ in config.clients]
    holdout: list[Sample] = []
    for row in payload["cells"]:
        d = data_dir / row["client"]
        mask = LayoutMask((load_png(d / f"{row['cell_id']}_mask.png") > 127).astype(np.uint8),
                          row["layer_class"], row["node_class"], row["cell_id"])
        image = SemImage(load_png(d / f"{row['cell_id']}_img.png").astype(np.float64), row["cell_id"])
        target = holdout if row["client"] == "holdout" else clients[int(row["client"][len("client"):])]
        target.append(Sample(image, mask))
    return Dataset(clients, holdout, config)


def dataset_config_to_dict(config: DatasetConfig) -> dict:
    return asdict(config)


def dataset_config_from_dict(d: dict) -> DatasetConfig:
    d = dict(d)
    d["clients"] = [ClientSpec(**c) for c in d["clients"]]
    d["synthesis"] = SynthesisParams(**d.get("synthesis", {}))
    return DatasetConfig(**d)
