"""SAR scene handling: raster codecs, SA-code taxonomy, tiling, block splitting, normalisation.

Scenes carry two dB-scaled backscatter channels (HH, HV) with NaN as nodata;
label rasters carry one SIGRID-3 stage-of-development (SA) code per pixel with
255 meaning invalid, land or unlabelled.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from tqdm import tqdm

from calculations import db_from_linear, gaussian_taper, l1_distance, linear_from_db, patch_footprint_m, proportions
from errors import FormatError, InputError, ParameterError, SpecError, StratificationError

logger = logging.getLogger(__name__)

SCENE_MAGIC = b"ICESCN01"
LABEL_MAGIC = b"ICELBL01"
SCENE_SUFFIX = ".scn"
LABEL_SUFFIX = ".lbl"
INVALID_CODE = 255
INVALID = -1
CHANNELS = ("HH", "HV")
DEFAULT_PIXEL_SPACING_M = 40.0
STD_FLOOR = 1e-6
MANIFEST_HEADER = ["scene_id", "row0", "col0", "patch_size", "class_index", "purity", "block_id", "split"]
TAXONOMY_DIR = Path(__file__).resolve().with_name("taxonomies")
DEFAULT_TAXONOMY_PATH = TAXONOMY_DIR / "sigrid3_default.txt"
SPLIT_OLD_TAXONOMY_PATH = TAXONOMY_DIR / "sigrid3_split_old.txt"


# Rasters


@dataclass
class SceneRaster:
    scene_id: str
    width: int
    height: int
    data: np.ndarray  # float32, channels x height x width
    pixel_spacing_m: float = DEFAULT_PIXEL_SPACING_M

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != (len(CHANNELS), self.height, self.width):
            raise FormatError(
                f"scene {self.scene_id!r}: data shape {self.data.shape} != ({len(CHANNELS)}, {self.height}, {self.width})"
            )
        if not self.pixel_spacing_m > 0:
            raise FormatError(f"scene {self.scene_id!r}: pixel spacing must be positive, got {self.pixel_spacing_m}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class LabelRaster:
    width: int
    height: int
    codes: np.ndarray  # uint8, height x width

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        if self.codes.shape != (self.height, self.width):
            raise FormatError(f"label codes shape {self.codes.shape} != ({self.height}, {self.width})")


def validate_pair(scene: SceneRaster, labels: LabelRaster) -> None:
    if (labels.width, labels.height) != (scene.width, scene.height):
        raise FormatError(
            f"labels are {labels.width}x{labels.height} but scene {scene.scene_id!r} is {scene.width}x{scene.height}"
        )


def write_scene(scene: SceneRaster, path: str | Path) -> Path:
    path = Path(path)
    scene_id = scene.scene_id.encode("utf-8")
    header = struct.pack("<IIId", scene.width, scene.height, scene.channels, scene.pixel_spacing_m)
    payload = SCENE_MAGIC + header + struct.pack("<I", len(scene_id)) + scene_id + scene.data.astype("<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return path


def read_scene(path: str | Path) -> SceneRaster:
    path = Path(path)
    raw = path.read_bytes()
    fixed = len(SCENE_MAGIC) + struct.calcsize("<IIIdI")
    if len(raw) < fixed:
        raise FormatError(f"{path}: truncated scene header ({len(raw)} bytes)")
    if raw[: len(SCENE_MAGIC)] != SCENE_MAGIC:
        raise FormatError(f"{path}: not a scene file (bad magic)")
    width, height, channels, spacing, id_len = struct.unpack_from("<IIIdI", raw, len(SCENE_MAGIC))
    if channels != len(CHANNELS):
        raise FormatError(f"{path}: expected {len(CHANNELS)} channels, header says {channels}")
    offset = fixed + id_len
    if len(raw) < offset:
        raise FormatError(f"{path}: truncated scene id")
    try:
        scene_id = raw[fixed:offset].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: scene id is not valid UTF-8") from None
    expected = 4 * channels * width * height
    if len(raw) - offset != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - offset} bytes, header {width}x{height}x{channels} needs {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float32).reshape(channels, height, width)
    return SceneRaster(scene_id, width, height, data, spacing)


def write_labels(labels: LabelRaster, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(LABEL_MAGIC + struct.pack("<II", labels.width, labels.height) + labels.codes.tobytes())
    return path


def read_labels(path: str | Path) -> LabelRaster:
    path = Path(path)
    raw = path.read_bytes()
    fixed = len(LABEL_MAGIC) + 8
    if len(raw) < fixed:
        raise FormatError(f"{path}: truncated label header ({len(raw)} bytes)")
    if raw[: len(LABEL_MAGIC)] != LABEL_MAGIC:
        raise FormatError(f"{path}: not a label file (bad magic)")
    width, height = struct.unpack_from("<II", raw, len(LABEL_MAGIC))
    if len(raw) - fixed != width * height:
        raise FormatError(f"{path}: payload is {len(raw) - fixed} bytes, header {width}x{height} needs {width * height}")
    codes = np.frombuffer(raw, dtype=np.uint8, offset=fixed).reshape(height, width).copy()
    return LabelRaster(width, height, codes)


def scene_paths(directory: str | Path, scene_id: str) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{scene_id}{SCENE_SUFFIX}", directory / f"{scene_id}{LABEL_SUFFIX}"


def read_pair(scene_path: str | Path, label_path: str | Path) -> tuple[SceneRaster, LabelRaster]:
    scene, labels = read_scene(scene_path), read_labels(label_path)
    validate_pair(scene, labels)
    return scene, labels


def list_scene_ids(directory: str | Path) -> list[str]:
    return sorted(p.stem for p in Path(directory).glob(f"*{SCENE_SUFFIX}"))


class SceneStore(Mapping[str, SceneRaster]):
    """Lazy, caching view of the scene files in a directory, keyed by scene id."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"scene directory {self.directory} does not exist")
        self._cache: dict[str, SceneRaster] = {}

    def __getitem__(self, scene_id: str) -> SceneRaster:
        if scene_id not in self._cache:
            path, _ = scene_paths(self.directory, scene_id)
            if not path.exists():
                raise FileNotFoundError(f"scene {scene_id!r} not found at {path}")
            scene = read_scene(path)
            if scene.scene_id != scene_id:
                raise FormatError(f"{path}: file holds scene {scene.scene_id!r}, expected {scene_id!r}")
            self._cache[scene_id] = scene
        return self._cache[scene_id]

    def __iter__(self) -> Iterator[str]:
        return iter(list_scene_ids(self.directory))

    def __len__(self) -> int:
        return len(list_scene_ids(self.directory))


# Taxonomy


@dataclass(frozen=True)
class ClassTaxonomy:
    names: tuple[str, ...]
    code_to_class: Mapping[int, int]

    def __post_init__(self):
        if not self.names:
            raise FormatError("taxonomy has no classes")
        for code, index in self.code_to_class.items():
            if not 0 <= code < INVALID_CODE:
                raise FormatError(f"SA code {code} outside [0, {INVALID_CODE})")
            if not 0 <= index < len(self.names):
                raise FormatError(f"SA code {code} maps to missing class index {index}")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def lookup(self) -> np.ndarray:
        table = np.full(256, INVALID, dtype=np.int16)
        for code, index in self.code_to_class.items():
            table[code] = index
        return table

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InputError(f"class {name!r} not in taxonomy {list(self.names)}") from None

    def codes_for(self, index: int) -> list[int]:
        return sorted(code for code, c in self.code_to_class.items() if c == index)


def parse_taxonomy(text: str, source: str = "<taxonomy>") -> ClassTaxonomy:
    """Parse `code,class_name` lines; class order is order of first appearance."""
    names: list[str] = []
    mapping: dict[int, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        code_text, sep, name = line.partition(",")
        name = name.strip()
        if not sep or not name:
            raise FormatError(f"{source}:{lineno}: expected 'code,class_name'")
        try:
            code = int(code_text)
        except ValueError:
            raise FormatError(f"{source}:{lineno}: SA code {code_text.strip()!r} is not an integer") from None
        if code in mapping:
            raise FormatError(f"{source}:{lineno}: SA code {code} mapped twice")
        if name not in names:
            names.append(name)
        mapping[code] = names.index(name)
    return ClassTaxonomy(tuple(names), mapping)


def load_taxonomy(path: str | Path = DEFAULT_TAXONOMY_PATH) -> ClassTaxonomy:
    path = Path(path)
    return parse_taxonomy(path.read_text(encoding="utf-8"), str(path))


def default_taxonomy() -> ClassTaxonomy:
    return load_taxonomy(DEFAULT_TAXONOMY_PATH)


def map_sa_code(code: int, taxonomy: ClassTaxonomy) -> int:
    """Class index for an SA code, or INVALID for 255 and unmapped codes."""
    if code == INVALID_CODE:
        return INVALID
    return taxonomy.code_to_class.get(int(code), INVALID)


# Synthetic scenes


@dataclass(frozen=True)
class ClassTexture:
    hh_mean_db: float
    hh_std_db: float
    hv_mean_db: float
    hv_std_db: float
    correlation_length_px: float = 0.0

    def channel(self, c: int) -> tuple[float, float]:
        return (self.hh_mean_db, self.hh_std_db) if c == 0 else (self.hv_mean_db, self.hv_std_db)


# Representative SA code per default class, in class-index order.
DEFAULT_CLASS_CODES = (55, 81, 83, 86, 95, 98)

# Old/Multi-Year Ice sits between Young and First-Year Ice in mean backscatter
# and is told apart mainly by its coarser variance, so it stays confusable.
DEFAULT_TEXTURES: dict[int, ClassTexture] = {
    55: ClassTexture(-21.0, 2.5, -29.0, 1.5, 6.0),
    81: ClassTexture(-23.0, 1.5, -30.5, 1.0, 2.0),
    83: ClassTexture(-13.5, 1.5, -23.0, 1.5, 4.0),
    86: ClassTexture(-16.0, 1.5, -25.5, 1.5, 4.0),
    95: ClassTexture(-14.5, 3.0, -24.0, 2.5, 3.0),
    98: ClassTexture(-9.0, 2.5, -18.0, 2.0, 8.0),
}


@dataclass(frozen=True)
class Region:
    row0: int
    col0: int
    height: int
    width: int
    sa_code: int

    def overlaps(self, other: "Region") -> bool:
        return not (
            self.row0 + self.height <= other.row0
            or other.row0 + other.height <= self.row0
            or self.col0 + self.width <= other.col0
            or other.col0 + other.width <= self.col0
        )


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    width: int
    height: int
    regions: tuple[Region, ...]
    seed: int
    textures: Mapping[int, ClassTexture] = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    pixel_spacing_m: float = DEFAULT_PIXEL_SPACING_M
    looks: int | None = None


def _validate_spec(spec: SceneSpec) -> None:
    if spec.width < 1 or spec.height < 1:
        raise SpecError(f"scene {spec.scene_id!r}: size {spec.width}x{spec.height} must be positive")
    if spec.looks is not None and spec.looks < 1:
        raise SpecError(f"scene {spec.scene_id!r}: looks must be >= 1, got {spec.looks}")
    for i, region in enumerate(spec.regions):
        if region.height < 1 or region.width < 1:
            raise SpecError(f"region {i} of {spec.scene_id!r} is empty")
        if (
            region.row0 < 0
            or region.col0 < 0
            or region.row0 + region.height > spec.height
            or region.col0 + region.width > spec.width
        ):
            raise SpecError(f"region {i} of {spec.scene_id!r} extends outside the {spec.width}x{spec.height} scene")
        if not 0 <= region.sa_code <= INVALID_CODE:
            raise SpecError(f"region {i} of {spec.scene_id!r} has invalid SA code {region.sa_code}")
        if region.sa_code != INVALID_CODE and region.sa_code not in spec.textures:
            raise SpecError(f"region {i} of {spec.scene_id!r}: no texture for SA code {region.sa_code}")
        for j in range(i):
            if region.overlaps(spec.regions[j]):
                raise SpecError(f"regions {j} and {i} of {spec.scene_id!r} overlap")


def correlated_field(rng: np.random.Generator, height: int, width: int, correlation_length_px: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian random field with a Gaussian correlation taper."""
    white = rng.standard_normal((height, width))
    if correlation_length_px <= 0:
        return white
    freq = np.hypot(*np.meshgrid(np.fft.fftfreq(height), np.fft.fftfreq(width), indexing="ij"))
    taper = gaussian_taper(freq, correlation_length_px)
    filtered = np.real(np.fft.ifft2(np.fft.fft2(white) * taper))
    return filtered / math.sqrt(float(np.mean(taper**2)))


def generate_synthetic_scene(spec: SceneSpec) -> tuple[SceneRaster, LabelRaster]:
    """Gaussian-textured HH/HV backscatter over rectangular class regions.

    Pixels outside every region (and regions with code 255) are nodata.
    """
    _validate_spec(spec)
    h, w = spec.height, spec.width
    codes = np.full((h, w), INVALID_CODE, dtype=np.uint8)
    data = np.full((len(CHANNELS), h, w), np.nan)
    present = sorted({r.sa_code for r in spec.regions if r.sa_code != INVALID_CODE})
    fields = {}
    for code in present:
        texture = spec.textures[code]
        for c in range(len(CHANNELS)):
            rng = np.random.default_rng([spec.seed, code, c])
            mean, std = texture.channel(c)
            fields[code, c] = mean + std * correlated_field(rng, h, w, texture.correlation_length_px)
    for region in spec.regions:
        rows = slice(region.row0, region.row0 + region.height)
        cols = slice(region.col0, region.col0 + region.width)
        codes[rows, cols] = region.sa_code
        if region.sa_code == INVALID_CODE:
            continue
        for c in range(len(CHANNELS)):
            data[c, rows, cols] = fields[region.sa_code, c][rows, cols]
    if spec.looks is not None:
        for c in range(len(CHANNELS)):
            rng = np.random.default_rng([spec.seed, 1000 + c])
            speckle = rng.gamma(spec.looks, 1.0 / spec.looks, size=(h, w))
            data[c] = db_from_linear(linear_from_db(data[c]) * speckle)
    scene = SceneRaster(spec.scene_id, w, h, data.astype(np.float32), spec.pixel_spacing_m)
    return scene, LabelRaster(w, h, codes)


@dataclass(frozen=True)
class GeneratorConfig:
    scene_size: int = 256
    class_codes: tuple[int, ...] = DEFAULT_CLASS_CODES
    class_shares: tuple[float, ...] = (0.24, 0.14, 0.20, 0.28, 0.02, 0.12)
    land_share: float = 0.0
    min_floe_px: int = 16
    max_floe_px: int = 64
    pixel_spacing_m: float = DEFAULT_PIXEL_SPACING_M
    looks: int | None = None
    textures: Mapping[int, ClassTexture] = field(default_factory=lambda: dict(DEFAULT_TEXTURES))

    def __post_init__(self):
        if len(self.class_codes) != len(self.class_shares):
            raise SpecError(f"{len(self.class_codes)} class codes but {len(self.class_shares)} shares")
        if any(s < 0 for s in self.class_shares) or sum(self.class_shares) <= 0:
            raise SpecError(f"class shares must be non-negative with a positive sum, got {self.class_shares}")
        if not 0 <= self.land_share < 1:
            raise SpecError(f"land_share must lie in [0, 1), got {self.land_share}")
        if self.min_floe_px < 1 or self.max_floe_px < 2 * self.min_floe_px:
            raise SpecError(f"need 1 <= min_floe_px and max_floe_px >= 2 * min_floe_px ({self.min_floe_px}, {self.max_floe_px})")
        if self.scene_size < self.min_floe_px:
            raise SpecError(f"scene_size {self.scene_size} smaller than min_floe_px {self.min_floe_px}")

    @classmethod
    def from_dict(cls, values: Mapping) -> "GeneratorConfig":
        values = dict(values)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown generator settings: {sorted(unknown)}")
        if "textures" in values:
            values["textures"] = {int(code): ClassTexture(**t) for code, t in values["textures"].items()}
        for key in ("class_codes", "class_shares"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


def partition_floes(rng: np.random.Generator, height: int, width: int, min_px: int, max_px: int) -> list[tuple[int, int, int, int]]:
    """Tile a rectangle with non-overlapping floes by seeded recursive bisection."""
    floes = []
    stack = [(0, 0, height, width)]
    while stack:
        r0, c0, h, w = stack.pop()
        can_split_rows, can_split_cols = h >= 2 * min_px, w >= 2 * min_px
        small_enough = h <= max_px and w <= max_px
        if not (can_split_rows or can_split_cols) or (small_enough and rng.random() < 0.35):
            floes.append((r0, c0, h, w))
            continue
        split_rows = can_split_rows and (h >= w or not can_split_cols)
        length = h if split_rows else w
        cut = int(rng.integers(min_px, length - min_px + 1))
        if split_rows:
            stack += [(r0, c0, cut, w), (r0 + cut, c0, h - cut, w)]
        else:
            stack += [(r0, c0, h, cut), (r0, c0 + cut, h, w - cut)]
    return sorted(floes)


def assign_floe_codes(
    floes: Sequence[tuple[int, int, int, int, int]],
    codes: Sequence[int],
    shares: Sequence[float],
    rng: np.random.Generator,
) -> list[int]:
    """Give each floe a code so the total area per code tracks its share.

    Floes are (scene index, r0, c0, h, w); they are visited in seeded random
    order and each goes to the code with the largest remaining area deficit.
    """
    shares = np.asarray(shares, dtype=np.float64) / float(np.sum(shares))
    target = shares * sum(f[3] * f[4] for f in floes)
    assigned = np.zeros(len(codes))
    result = [INVALID_CODE] * len(floes)
    for i in rng.permutation(len(floes)):
        area = floes[i][3] * floes[i][4]
        choice = int(np.argmax(target - assigned))
        assigned[choice] += area
        result[i] = codes[choice]
    return result


def generate_synthetic_corpus(config: GeneratorConfig, num_scenes: int, seed: int) -> list[tuple[SceneRaster, LabelRaster]]:
    """Deterministic corpus of square scenes whose class areas follow the configured shares."""
    if num_scenes < 1:
        raise SpecError(f"number of scenes must be >= 1, got {num_scenes}")
    rng = np.random.default_rng(seed)
    size = config.scene_size
    floes = []
    for s in range(num_scenes):
        for r0, c0, h, w in partition_floes(rng, size, size, config.min_floe_px, config.max_floe_px):
            floes.append((s, r0, c0, h, w))
    codes = list(config.class_codes)
    shares = list(config.class_shares)
    if config.land_share > 0:
        scale = (1 - config.land_share) / sum(shares)
        shares = [s * scale for s in shares] + [config.land_share]
        codes.append(INVALID_CODE)
    assignment = assign_floe_codes(floes, codes, shares, rng)
    per_scene: dict[int, list[Region]] = defaultdict(list)
    for index, (s, r0, c0, h, w) in enumerate(floes):
        per_scene[s].append(Region(r0, c0, h, w, assignment[index]))

    corpus = []
    for s in tqdm(range(num_scenes), desc="scenes", disable=not logger.isEnabledFor(logging.INFO)):
        scene_seed = int(np.random.SeedSequence([seed, s]).generate_state(1)[0])
        spec = SceneSpec(
            scene_id=f"scene_{s:03d}",
            width=size,
            height=size,
            regions=tuple(per_scene[s]),
            seed=scene_seed,
            textures=config.textures,
            pixel_spacing_m=config.pixel_spacing_m,
            looks=config.looks,
        )
        corpus.append(generate_synthetic_scene(spec))
        logger.debug("generated %s with %d floes", spec.scene_id, len(spec.regions))
    return corpus


# Tiling


@dataclass(frozen=True, order=True)
class PatchRecord:
    scene_id: str
    row0: int
    col0: int
    patch_size: int
    class_index: int
    purity: float
    block_id: tuple[str, int, int]

    @property
    def block_key(self) -> str:
        return f"{self.block_id[0]}:{self.block_id[1]}:{self.block_id[2]}"

    def with_block_size(self, block_size: int) -> "PatchRecord":
        return replace(self, block_id=block_id_for(self.scene_id, self.row0, self.col0, self.patch_size, block_size))


def block_id_for(scene_id: str, row0: int, col0: int, patch_size: int, block_size: int) -> tuple[str, int, int]:
    span = block_size * patch_size
    return scene_id, row0 // span, col0 // span


def tile_scene(
    scene: SceneRaster,
    labels: LabelRaster,
    taxonomy: ClassTaxonomy,
    patch_size: int,
    purity_threshold: float = 0.7,
    block_size: int = 4,
    min_valid_fraction: float = 0.5,
) -> list[PatchRecord]:
    """Stride-P patches labelled by their majority valid class, filtered by purity."""
    validate_pair(scene, labels)
    p = patch_size
    if p < 1 or p > min(scene.width, scene.height):
        raise InputError(f"patch size {p} does not fit scene {scene.scene_id!r} ({scene.width}x{scene.height})")
    if not 0 < purity_threshold <= 1:
        raise ParameterError(f"purity threshold must lie in (0, 1], got {purity_threshold}")
    if block_size < 1:
        raise ParameterError(f"block size must be >= 1, got {block_size}")

    nr, nc = scene.height // p, scene.width // p
    classes = taxonomy.lookup[labels.codes[: nr * p, : nc * p]].reshape(nr, p, nc, p)
    counts = np.stack([(classes == k).sum(axis=(1, 3)) for k in range(taxonomy.num_classes)], axis=-1)
    n_valid = counts.sum(axis=-1)
    has_nan = np.isnan(scene.data[:, : nr * p, : nc * p]).reshape(len(CHANNELS), nr, p, nc, p).any(axis=(0, 2, 4))
    majority = counts.argmax(axis=-1)
    purity = np.where(n_valid > 0, counts.max(axis=-1) / np.maximum(n_valid, 1), 0.0)
    keep = (~has_nan) & (n_valid > 0) & (n_valid >= min_valid_fraction * p * p) & (purity >= purity_threshold)

    records = []
    for i, j in zip(*np.nonzero(keep)):
        row0, col0 = int(i) * p, int(j) * p
        records.append(
            PatchRecord(
                scene.scene_id,
                row0,
                col0,
                p,
                int(majority[i, j]),
                float(purity[i, j]),
                block_id_for(scene.scene_id, row0, col0, p, block_size),
            )
        )
    logger.debug(
        "%s: kept %d of %d patches (%.0f m footprint)",
        scene.scene_id,
        len(records),
        nr * nc,
        patch_footprint_m(p, scene.pixel_spacing_m),
    )
    return records


def tile_directory(
    directory: str | Path,
    taxonomy: ClassTaxonomy,
    patch_size: int,
    purity_threshold: float = 0.7,
    block_size: int = 4,
    workers: int = 1,
) -> list[PatchRecord]:
    """Tile every scene/label pair in a directory; results are merged in scene-id order."""
    scene_ids = list_scene_ids(directory)
    if not scene_ids:
        raise InputError(f"no {SCENE_SUFFIX} files in {directory}")

    def tile_one(scene_id: str) -> list[PatchRecord]:
        scene, labels = read_pair(*scene_paths(directory, scene_id))
        if scene.scene_id != scene_id:
            raise FormatError(f"{scene_id}{SCENE_SUFFIX} holds scene {scene.scene_id!r}")
        return tile_scene(scene, labels, taxonomy, patch_size, purity_threshold, block_size)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_scene = list(tqdm(pool.map(tile_one, scene_ids), total=len(scene_ids), desc="tiling", disable=not logger.isEnabledFor(logging.INFO)))
    records = [r for chunk in per_scene for r in chunk]
    logger.info("tiled %d scenes into %d patches", len(scene_ids), len(records))
    return records


# Splitting


SPLITS = ("train", "val")


@dataclass
class SplitManifest:
    entries: list[tuple[PatchRecord, str]]
    ratio: float | None = None
    seed: int | None = None
    block_size: int | None = None
    divergence: float = 0.0
    tolerance: float | None = None
    warnings: tuple[str, ...] = ()

    def records(self, split: str) -> list[PatchRecord]:
        return [r for r, s in self.entries if s == split]

    def block_ids(self, split: str) -> set[tuple[str, int, int]]:
        return {r.block_id for r, s in self.entries if s == split}

    def class_counts(self, split: str, num_classes: int) -> np.ndarray:
        classes = [r.class_index for r, s in self.entries if s == split]
        return np.bincount(np.asarray(classes, dtype=np.int64), minlength=num_classes)[:num_classes]

    def summary(self, num_classes: int) -> dict:
        out = {"divergence": round(self.divergence, 6)}
        for split in SPLITS:
            counts = self.class_counts(split, num_classes)
            out[split] = {
                "patches": int(counts.sum()),
                "blocks": len(self.block_ids(split)),
                "class_proportions": [round(float(p), 6) for p in proportions(counts)],
            }
        return out


def _split_cost(train: np.ndarray, val: np.ndarray, ratio: float) -> float:
    n_train, n_val = train.sum(), val.sum()
    return l1_distance(proportions(train), proportions(val)) + abs(n_train / (n_train + n_val) - ratio)


def stratified_block_split(
    records: Sequence[PatchRecord],
    ratio: float = 0.8,
    block_size: int = 4,
    seed: int = 0,
    tolerance: float = 0.02,
    num_classes: int | None = None,
) -> SplitManifest:
    """Assign whole blocks to train/val, keeping class proportions aligned.

    Blocks are visited largest first (a seeded shuffle orders equal sizes) and
    each goes to the split that minimises the L1 distance between the two
    splits' class proportions plus the deviation of the train fraction from
    ``ratio``. Raises StratificationError when the achieved distance exceeds
    ``tolerance``.
    """
    if not records:
        raise InputError("cannot split an empty record list")
    if not 0 < ratio < 1:
        raise ParameterError(f"split ratio must lie in (0, 1), got {ratio}")
    if block_size < 1:
        raise ParameterError(f"block size must be >= 1, got {block_size}")
    if tolerance < 0:
        raise ParameterError(f"tolerance must be non-negative, got {tolerance}")
    k = num_classes or (max(r.class_index for r in records) + 1)

    ordered = [r.with_block_size(block_size) for r in sorted(records)]
    blocks: dict[tuple[str, int, int], list[PatchRecord]] = defaultdict(list)
    for record in ordered:
        blocks[record.block_id].append(record)
    keys = sorted(blocks)
    hist = {key: np.bincount([r.class_index for r in blocks[key]], minlength=k)[:k] for key in keys}

    warnings = []
    blocks_per_class = sum((hist[key] > 0).astype(int) for key in keys)
    for c in np.flatnonzero((blocks_per_class > 0) & (blocks_per_class < 2)):
        message = f"class {int(c)} occurs in only {int(blocks_per_class[c])} block; perfect stratification impossible"
        logger.warning(message)
        warnings.append(message)

    rng = np.random.default_rng(seed)
    order = [keys[i] for i in rng.permutation(len(keys))]
    order.sort(key=lambda key: -len(blocks[key]))

    train, val = np.zeros(k), np.zeros(k)
    assignment: dict[tuple[str, int, int], str] = {}
    for key in order:
        h = hist[key]
        to_train = _split_cost(train + h, val, ratio)
        to_val = _split_cost(train, val + h, ratio)
        assigned = train.sum() + val.sum()
        below_target = assigned == 0 or train.sum() / assigned < ratio
        if to_train < to_val or (to_train == to_val and below_target):
            train += h
            assignment[key] = "train"
        else:
            val += h
            assignment[key] = "val"
        logger.debug("block %s (%d patches) -> %s", key, len(blocks[key]), assignment[key])

    divergence = l1_distance(proportions(train), proportions(val))
    entries = [(r, assignment[r.block_id]) for r in ordered]
    manifest = SplitManifest(entries, ratio, seed, block_size, divergence, tolerance, tuple(warnings))
    logger.info(
        "split %d blocks: %d train / %d val patches, divergence %.4f",
        len(keys),
        int(train.sum()),
        int(val.sum()),
        divergence,
    )
    if divergence > tolerance:
        raise StratificationError(
            f"class-distribution divergence {divergence:.4f} exceeds tolerance {tolerance:.4f}", divergence
        )
    return manifest


# Manifest CSV


def _record_row(record: PatchRecord, split: str) -> list[str]:
    return [
        record.scene_id,
        str(record.row0),
        str(record.col0),
        str(record.patch_size),
        str(record.class_index),
        f"{record.purity:.6f}",
        record.block_key,
        split,
    ]


def manifest_text(entries: Iterable[tuple[PatchRecord, str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for record, split in entries:
        writer.writerow(_record_row(record, split))
    return buffer.getvalue()


def write_manifest(path: str | Path, entries: SplitManifest | Iterable[PatchRecord | tuple[PatchRecord, str]]) -> Path:
    """Write records (split column empty) or split entries to the manifest CSV."""
    if isinstance(entries, SplitManifest):
        rows = entries.entries
    else:
        rows = [e if isinstance(e, tuple) else (e, "") for e in entries]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_text(rows), encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> SplitManifest:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: header {header} != {MANIFEST_HEADER}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} columns, got {len(row)}")
            scene_id, row0, col0, size, class_index, purity, block_key, split = row
            if split not in ("",) + SPLITS:
                raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                block_scene, block_row, block_col = block_key.rsplit(":", 2)
                record = PatchRecord(
                    scene_id, int(row0), int(col0), int(size), int(class_index), float(purity),
                    (block_scene, int(block_row), int(block_col)),
                )
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed row {row}") from None
            entries.append((record, split))
    manifest = SplitManifest(entries)
    if any(s for _, s in entries):
        k = max((r.class_index for r, _ in entries), default=0) + 1
        manifest.divergence = l1_distance(
            proportions(manifest.class_counts("train", k)), proportions(manifest.class_counts("val", k))
        )
    return manifest


def manifest_hash(records: Iterable[PatchRecord]) -> str:
    """SHA-256 over the canonical rows of the given records."""
    digest = hashlib.sha256()
    for record in sorted(records):
        digest.update((",".join(_record_row(record, "")) + "\n").encode("utf-8"))
    return digest.hexdigest()


# Normalisation


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    count: int
    source_split: str = "train"
    manifest_hash: str = ""

    def __post_init__(self):
        if self.count <= 0:
            raise InputError("normalisation stats need a positive pixel count")
        if any(s < STD_FLOOR for s in self.std):
            raise InputError(f"standard deviations must be >= {STD_FLOOR}, got {self.std}")

    def to_dict(self) -> dict:
        return {
            "channels": [{"mean": m, "std": s} for m, s in zip(self.mean, self.std)],
            "count": self.count,
            "source_split": self.source_split,
            "manifest_hash": self.manifest_hash,
        }


def compute_norm_stats(
    manifest: SplitManifest, scenes: Mapping[str, SceneRaster], split: str = "train"
) -> NormalizationStats:
    """Per-channel population mean/std over train-split patch pixels, merged patch by patch."""
    if split != "train":
        raise InputError(f"normalisation stats come from the train split only, not {split!r}")
    records = sorted(manifest.records("train"))
    if not records:
        raise InputError("manifest has no train patches")
    channels = len(CHANNELS)
    count = 0
    mean = np.zeros(channels)
    m2 = np.zeros(channels)
    for record in records:
        p = record.patch_size
        pixels = scenes[record.scene_id].data[:, record.row0 : record.row0 + p, record.col0 : record.col0 + p]
        pixels = pixels.reshape(channels, -1).astype(np.float64)
        n_b = pixels.shape[1]
        mean_b = pixels.mean(axis=1)
        m2_b = ((pixels - mean_b[:, None]) ** 2).sum(axis=1)
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta**2 * (count * n_b / total)
        count = total
    std = np.maximum(np.sqrt(m2 / count), STD_FLOOR)
    stats = NormalizationStats(
        tuple(float(m) for m in mean), tuple(float(s) for s in std), count, "train", manifest_hash(records)
    )
    logger.info("normalisation stats over %d pixels: mean %s, std %s", count, stats.mean, stats.std)
    return stats


def normalize_patch(pixels: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """(x - mean) / std per channel; channel axis is -3 (C x H x W or N x C x H x W)."""
    mean = np.asarray(stats.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float64)[:, None, None]
    return ((np.asarray(pixels, dtype=np.float64) - mean) / std).astype(np.float32)


def denormalize_patch(pixels: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float64)[:, None, None]
    return (np.asarray(pixels, dtype=np.float64) * std + mean).astype(np.float32)


def write_stats(stats: NormalizationStats, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_stats(path: str | Path) -> NormalizationStats:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return NormalizationStats(
            mean=tuple(float(c["mean"]) for c in raw["channels"]),
            std=tuple(float(c["std"]) for c in raw["channels"]),
            count=int(raw["count"]),
            source_split=raw["source_split"],
            manifest_hash=raw.get("manifest_hash", ""),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed stats file ({exc})") from None


def extract_patches(
    records: Sequence[PatchRecord],
    scenes: Mapping[str, SceneRaster],
    stats: NormalizationStats | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Re-slice patch pixels (N x 2 x P x P) and class indices from their scenes."""
    if not records:
        raise InputError("no patches to extract")
    sizes = {r.patch_size for r in records}
    if len(sizes) != 1:
        raise InputError(f"records mix patch sizes {sorted(sizes)}")
    p = sizes.pop()
    images = np.empty((len(records), len(CHANNELS), p, p), dtype=np.float32)
    for i, r in enumerate(records):
        images[i] = scenes[r.scene_id].data[:, r.row0 : r.row0 + p, r.col0 : r.col0 + p]
    if stats is not None:
        images = normalize_patch(images, stats)
    labels = np.asarray([r.class_index for r in records], dtype=np.int64)
    return images, labels
