# jointdiff/data/synthdata.py
"""Synthetic phantoms with a known joint law of (image, age, sex).

Each image is a centred disk whose radius grows affinely with age, plus an
intensity offset on one vertical strip selected by sex. Age and sex are
drawn independently, so the oracles below give ground-truth conditionals.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from jointdiff.errors import DatasetFormatError
from jointdiff.model.joint import PatientRecord

logger = logging.getLogger(__name__)

MAGIC = b"JDDS"
FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")
UNASSIGNED = 255
DEFAULT_FRACTIONS = (0.89, 0.01, 0.10)


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    side: int = Field(16, ge=2)
    age_range: Tuple[float, float] = (20.0, 90.0)
    r_min: float = Field(2.0, gt=0.0)
    r_max: float = Field(6.0, gt=0.0)
    amplitude: float = Field(0.4, ge=0.0)
    noise_sigma: float = Field(0.05, ge=0.0)
    foreground: float = 0.8
    background: float = -0.8
    n_categories: int = Field(2, ge=2)
    seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self) -> "GeneratorConfig":
        lo, hi = self.age_range
        if not lo < hi:
            raise ValueError(f"age_range needs lo < hi, got {self.age_range}")
        if not self.r_min < self.r_max:
            raise ValueError(f"r_min {self.r_min} must be below r_max {self.r_max}")
        if self.r_max >= self.side / 2:
            raise ValueError(f"r_max {self.r_max} must be below side/2 = {self.side / 2}")
        if not -1.0 <= self.background < self.foreground <= 1.0:
            raise ValueError("Intensities need -1 <= background < foreground <= 1")
        if self.background + self.amplitude >= self.foreground:
            raise ValueError("Asymmetry offset must keep the background below the foreground")
        if self.n_categories > self.side:
            raise ValueError(f"{self.n_categories} strips do not fit in {self.side} columns")
        return self

    @property
    def threshold(self) -> float:
        """Intensity separating offset background from foreground."""
        return (self.foreground + self.background + self.amplitude) / 2.0


def radius_for_age(age, cfg: GeneratorConfig) -> np.ndarray:
    lo, hi = cfg.age_range
    return cfg.r_min + (np.asarray(age, dtype=np.float64) - lo) / (hi - lo) * (cfg.r_max - cfg.r_min)


def age_for_radius(radius, cfg: GeneratorConfig) -> np.ndarray:
    lo, hi = cfg.age_range
    return lo + (np.asarray(radius, dtype=np.float64) - cfg.r_min) / (cfg.r_max - cfg.r_min) * (hi - lo)


def _strips(cfg: GeneratorConfig) -> List[np.ndarray]:
    return np.array_split(np.arange(cfg.side), cfg.n_categories)


def render(age: float, sex: int, cfg: GeneratorConfig, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Phantom for one subject, clamped to [-1, 1]."""
    if not 0 <= sex < cfg.n_categories:
        raise ValueError(f"Sex must lie in [0, {cfg.n_categories}), got {sex}")
    centre = (cfg.side - 1) / 2.0
    rows, cols = np.indices((cfg.side, cfg.side))
    disk = (rows - centre) ** 2 + (cols - centre) ** 2 <= radius_for_age(age, cfg) ** 2

    image = np.where(disk, cfg.foreground, cfg.background)
    image[:, _strips(cfg)[sex]] += cfg.amplitude
    if noise is not None:
        image = image + noise
    return np.clip(image, -1.0, 1.0)


@dataclass
class Dataset:
    records: List[PatientRecord]
    subject_ids: np.ndarray
    splits: np.ndarray = None
    config: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        if self.splits is None:
            self.splits = np.full(len(self.records), UNASSIGNED, dtype=np.uint8)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        if len(self.subject_ids) != len(self.records) or len(self.splits) != len(self.records):
            raise ValueError("records, subject_ids and splits must have equal lengths")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, name: str) -> List[PatientRecord]:
        tag = SPLITS.index(name)
        return [r for r, s in zip(self.records, self.splits) if s == tag]

    def split_counts(self) -> Dict[str, int]:
        return {name: int(np.sum(self.splits == i)) for i, name in enumerate(SPLITS)}

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records])

    def save(self, path: Union[str, Path]) -> Path:
        return write_dataset(self, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        return read_dataset(path)


def generate_dataset(n_subjects: int, cfg: GeneratorConfig, seed: Optional[int] = None) -> Dataset:
    """Draw n_subjects independent phantoms; each subject gets its own seed."""
    if n_subjects < 1:
        raise ValueError(f"n_subjects must be at least 1, got {n_subjects}")
    seed = cfg.seed if seed is None else seed
    lo, hi = cfg.age_range
    records = []
    for child in np.random.SeedSequence(seed).spawn(n_subjects):
        rng = np.random.default_rng(child)
        sex = int(rng.integers(cfg.n_categories))
        age = float(rng.uniform(lo, hi))
        noise = rng.normal(0.0, cfg.noise_sigma, (cfg.side, cfg.side)) if cfg.noise_sigma > 0 else None
        records.append(PatientRecord(render(age, sex, cfg, noise), age, sex))
    logger.debug(f"Generated {n_subjects} phantoms (side {cfg.side}, seed {seed})")
    return Dataset(records, np.arange(n_subjects), config=cfg.model_copy(update={"seed": seed}))


def oracle_age(image: np.ndarray, cfg: GeneratorConfig) -> float:
    """Invert the radius map from the thresholded disk area."""
    count = int(np.sum(np.asarray(image) > cfg.threshold))
    if count == 0:
        raise ValueError("Image has no foreground pixels; cannot estimate the disk radius")
    radius = np.sqrt(count / np.pi)
    lo, hi = cfg.age_range
    return float(np.clip(age_for_radius(radius, cfg), lo, hi))


def oracle_sex(image: np.ndarray, cfg: GeneratorConfig) -> int:
    """Brightest strip wins; ties go to the lowest class."""
    image = np.asarray(image)
    means = [image[:, cols].mean() for cols in _strips(cfg)]
    return int(np.argmax(means))


def split(dataset: Dataset, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> Dataset:
    """Shuffle subjects and tag them train/val/test.

    Train and validation counts are round(n * fraction); test takes the rest.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"Need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"Split fractions must sum to 1, got {sum(fractions)}")

    subjects = np.unique(dataset.subject_ids)
    n = len(subjects)
    n_train = int(round(n * fractions[0]))
    n_val = min(int(round(n * fractions[1])), n - n_train)
    order = np.random.default_rng(seed).permutation(n)

    tag_of = {}
    for rank, idx in enumerate(order):
        tag_of[int(subjects[idx])] = 0 if rank < n_train else 1 if rank < n_train + n_val else 2
    splits = np.array([tag_of[int(s)] for s in dataset.subject_ids], dtype=np.uint8)
    return Dataset(dataset.records, dataset.subject_ids, splits, dataset.config)


class PopulationBaseline(NamedTuple):
    mean_age: float
    predict: Callable[[int], np.ndarray]

    def mae(self, targets: Sequence[float]) -> float:
        targets = np.asarray(targets, dtype=np.float64)
        return float(np.mean(np.abs(self.predict(len(targets)) - targets)))


def population_baseline(records: Sequence[PatientRecord]) -> PopulationBaseline:
    """Predict the training-set mean age for everyone."""
    if not records:
        raise ValueError("Population baseline needs a non-empty split")
    mean_age = float(np.mean([r.age for r in records]))
    return PopulationBaseline(mean_age, lambda n: np.full(n, mean_age))


# -- file format ---------------------------------------------------------------

def _record_dtype(side: int) -> np.dtype:
    return np.dtype([("id", "<u4"), ("split", "u1"), ("age", "<f8"), ("sex", "u1"), ("image", "<f4", (side, side))])


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    """JDDS layout: magic, u32 version, u32 header length, JSON header, packed records."""
    path = Path(path)
    side = dataset.config.side
    header = json.dumps({
        "generator": dataset.config.model_dump(mode="json"),
        "seed": dataset.config.seed,
        "n_records": len(dataset),
        "side": side,
    }, sort_keys=True).encode("utf-8")

    table = np.zeros(len(dataset), dtype=_record_dtype(side))
    table["id"] = dataset.subject_ids
    table["split"] = dataset.splits
    table["age"] = [r.age for r in dataset.records]
    table["sex"] = [r.sex for r in dataset.records]
    table["image"] = dataset.images()

    path.write_bytes(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + table.tobytes())
    logger.info(f"Wrote {len(dataset)} records to {path}")
    return path


def read_dataset(path: Union[str, Path]) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"{path} is not a dataset file: bad magic bytes")
    if len(blob) < 12:
        raise DatasetFormatError(f"{path} is truncated")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"Unsupported dataset version {version}; expected {FORMAT_VERSION}")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
        config = GeneratorConfig(**header["generator"])
        n = int(header["n_records"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise DatasetFormatError(f"Dataset header is malformed: {e}") from e

    dtype = _record_dtype(config.side)
    payload = blob[12 + header_len:]
    if len(payload) != n * dtype.itemsize:
        raise DatasetFormatError(f"Expected {n} records ({n * dtype.itemsize} bytes), found {len(payload)} bytes")
    table = np.frombuffer(payload, dtype=dtype)

    records = [PatientRecord(row["image"].astype(np.float64), float(row["age"]), int(row["sex"])) for row in table]
    return Dataset(records, table["id"].astype(np.int64), table["split"].copy(), config)
