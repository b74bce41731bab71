'''Labeled synthetic scatterer scenes.

Each class is a template layout of scatterers. A record draws one template,
rotates the layout about its centroid (an azimuth surrogate), jitters
positions and amplitudes and drops scatterers at random without going below
the template's minimum count.
'''
import dataclasses
import json
import logging
import math
import pathlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ValidationException
from .schema import DatasetRecord

logger = logging.getLogger(__name__)

MAX_CENTERS = 40

# index triples of the two cross arms; both pass through the shared center 0
CROSS_ARMS = ((1, 0, 2), (3, 0, 4))


@dataclass(frozen=True)
class ClassTemplate:
    '''
    Canonical scatterer layout of one class.

    Args:
        name (str): class name
        positions (tuple): base (x, y) per scatterer, meters
        amplitudes, alphas, lengths, gammas, phis (tuple): base ASC parameters per scatterer
        position_jitter (float): std of the Gaussian position noise, meters
        amplitude_jitter (float): std of the multiplicative log-normal amplitude noise
        dropout (float): probability of dropping each scatterer
        k_min, k_max (int): allowed scatterer counts per record
    '''
    name: str
    positions: Tuple[Tuple[float, float], ...]
    amplitudes: Tuple[float, ...]
    alphas: Tuple[float, ...]
    lengths: Tuple[float, ...]
    gammas: Tuple[float, ...]
    phis: Tuple[float, ...]
    position_jitter: float = 0.1
    amplitude_jitter: float = 0.1
    dropout: float = 0.1
    k_min: int = 2
    k_max: int = MAX_CENTERS

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple((float(x), float(y)) for x, y in self.positions))
        for name in ("amplitudes", "alphas", "lengths", "gammas", "phis"):
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != len(self.positions):
                raise ValidationException(
                    f"Template {self.name}: {name} has {len(values)} entries for {len(self.positions)} scatterers.")
            object.__setattr__(self, name, values)
        if self.k_min < 2 or self.k_max > MAX_CENTERS or self.k_min > self.k_max:
            raise ValidationException(
                f"Template {self.name}: need 2 <= k_min <= k_max <= {MAX_CENTERS}, got [{self.k_min}, {self.k_max}].")
        if not self.k_min <= len(self.positions) <= self.k_max:
            raise ValidationException(
                f"Template {self.name}: {len(self.positions)} scatterers outside [{self.k_min}, {self.k_max}].")
        if not 0 <= self.dropout < 1:
            raise ValidationException(f"Template {self.name}: dropout must lie in [0, 1).")
        if self.position_jitter < 0 or self.amplitude_jitter < 0:
            raise ValidationException(f"Template {self.name}: jitter must be non-negative.")
        if any(a < 0 for a in self.amplitudes) or any(length < 0 for length in self.lengths):
            raise ValidationException(f"Template {self.name}: amplitudes and lengths must be non-negative.")

    @property
    def size(self) -> int:
        return len(self.positions)


def builtin_templates() -> List[ClassTemplate]:
    '''The three built-in classes: line, rectangle and cross.'''
    line = ClassTemplate(
        name="line",
        positions=((-2.0, 0.0), (-1.0, 0.0), (0.0, 0.0), (1.0, 0.0), (2.0, 0.0)),
        amplitudes=(1.0, 0.6, 0.8, 0.6, 1.0),
        alphas=(1.0, 0.5, 0.5, 0.5, 1.0),
        lengths=(0.0, 0.0, 0.5, 0.0, 0.0),
        gammas=(0.0,) * 5,
        phis=(0.0,) * 5,
        k_min=4, k_max=5)
    rectangle = ClassTemplate(
        name="rectangle",
        positions=((-2.0, -1.0), (2.0, -1.0), (2.0, 1.0), (-2.0, 1.0), (0.0, -1.0), (0.0, 1.0)),
        amplitudes=(1.0, 1.0, 1.0, 1.0, 0.5, 0.5),
        alphas=(0.0, 0.0, 0.0, 0.0, -0.5, -0.5),
        lengths=(0.0, 0.0, 0.0, 0.0, 1.0, 1.0),
        gammas=(0.0,) * 6,
        phis=(0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        k_min=4, k_max=6)
    cross = ClassTemplate(
        name="cross",
        positions=((0.0, 0.0), (-1.5, 0.0), (1.5, 0.0), (0.0, -1.5), (0.0, 1.5)),
        amplitudes=(1.2, 0.7, 0.7, 0.7, 0.7),
        alphas=(-1.0, 0.5, 0.5, 0.0, 0.0),
        lengths=(0.0, 0.3, 0.3, 0.3, 0.3),
        gammas=(0.0, 0.1, 0.1, -0.1, -0.1),
        phis=(0.0, 0.0, 0.0, math.pi / 2, math.pi / 2),
        k_min=4, k_max=5)
    return [line, rectangle, cross]


def template_to_dict(template: ClassTemplate) -> dict:
    values = dataclasses.asdict(template)
    values["positions"] = [list(p) for p in template.positions]
    return values


def load_templates(path: Union[str, pathlib.Path]) -> List[ClassTemplate]:
    '''Read a JSON list of template objects with the ClassTemplate field names.'''
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationException(f"{path}: invalid JSON ({e.msg}).")
    if not isinstance(raw, list):
        raise ValidationException(f"{path}: expected a JSON list of templates.")
    try:
        return [ClassTemplate(**entry) for entry in raw]
    except TypeError as e:
        raise ValidationException(f"{path}: {e}")


def _wrap_angle(angle: np.ndarray) -> np.ndarray:
    return np.mod(angle + math.pi, 2 * math.pi) - math.pi


def sample_record(template: ClassTemplate, label: int, rng: np.random.Generator,
                  rotation: Optional[float] = None) -> DatasetRecord:
    '''Draw one record from a template. rotation=None draws a uniform angle in [0, 2 pi).'''
    n = template.size
    keep = rng.random(n) >= template.dropout
    missing = template.k_min - int(keep.sum())
    if missing > 0:
        restore = rng.permutation(np.flatnonzero(~keep))[:missing]
        keep[restore] = True

    angle = rng.uniform(0.0, 2 * math.pi) if rotation is None else float(rotation)
    positions = np.asarray(template.positions)
    if angle != 0.0:
        centroid = positions.mean(axis=0)
        c, s = math.cos(angle), math.sin(angle)
        positions = (positions - centroid) @ np.array([[c, s], [-s, c]]) + centroid
    positions = positions + rng.normal(0.0, template.position_jitter, size=positions.shape)
    amplitudes = np.asarray(template.amplitudes) * np.exp(rng.normal(0.0, template.amplitude_jitter, size=n))
    phis = np.asarray(template.phis)
    if angle != 0.0:
        phis = _wrap_angle(phis + angle)

    centers = [[float(amplitudes[k]), template.alphas[k], template.lengths[k], float(phis[k]),
                template.gammas[k], float(positions[k, 0]), float(positions[k, 1])]
               for k in np.flatnonzero(keep)]
    return DatasetRecord(label=label, centers=centers)


def generate(templates: Sequence[ClassTemplate], per_class_count: int, seed: int = 0,
             rotate: bool = True, rotation: Optional[float] = None) -> List[DatasetRecord]:
    '''Generate per_class_count records for every template, class-major.

    Args:
        templates: at least two class templates; the label is the template position
        per_class_count (int): records per class
        seed (int): every record draws from its own substream of this seed
        rotate (bool): apply the random global rotation
        rotation (float, optional): fixed rotation angle instead of a random one

    Returns:
        list of DatasetRecord
    '''
    if len(templates) < 2:
        raise ValidationException(f"Need at least two templates, got {len(templates)}.")
    if per_class_count < 1:
        raise ValidationException(f"per_class_count must be at least 1, got {per_class_count}.")

    streams = np.random.SeedSequence(seed).spawn(len(templates) * per_class_count)
    fixed = rotation if rotate else 0.0
    records = []
    for label, template in enumerate(templates):
        for r in range(per_class_count):
            rng = np.random.default_rng(streams[label * per_class_count + r])
            records.append(sample_record(template, label, rng, fixed))
    logger.info("Generated %d records over %d classes (seed %d)", len(records), len(templates), seed)
    return records


def random_record(k: int, rng: np.random.Generator, class_count: int = 2,
                  alphas: Sequence[float] = (-1.0, -0.5, 0.0, 0.5, 1.0, 0.37)) -> DatasetRecord:
    '''A record of k scatterers with random parameters inside a 6 m square.

    alphas includes an off-codebook value so the unknown bucket is exercised.
    '''
    if not 2 <= k <= MAX_CENTERS:
        raise ValidationException(f"k must lie in [2, {MAX_CENTERS}], got {k}.")
    centers = [[float(rng.uniform(0.1, 2.0)), float(rng.choice(alphas)), float(rng.uniform(0.0, 1.0)),
                float(rng.uniform(-math.pi, math.pi)), float(rng.normal(0.0, 0.5)),
                float(rng.uniform(-3.0, 3.0)), float(rng.uniform(-3.0, 3.0))]
               for _ in range(k)]
    return DatasetRecord(label=int(rng.integers(class_count)), centers=centers)
