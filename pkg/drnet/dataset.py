"""Manifests, class-balanced splits and synthetic fixtures.

A manifest is a CSV file with header ``path,label`` and one image per row,
labels being DR stages 0 (no DR) to 4 (proliferative DR).
"""
import csv
import logging
import os
from collections import Counter
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from PIL import Image

from drnet.errors import (DuplicatePathError, InsufficientPopulation, InvalidArgument, LabelRangeError,
                          ManifestError)

log = logging.getLogger(__name__)

NUM_CLASSES = 5
HEADER = ['path', 'label']


@dataclass(frozen=True)
class Manifest:
    """Labelled image records.

    Args:
        records (tuple): (path, label) pairs with unique paths and labels in 0-4
        provenance (string): Free-text origin note
    """
    records: Tuple[Tuple[str, int], ...] = ()
    provenance: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'records', tuple((str(p), int(l)) for p, l in self.records))
        seen = set()
        for path, label in self.records:
            if not 0 <= label < NUM_CLASSES:
                raise LabelRangeError(f'Label {label} of {path!r} is outside 0-{NUM_CLASSES - 1}.')
            if path in seen:
                raise DuplicatePathError(f'Duplicate path {path!r}.')
            seen.add(path)

    def __len__(self):
        return len(self.records)

    @property
    def paths(self):
        return [path for path, _ in self.records]

    @property
    def labels(self):
        return np.array([label for _, label in self.records], dtype=np.int64)

    def counts(self):
        """Number of records per class, as a list of length 5."""
        counter = Counter(label for _, label in self.records)
        return [counter.get(c, 0) for c in range(NUM_CLASSES)]


@dataclass(frozen=True)
class SplitSpec:
    """Per-class split sizes.

    Args:
        train (int): Training images per class. Defaults to 1600.
        val (int): Validation images per class. Defaults to 119.
        test (int): Test images per class. Defaults to 191.
        seed (int): Shuffle seed. Defaults to 0.
    """
    train: int = 1600
    val: int = 119
    test: int = 191
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise InvalidArgument('Split counts must be non-negative.')

    @property
    def per_class(self):
        return self.train + self.val + self.test


def _parse_label(raw, line):
    try:
        label = int(raw)
    except (TypeError, ValueError):
        raise ManifestError(f'label {raw!r} is not an integer.', line)
    if not 0 <= label < NUM_CLASSES:
        raise LabelRangeError(f'label {label} is outside 0-{NUM_CLASSES - 1}.', line)
    return label


def load_manifest(path):
    """Reads a ``path,label`` CSV manifest.

    Relative image paths are kept as written.

    Args:
        path (string): Manifest file

    Returns:
        Manifest: The parsed records
    """
    records: List[Tuple[str, int]] = []
    seen = {}
    with open(path, newline='', encoding='utf-8') as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise ManifestError(f'{path}: expected the header "path,label".', 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2 or not row[0].strip():
                raise ManifestError(f'expected "path,label", got {row!r}.', line)
            image_path, label = row[0].strip(), _parse_label(row[1].strip(), line)
            if image_path in seen:
                raise DuplicatePathError(f'path {image_path!r} already listed on line '
                                         f'{seen[image_path]}.', line)
            seen[image_path] = line
            records.append((image_path, label))
    manifest = Manifest(tuple(records), provenance=os.fspath(path))
    if not records:
        log.warning('Manifest %s has no records', path)
    else:
        log.info('Manifest %s: %d images, per class %s', path, len(records), manifest.counts())
    return manifest


def write_manifest(manifest, path):
    """Writes a manifest as ``path,label`` CSV."""
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(HEADER)
        writer.writerows(manifest.records)


def load_exclusions(path):
    """Reads an exclusion list: one image path per line, ``#`` starts a comment."""
    with open(path, encoding='utf-8') as handle:
        lines = (line.split('#', 1)[0].strip() for line in handle)
        return {line for line in lines if line}


def apply_exclusions(manifest, excluded):
    """Drops the records whose path is in ``excluded``."""
    excluded = set(excluded)
    kept = tuple(record for record in manifest.records if record[0] not in excluded)
    log.info('Excluded %d of %d images', len(manifest) - len(kept), len(manifest))
    return Manifest(kept, manifest.provenance)


def balanced_split(manifest, spec=SplitSpec()):
    """Draws the same number of images per class into train/val/test.

    Each class is shuffled with its own seeded stream, then the first
    ``train`` images go to training, the next ``val`` to validation and the
    next ``test`` to testing.

    Args:
        manifest (Manifest): Source records
        spec (SplitSpec): Per-class counts and seed

    Returns:
        tuple: (train, val, test) manifests
    """
    by_class = [[] for _ in range(NUM_CLASSES)]
    for record in manifest.records:
        by_class[record[1]].append(record)
    for label, records in enumerate(by_class):
        if len(records) < spec.per_class:
            raise InsufficientPopulation(label, spec.per_class - len(records))
    parts = ([], [], [])
    bounds = (0, spec.train, spec.train + spec.val, spec.per_class)
    for label, records in enumerate(by_class):
        order = np.random.default_rng([spec.seed, label]).permutation(len(records))
        chosen = [records[i] for i in order[:spec.per_class]]
        for part, start, stop in zip(parts, bounds, bounds[1:]):
            part.extend(chosen[start:stop])
    note = f'{manifest.provenance} split seed={spec.seed}'
    return tuple(Manifest(tuple(part), note) for part in parts)


def class_weights(manifest):
    """Fraction of records per class.

    Args:
        manifest (Manifest): Nonempty manifest

    Returns:
        ndarray: Five fractions summing to 1
    """
    if len(manifest) == 0:
        raise InvalidArgument('Class weights need a nonempty manifest.')
    counts = np.array(manifest.counts(), dtype=np.float64)
    return counts / counts.sum()


# Synthetic fixtures. The images are fundus-like drawings for tests, not clinical data.

def synthesize_fundus(label, side=256, rng=None):
    """Draws a fundus-like RGB image whose lesion load grows with ``label``.

    A reddish disc on black with a bright optic disc; stage ``k`` adds dark-red
    dots (hemorrhages) and, from stage 2, yellowish spots (exudates).

    Args:
        label (int): DR stage 0-4
        side (int): Image side. Defaults to 256.
        rng (numpy.random.Generator): Random stream. Defaults to a fresh seeded one.

    Returns:
        ndarray: uint8 image of shape (side, side, 3)
    """
    if not 0 <= label < NUM_CLASSES:
        raise InvalidArgument(f'Label {label} is outside 0-{NUM_CLASSES - 1}.')
    if side < 8:
        raise InvalidArgument('Synthetic images need a side of at least 8.')
    rng = rng if rng is not None else np.random.default_rng(label)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2
    r = np.hypot(yy - c, xx - c) / (side / 2)
    img = np.zeros((side, side, 3), dtype=np.float64)
    disc = r < 0.95
    shade = 1 - 0.45 * r ** 2
    img[disc] = np.stack([170 * shade, 70 * shade, 30 * shade], axis=-1)[disc]
    img[disc] += rng.normal(0, 4, size=(int(disc.sum()), 3))

    def spot(cy, cx, radius, color):
        mask = np.hypot(yy - cy, xx - cx) < radius
        img[mask & disc] = color

    angle = rng.uniform(0, 2 * np.pi)
    spot(c + 0.45 * c * np.sin(angle), c + 0.45 * c * np.cos(angle), side * 0.08, (250, 220, 160))
    for _ in range(int(label * 4 + rng.integers(0, 2))):
        rad, ang = rng.uniform(0, 0.8) * c, rng.uniform(0, 2 * np.pi)
        spot(c + rad * np.sin(ang), c + rad * np.cos(ang), side * rng.uniform(0.015, 0.035), (90, 15, 10))
    for _ in range(max(0, label - 1) * 3):
        rad, ang = rng.uniform(0, 0.8) * c, rng.uniform(0, 2 * np.pi)
        spot(c + rad * np.sin(ang), c + rad * np.cos(ang), side * rng.uniform(0.02, 0.04), (230, 200, 60))
    return np.clip(img, 0, 255).astype(np.uint8)


def write_synthetic_dataset(out_dir, per_class=10, side=256, seed=0):
    """Writes ``per_class`` synthetic PNGs per stage plus ``manifest.csv``.

    Args:
        out_dir (string): Target directory, created if missing
        per_class (int): Images per class. Defaults to 10.
        side (int): Image side. Defaults to 256.
        seed (int): Seed. Defaults to 0.

    Returns:
        Manifest: The written manifest, paths relative to ``out_dir``
    """
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for label in range(NUM_CLASSES):
        for index in range(per_class):
            rng = np.random.default_rng([seed, label, index])
            name = f'synth_{label}_{index:04d}.png'
            Image.fromarray(synthesize_fundus(label, side, rng)).save(os.path.join(out_dir, name))
            records.append((name, label))
    manifest = Manifest(tuple(records), provenance=f'synthetic seed={seed} (non-clinical)')
    write_manifest(manifest, os.path.join(out_dir, 'manifest.csv'))
    return manifest
