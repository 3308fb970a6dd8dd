"""Glyph corpus ingestion and split assignment.

Reads the A-Z handwritten-letters CSV layout (``label,p0,...,p783`` with
labels 0-25 and byte-valued pixels, row-major 28x28, ink stored high),
normalizes glyphs to ink-positive float images in [0, 1], derives binary
masks by intensity threshold, and partitions instances into disjoint
train/val/test pools.
"""

import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContentError, FormatError
from .rng import Rng, derive_seed

GLYPH_SIZE = 28
_N_FIELDS = 1 + GLYPH_SIZE * GLYPH_SIZE

SPLITS = ("train", "val", "test")
DEFAULT_CLASSES = (0, 1, 2, 3, 4)  # A..E


def binarize_mask(image, threshold):
    """Binary ink mask: 1 exactly where pixel >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    image = np.asarray(image)
    return (image >= threshold).astype(np.uint8)


@dataclass
class LetterInstance:
    class_id: int
    image: np.ndarray  # float32 (H, W), values in [0, 1], ink-positive
    mask: np.ndarray   # uint8 (H, W), binarize_mask(image, threshold)


@dataclass
class LetterCorpus:
    classes: tuple
    instances: dict            # class_id -> list[LetterInstance]
    split_assignment: dict = field(default_factory=dict)  # class_id -> list[str]
    threshold: float = 0.5

    def __post_init__(self):
        if not self.split_assignment:
            self.split_assignment = {
                c: ["train"] * len(v) for c, v in self.instances.items()
            }

    def counts(self):
        return {c: len(v) for c, v in self.instances.items()}

    def pool(self, split):
        """Per-class instance lists belonging to one split."""
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        return {
            c: [inst for inst, tag in zip(self.instances[c], self.split_assignment[c])
                if tag == split]
            for c in self.classes
        }

    def pool_sizes(self):
        return {
            split: {c: sum(1 for t in self.split_assignment[c] if t == split)
                    for c in self.classes}
            for split in SPLITS
        }


def _open_source(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb"), True
    return source, False


def parse_corpus_csv(source, class_set=DEFAULT_CLASSES, threshold=0.5):
    """Stream a label,pixel CSV into a LetterCorpus restricted to class_set.

    Records whose label falls outside class_set are skipped so the full
    A-Z file can be fed directly. A first line whose first field is not
    an integer is treated as a header and skipped; blank lines are
    ignored. Any malformed record raises FormatError naming its 1-based
    line; a requested class with no records raises ContentError.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    class_set = tuple(class_set)
    if len(set(class_set)) != len(class_set) or not class_set:
        raise ValueError("class_set must be a non-empty list of distinct ids")
    wanted = set(class_set)
    instances = {c: [] for c in class_set}

    stream, owned = _open_source(source)
    try:
        for lineno, raw in enumerate(stream, start=1):
            if isinstance(raw, bytes):
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise FormatError(f"undecodable bytes: {exc}", line=lineno) from None
            else:
                line = raw
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            first = fields[0].strip()
            if lineno == 1 and not _is_int(first):
                continue  # header row
            if len(fields) != _N_FIELDS:
                raise FormatError(
                    f"expected {_N_FIELDS} fields, got {len(fields)}", line=lineno)
            try:
                values = np.array(fields, dtype=np.int64)
            except ValueError:
                raise FormatError("non-integer field", line=lineno) from None
            label = int(values[0])
            if not 0 <= label <= 25:
                raise FormatError(f"label {label} outside [0, 25]", line=lineno)
            pixels = values[1:]
            if pixels.min() < 0 or pixels.max() > 255:
                raise FormatError("pixel value outside [0, 255]", line=lineno)
            if label not in wanted:
                continue
            image = (pixels.astype(np.float32) / 255.0).reshape(GLYPH_SIZE, GLYPH_SIZE)
            instances[label].append(
                LetterInstance(label, image, binarize_mask(image, threshold)))
    finally:
        if owned:
            stream.close()

    for c in class_set:
        if not instances[c]:
            raise ContentError(f"no records found for requested class {c}")
    return LetterCorpus(classes=class_set, instances=instances, threshold=threshold)


def _is_int(text):
    try:
        int(text)
        return True
    except ValueError:
        return False


def assign_splits(corpus, fractions, seed):
    """Partition every class's instances into train/val/test pools.

    Pool sizes follow the fractions by largest remainder (within one
    instance of exact proportion); membership is a seeded Fisher-Yates
    permutation per class, so the assignment is a pure function of
    (corpus order, fractions, seed). Pools are disjoint by construction,
    preventing any glyph from leaking across datasets.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    assignment = {}
    for c in corpus.classes:
        n = len(corpus.instances[c])
        counts = _largest_remainder(n, fractions)
        for s_idx, split in enumerate(SPLITS):
            if counts[s_idx] == 0 and fractions[s_idx] > 0 and n >= 3:
                raise ContentError(
                    f"class {c}: split {split!r} received no instances "
                    f"(n={n}, fractions={fractions})")
        order = list(range(n))
        Rng(derive_seed(seed, c)).shuffle(order)
        tags = [""] * n
        pos = 0
        for s_idx, split in enumerate(SPLITS):
            for k in range(counts[s_idx]):
                tags[order[pos + k]] = split
            pos += counts[s_idx]
        assignment[c] = tags

    return LetterCorpus(
        classes=corpus.classes,
        instances=corpus.instances,
        split_assignment=assignment,
        threshold=corpus.threshold,
    )


def _largest_remainder(n, fractions):
    quotas = [f * n for f in fractions]
    counts = [math.floor(q) for q in quotas]
    remainder = n - sum(counts)
    # ties broken by split order (train first)
    order = sorted(range(len(fractions)), key=lambda i: (counts[i] - quotas[i], i))
    for i in range(remainder):
        counts[order[i]] += 1
    return counts
