"""Synthetic four-modality tumor phantoms, preprocessing, augmentation, splits and the case file format.

Case file layout (integers little-endian uint32)::

    b"CUNS"
    id length, UTF-8 id
    height, width
    4 x height x width little-endian float32 image planes (FLAIR, T1, T1ce, T2)
    height x width uint8 labels
    height x width uint8 brain mask

A dataset directory holds one ``<id>.cuns`` file per case; a split dataset has
``train/``, ``val/`` and ``test/`` subdirectories.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FormatError

MODALITIES = ("flair", "t1", "t1ce", "t2")
MAGIC = b"CUNS"
SPLITS = ("train", "val", "test")

# Tissue intensity multipliers per label (background, NCR/NET, ED, ET) and modality.
_BASE = np.array([100.0, 120.0, 110.0, 90.0])
_CONTRAST = {
    1: np.array([1.5, 0.6, 0.6, 1.8]),
    2: np.array([1.9, 0.8, 1.0, 1.6]),
    4: np.array([1.6, 0.8, 2.2, 1.3]),
}


@dataclass
class VolumeSample:
    image: np.ndarray  # (4, h, w)
    labels: np.ndarray  # (h, w) uint8 over {0, 1, 2, 4}
    brain_mask: np.ndarray  # (h, w) bool
    id: str = ""

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[0] != len(MODALITIES):
            raise ContractViolation(f"image must be 4 x h x w, got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:] or self.brain_mask.shape != self.labels.shape:
            raise ContractViolation("image, labels and brain mask disagree in spatial shape")
        if not np.all(np.isin(self.labels, (0, 1, 2, 4))):
            raise ContractViolation("labels outside {0,1,2,4}")
        if np.any((self.labels != 0) & ~self.brain_mask):
            raise ContractViolation("tumor labels outside the brain mask")
        return self

    @property
    def has_tumor(self):
        return bool(np.any(self.labels))


def _ellipse(shape, center, radii, angle):
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (u / radii[1]) ** 2 + (v / radii[0]) ** 2 <= 1.0


def generate_phantom(rng, size=64, q_tumor=0.7, case_id=""):
    """One synthetic slice: elliptical brain, optionally a nested edema / core / enhancing-rim tumor.

    The core is an ellipse strictly inside the edema; its outer ring of
    ``max(1, size // 32)`` pixels is enhancing tumor (4), the rest necrosis (1).
    Background intensities are exactly 0 in all modalities.
    """
    shape = (size, size)
    mid = (size - 1) / 2
    brain = _ellipse(
        shape,
        (mid + rng.uniform(-0.03, 0.03) * size, mid + rng.uniform(-0.03, 0.03) * size),
        (rng.uniform(0.36, 0.44) * size, rng.uniform(0.32, 0.40) * size),
        rng.uniform(-0.3, 0.3),
    )
    labels = np.zeros(shape, dtype=np.uint8)
    if rng.random() < q_tumor:
        labels = _tumor(rng, brain, size)

    yy, xx = np.mgrid[:size, :size] / size - 0.5
    bias = 1.0 + rng.uniform(-0.1, 0.1) * xx + rng.uniform(-0.1, 0.1) * yy + rng.uniform(-0.1, 0.1) * xx * yy
    image = np.empty((4,) + shape)
    for m in range(4):
        tissue = np.full(shape, _BASE[m])
        for lab, gain in _CONTRAST.items():
            tissue[labels == lab] *= gain[m]
        noisy = tissue * bias + rng.normal(0.0, 4.0, shape)
        image[m] = np.where(brain, np.maximum(noisy, 1.0), 0.0)
    return VolumeSample(image.astype(np.float32), labels, brain, case_id)


def _tumor(rng, brain, size):
    shape = brain.shape
    for _ in range(100):
        r_ed = rng.uniform(0.10, 0.17) * size
        radii = (r_ed * rng.uniform(0.75, 1.0), r_ed)
        angle = rng.uniform(0, np.pi)
        center = (rng.uniform(0.25, 0.75) * size, rng.uniform(0.25, 0.75) * size)
        edema = _ellipse(shape, center, radii, angle)
        if not np.any(edema & ~brain):
            break
    else:
        return np.zeros(shape, dtype=np.uint8)
    scale = rng.uniform(0.5, 0.7)
    shift = rng.uniform(-0.15, 0.15, size=2) * r_ed
    core = _ellipse(shape, (center[0] + shift[0], center[1] + shift[1]), (radii[0] * scale, radii[1] * scale), angle) & edema
    rim = max(1, size // 32)
    inner = core.copy()
    for _ in range(rim):
        inner = inner & np.roll(inner, 1, 0) & np.roll(inner, -1, 0) & np.roll(inner, 1, 1) & np.roll(inner, -1, 1)
    labels = np.zeros(shape, dtype=np.uint8)
    labels[edema] = 2
    labels[core] = 4
    labels[inner] = 1
    return labels


def extract_nonbrain_mask(sample):
    """Pixels where every modality is exactly zero."""
    image = sample.image if isinstance(sample, VolumeSample) else np.asarray(sample)
    return np.all(image == 0, axis=0)


def normalize_intensity(sample, brain_mask=None):
    """Per-modality z-score over brain pixels; non-brain pixels become 0. Returns float64 images."""
    brain = sample.brain_mask if brain_mask is None else np.asarray(brain_mask, dtype=bool)
    if not brain.any():
        raise ValueError("cannot normalize a sample with an empty brain mask")
    image = np.zeros(sample.image.shape)
    for m in range(sample.image.shape[0]):
        vals = sample.image[m][brain].astype(np.float64)
        mu, sigma = vals.mean(), vals.std()
        image[m][brain] = (vals - mu) / max(sigma, 1e-8)
    return replace(sample, image=image)


def augment(sample, rng):
    """Random quarter-turn rotation and horizontal flip, applied to image, labels and mask alike."""
    k = int(rng.integers(4))
    flip = bool(rng.random() < 0.5)
    return apply_transform(sample, k, flip)


def apply_transform(sample, k, flip):
    def tf(a):
        a = np.rot90(a, k, axes=(-2, -1))
        if flip:
            a = a[..., ::-1]
        return np.ascontiguousarray(a)

    return replace(sample, image=tf(sample.image), labels=tf(sample.labels), brain_mask=tf(sample.brain_mask))


def filter_tumorless(cases, split="train"):
    """Drop tumor-free cases from the training split; other splits pass through unchanged."""
    cases = list(cases)
    if split != "train":
        return cases
    return [c for c in cases if c.has_tumor]


def split_sizes(n):
    n_train = round(3 * n / 5)
    n_val = round(n / 5)
    return n_train, n_val, n - n_train - n_val


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list


def split_dataset(case_ids, rng):
    """Seeded 3:1:1 shuffle split."""
    ids = list(case_ids)
    order = rng.permutation(len(ids))
    n_train, n_val, _ = split_sizes(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :])


def synthesize(count, size, seed, q_tumor=0.7):
    """``count`` phantoms with ids ``case0000``..., each from its own child generator."""
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [generate_phantom(np.random.default_rng(s), size, q_tumor, f"case{i:04d}") for i, s in enumerate(seeds)]


# --- file format -------------------------------------------------------------


def encode_sample(sample):
    sample.validate()
    raw_id = sample.id.encode("utf-8")
    h, w = sample.labels.shape
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", len(raw_id)),
            raw_id,
            struct.pack("<II", h, w),
            np.ascontiguousarray(sample.image, dtype="<f4").tobytes(),
            np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(sample.brain_mask, dtype=np.uint8).tobytes(),
        ]
    )


def decode_sample(buf):
    if buf[:4] != MAGIC:
        raise FormatError("bad case magic", 0)
    pos = 4
    if len(buf) < pos + 4:
        raise FormatError("truncated id length", pos)
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + n:
        raise FormatError("truncated id", pos)
    try:
        case_id = buf[pos : pos + n].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("case id is not UTF-8", pos) from e
    pos += n
    if len(buf) < pos + 8:
        raise FormatError("truncated extents", pos)
    h, w = struct.unpack_from("<II", buf, pos)
    pos += 8
    need = 4 * 4 * h * w + 2 * h * w
    if len(buf) - pos != need:
        raise FormatError(f"payload is {len(buf) - pos} bytes, expected {need}", pos)
    image = np.frombuffer(buf, dtype="<f4", count=4 * h * w, offset=pos).astype(np.float32).reshape(4, h, w)
    pos += 16 * h * w
    labels = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w).copy()
    pos += h * w
    mask_raw = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos)
    if np.any(mask_raw > 1):
        raise FormatError("brain mask bytes must be 0 or 1", pos)
    sample = VolumeSample(image, labels, mask_raw.reshape(h, w).astype(bool), case_id)
    try:
        return sample.validate()
    except ContractViolation as e:
        raise FormatError(f"invalid case {case_id!r}: {e}", 4) from e


def write_sample(path, sample):
    data = encode_sample(sample)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_sample(path):
    with open(path, "rb") as f:
        return decode_sample(f.read())


def write_dataset(path, samples):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for s in samples:
        if not s.id or "/" in s.id or s.id.startswith("."):
            raise ContractViolation(f"case id {s.id!r} cannot be used as a file name")
        write_sample(path / f"{s.id}.cuns", s)


def read_dataset(path):
    return [read_sample(p) for p in sorted(Path(path).glob("*.cuns"))]


def write_split_dataset(root, samples, split):
    by_id = {s.id: s for s in samples}
    for name in SPLITS:
        write_dataset(Path(root) / name, [by_id[i] for i in getattr(split, name)])


def read_split_dataset(root):
    return {name: read_dataset(Path(root) / name) for name in SPLITS if (Path(root) / name).is_dir()}
