"""Synthetic distribution-shift benchmark: generation and dataset files.

Each class is a random template image; samples are the template plus
Gaussian noise, and a pixel-space shift (constant bias, extra pixel
noise, or a rotation mixing channels 0 and 1) is applied to every sample.
Category embeddings are derived per encoder family as the normalized
class means of the frozen features of the *unshifted* samples, so the
frozen encoder starts well above chance before the shift; generation
fails loudly if that probe check does not hold.

Shifts act in pixel space on purpose: the adapters also act before or
inside the encoder, so a feature-space shift would make adaptation
trivial.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .. import numerics as num
from ..adaptation import classify_batch
from ..encoders import CategoryEmbeddings, ToyConvEncoder, ToyViTEncoder
from ..errors import ConfigError, FormatError, GenerationQualityError

DS_MAGIC = b"SSAMDS01"
DS_VERSION = 1
SHIFT_KINDS = ("additive-bias", "pixel-noise", "channel-rotation")
FAMILIES = ("vit", "conv")

# The default recipe was tuned once and then frozen: at the pinned
# lr=1e-4 the conv family recovers several points on a 0.25 bias shift,
# while the attention family needs far more steps to move its
# patch-embedding offsets, so conv is the benchmark default.
DEFAULT_FAMILY = "conv"

# header layout: magic at byte 0, then u32 version/count/C/H/W/M
_HEADER = struct.Struct("<8sIIIIII")
HEADER_SIZE = _HEADER.size  # 32


@dataclass
class SyntheticShiftSpec:
    num_classes: int = 4
    images_per_class: int = 40
    image_shape: tuple = (3, 8, 8)
    shift_kind: str = "additive-bias"
    shift_magnitude: float = 0.25
    sample_noise: float = 0.35
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(x) for x in self.image_shape)
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.images_per_class < 1:
            raise ConfigError(
                f"need at least 1 image per class, got {self.images_per_class}"
            )
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"bad image shape {self.image_shape}")
        if self.shift_kind not in SHIFT_KINDS:
            raise ConfigError(
                f"shift kind must be one of {SHIFT_KINDS}, got {self.shift_kind!r}"
            )
        if self.shift_kind == "channel-rotation" and self.image_shape[0] < 2:
            raise ConfigError("channel-rotation needs at least 2 channels")
        if self.shift_magnitude < 0:
            raise ConfigError(f"shift magnitude must be >= 0, got {self.shift_magnitude}")
        if self.sample_noise < 0:
            raise ConfigError(f"sample noise must be >= 0, got {self.sample_noise}")

    @classmethod
    def from_json(cls, path) -> "SyntheticShiftSpec":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown spec keys {sorted(unknown)} in {path}")
        return cls(**raw)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1)
            fh.write("\n")


@dataclass
class Dataset:
    """Shifted test images plus hidden-at-adaptation-time labels."""

    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) uint32
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype="<f4")
        self.labels = np.ascontiguousarray(self.labels, dtype="<u4")
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (n, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels"
            )
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ConfigError(
                f"label {int(self.labels.max())} out of range for {self.num_classes} classes"
            )

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


@dataclass
class GeneratedBenchmark:
    dataset: Dataset
    embeddings: dict  # family -> CategoryEmbeddings
    probe_accuracy: dict  # family -> unshifted frozen accuracy


def default_recipe(seed: int = 0):
    """The frozen adaptation settings the benchmark is quoted at."""
    from ..adaptation import AdaptConfig

    return AdaptConfig(
        alpha=1.0,
        beta=1.0,
        learning_rate=1e-4,
        batch_size=64,
        steps_per_batch=50,
        mode="continual",
        optimizer="adam",
        seed=seed,
    )


def default_encoder(family: str, image_shape, insertion_layer: int = 0, seed: int = 0):
    """The fixed per-family encoder every benchmark run uses (seeded
    construction; the adapter is the only thing that ever changes)."""
    c, h, w = image_shape
    if family == "vit":
        if h % 2 or w % 2:
            raise ConfigError(f"vit default needs even image dims, got {h}x{w}")
        return ToyViTEncoder(
            image_shape=(c, h, w),
            patch_grid=(h // 2, w // 2),
            dim=16,
            num_blocks=3,
            insertion_layer=insertion_layer,
            seed=seed,
        )
    if family == "conv":
        return ToyConvEncoder(image_shape=(c, h, w), dim=16, patch_side=2, seed=seed)
    raise ConfigError(f"encoder family must be one of {FAMILIES}, got {family!r}")


def _apply_shift(images: np.ndarray, spec: SyntheticShiftSpec, rng) -> np.ndarray:
    if spec.shift_kind == "additive-bias":
        return images + spec.shift_magnitude
    if spec.shift_kind == "pixel-noise":
        return images + rng.normal(0.0, spec.shift_magnitude, images.shape)
    # channel-rotation: mix channels 0 and 1 by the given angle
    out = images.copy()
    ca, sa = np.cos(spec.shift_magnitude), np.sin(spec.shift_magnitude)
    out[:, 0] = ca * images[:, 0] - sa * images[:, 1]
    out[:, 1] = sa * images[:, 0] + ca * images[:, 1]
    return out


def generate_dataset(spec: SyntheticShiftSpec) -> GeneratedBenchmark:
    """Build the shifted dataset and its per-family category embeddings.

    The quality gate compares the frozen zero-adapter accuracy on the
    unshifted samples against chance + 0.05 for both encoder families.
    """
    rng = np.random.default_rng(spec.seed)
    m = spec.num_classes
    templates = rng.normal(0.0, 1.0, (m,) + spec.image_shape)
    n = m * spec.images_per_class
    labels = np.repeat(np.arange(m, dtype=np.int64), spec.images_per_class)
    clean = templates[labels] + rng.normal(0.0, spec.sample_noise, (n,) + spec.image_shape)
    shifted = _apply_shift(clean, spec, rng)

    embeddings: dict = {}
    probe: dict = {}
    for family in FAMILIES:
        enc = default_encoder(family, spec.image_shape)
        feats = num.value_of(enc.encode_batch(clean, enc.new_adapter()))
        means = np.stack([feats[labels == j].mean(axis=0) for j in range(m)])
        emb = CategoryEmbeddings(means, source="derived-class-means")
        acc = float(
            (classify_batch(enc, clean, enc.new_adapter(), emb) == labels).mean()
        )
        if acc <= 1.0 / m + 0.05:
            raise GenerationQualityError(
                f"unshifted probe accuracy {acc:.3f} for {family} encoder is not "
                f"above chance + 0.05 ({1.0 / m + 0.05:.3f}); spec too noisy"
            )
        embeddings[family] = emb
        probe[family] = acc

    dataset = Dataset(shifted, labels, num_classes=m)
    return GeneratedBenchmark(dataset=dataset, embeddings=embeddings, probe_accuracy=probe)


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(ds: Dataset, path) -> None:
    c, h, w = ds.image_shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DS_MAGIC, DS_VERSION, ds.count, c, h, w, ds.num_classes))
        fh.write(ds.images.tobytes())
        fh.write(ds.labels.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise FormatError(
            f"{path}: header truncated at byte {len(blob)} (need {HEADER_SIZE})"
        )
    magic, version, count, c, h, w, m = _HEADER.unpack_from(blob, 0)
    if magic != DS_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, got {magic!r}")
    if version != DS_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 8")
    if m < 2:
        raise FormatError(f"{path}: class count {m} < 2 at byte 28")
    img_bytes = 4 * count * c * h * w
    label_offset = HEADER_SIZE + img_bytes
    expected = label_offset + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, got {len(blob)} "
            f"(images at byte {HEADER_SIZE}, labels at byte {label_offset})"
        )
    images = np.frombuffer(blob, dtype="<f4", count=count * c * h * w, offset=HEADER_SIZE)
    images = images.reshape(count, c, h, w)
    if not np.all(np.isfinite(images)):
        flat = int(np.flatnonzero(~np.isfinite(images.ravel()))[0])
        raise FormatError(f"{path}: non-finite pixel at byte {HEADER_SIZE + 4 * flat}")
    labels = np.frombuffer(blob, dtype="<u4", count=count, offset=label_offset)
    bad = np.flatnonzero(labels >= m)
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"{path}: label {int(labels[i])} >= {m} at byte {label_offset + 4 * i}"
        )
    return Dataset(images, labels, num_classes=int(m))


def companion_embedding_path(dataset_path, family: str) -> str:
    return f"{dataset_path}.{family}.emb"


def save_benchmark(bench: GeneratedBenchmark, path) -> None:
    """Dataset file plus one category-embedding file per encoder family."""
    save_dataset(bench.dataset, path)
    for family, emb in bench.embeddings.items():
        emb.save(companion_embedding_path(path, family))


def load_companion_embeddings(dataset_path, family: str) -> CategoryEmbeddings:
    p = companion_embedding_path(dataset_path, family)
    try:
        return CategoryEmbeddings.load(p)
    except FileNotFoundError:
        raise ConfigError(
            f"no category embeddings at {p}; generate the dataset with gen-data "
            f"so the companion .emb files exist"
        ) from None
