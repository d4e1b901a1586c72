"""
Image folders in, normalized tensors out.

Datasets are flat directories of raster images, one directory per source model.
Files are enumerated in sorted order; the first files of each directory are
reserved for testing and few-shot training sets are drawn from the rest.
"""

import csv
import logging
import os
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator

from errors import InvalidInputError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {'.png', '.jpg', '.jpeg', '.bmp', '.gif', '.webp', '.tif', '.tiff'}

NON_TARGET = 0
TARGET = 1
# Attribution label for images matching none of the candidate sources
OTHERS = -1


class PreprocessSpec(BaseModel):
    """Resize edge and per-channel normalization constants."""
    model_config = ConfigDict(frozen=True)

    size: int = Field(224, gt=0)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    @field_validator('std')
    @classmethod
    def _positive_std(cls, value):
        if any(s <= 0 for s in value):
            raise ValueError('std entries must be positive')
        return value


@dataclass(frozen=True)
class DatasetHandle:
    root: str
    name: str
    split: Literal['train_pool', 'test_pool']
    files: tuple[str, ...]

    @property
    def count(self):
        return len(self.files)


@dataclass(frozen=True)
class RawImageList:
    """Decoded, not yet resized or normalized, images."""
    images: tuple
    paths: tuple[str, ...]

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class ImageBatch:
    """Preprocessed images, [n, channels, height, width]."""
    pixels: torch.Tensor
    paths: tuple[str, ...] = ()

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise InvalidInputError(f"image batch must be 4-dimensional, got shape {tuple(self.pixels.shape)}")
        if self.paths and len(self.paths) != self.pixels.shape[0]:
            raise InvalidInputError("paths and pixels disagree on batch size")

    def __len__(self):
        return self.pixels.shape[0]

    def with_pixels(self, pixels):
        return ImageBatch(pixels, self.paths)


@dataclass(frozen=True)
class LabeledImageBatch:
    batch: ImageBatch
    labels: torch.Tensor

    def __post_init__(self):
        if self.labels.dim() != 1 or self.labels.shape[0] != len(self.batch):
            raise InvalidInputError("one label per image is required")

    def __len__(self):
        return len(self.batch)


@dataclass(frozen=True)
class FewShotSplit:
    target: ImageBatch
    non_target: ImageBatch
    shots: int
    draw_seed: int
    # (non-target source, target source)
    source_names: tuple[str, str]

    def labeled(self):
        """Non-target images first with label 0, then target images with label 1."""
        return concat_labeled([self.non_target, self.target], [NON_TARGET, TARGET])


def concat_labeled(batches, labels):
    """Stack batches into one labeled batch, every image of batches[i] labeled labels[i]."""
    pixels = torch.cat([b.pixels for b in batches], dim=0)
    paths = tuple(p for b in batches for p in b.paths) if all(b.paths for b in batches) else ()
    label_vector = torch.cat([
        torch.full((len(b),), label, dtype=torch.long) for b, label in zip(batches, labels)
    ])
    return LabeledImageBatch(ImageBatch(pixels, paths), label_vector)


def discover_image_files(directory):
    """Find all image files in a directory, sorted by name."""
    return sorted(
        os.path.join(directory, f)
        for f in os.listdir(directory)
        if os.path.splitext(f)[1].lower() in IMAGE_EXTENSIONS
    )


def _is_decodable(path):
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except Exception as e:
        logger.warning(f"Skipping undecodable image {path}: {e}")
        return False


def ingest(root, name=None):
    """
    Enumerate the decodable images of a dataset directory.

    :param root: directory holding the images of one source
    :param name: dataset name, defaults to the directory name
    """
    if not os.path.isdir(root):
        raise InvalidInputError(f"dataset directory not found: {root}")
    files = tuple(path for path in discover_image_files(root) if _is_decodable(path))
    if not files:
        raise InvalidInputError(f"no decodable images in {root}")
    name = name or os.path.basename(os.path.normpath(root))
    logger.debug(f"Ingested {name}: {len(files)} images")
    return DatasetHandle(root=root, name=name, split='train_pool', files=files)


def reserve_test(handle, n_test):
    """
    Split a handle into (test pool, train pool). The first n_test files in sorted
    order are the test pool; a smaller dataset gives a smaller test pool.
    """
    n = min(n_test, handle.count)
    if n < n_test:
        logger.warning(f"{handle.name}: only {handle.count} images, test pool holds {n} instead of {n_test}")
    test = DatasetHandle(handle.root, handle.name, 'test_pool', handle.files[:n])
    train = DatasetHandle(handle.root, handle.name, 'train_pool', handle.files[n:])
    return test, train


def load_images(paths):
    """Decode image files to RGB."""
    images, kept = [], []
    for path in paths:
        try:
            with Image.open(path) as img:
                images.append(img.convert('RGB'))
            kept.append(path)
        except Exception as e:
            logger.warning(f"Skipping undecodable image {path}: {e}")
    return RawImageList(tuple(images), tuple(kept))


def preprocess(images, spec):
    """Resize to spec.size x spec.size and normalize per channel."""
    if not isinstance(images, RawImageList):
        raise InvalidInputError("preprocess expects decoded raw images")
    if any(s <= 0 for s in spec.std):
        raise InvalidInputError("normalization std must be positive")
    if len(images) == 0:
        raise InvalidInputError("no images to preprocess")

    arrays = []
    for img in images.images:
        resized = img.resize((spec.size, spec.size), Image.BICUBIC)
        arrays.append(np.asarray(resized, dtype=np.float64).transpose(2, 0, 1) / 255.0)
    pixels = torch.from_numpy(np.stack(arrays))
    mean = torch.tensor(spec.mean, dtype=torch.float64).view(1, 3, 1, 1)
    std = torch.tensor(spec.std, dtype=torch.float64).view(1, 3, 1, 1)
    pixels = (pixels - mean) / std
    if not torch.isfinite(pixels).all():
        raise InvalidInputError("preprocessed images contain non-finite values")
    return ImageBatch(pixels, images.paths)


def load_pool(handle, spec):
    return preprocess(load_images(handle.files), spec)


def _draw_indices(count, shots, seed, base_seed):
    base = seed if base_seed is None else base_seed
    block = seed - base
    permutation = np.random.default_rng(base).permutation(count)
    if 0 <= block and (block + 1) * shots <= count:
        chosen = permutation[block * shots:(block + 1) * shots]
    else:
        logger.debug(f"Pool of {count} cannot hold draw {block} of {shots}; drawing independently")
        chosen = np.random.default_rng(seed).choice(count, size=shots, replace=False)
    return sorted(int(i) for i in chosen)


def draw_few_shot(target, non_target, shots, seed, spec=None, base_seed=None):
    """
    Sample shots images from each training pool without replacement.

    Draws for seeds base_seed, base_seed + 1, ... are disjoint blocks of one
    permutation as long as the pools hold enough images.
    """
    if shots <= 0:
        raise InvalidInputError(f"shots must be positive, got {shots}")
    for pool in (target, non_target):
        if pool.split != 'train_pool':
            raise InvalidInputError(f"{pool.name} is a test pool")
        if pool.count < shots:
            raise InvalidInputError(f"pool {pool.name} holds {pool.count} training images, {shots} required")
    spec = spec or PreprocessSpec()

    target_files = [target.files[i] for i in _draw_indices(target.count, shots, seed, base_seed)]
    non_target_files = [non_target.files[i] for i in _draw_indices(non_target.count, shots, seed, base_seed)]
    return FewShotSplit(
        target=preprocess(load_images(target_files), spec),
        non_target=preprocess(load_images(non_target_files), spec),
        shots=shots,
        draw_seed=seed,
        source_names=(non_target.name, target.name),
    )


def synth_toy_dataset(n_per_class, separation, *, root, dim=(32, 32), seed=0, spread=1.0, pattern_seed=None,
                      names=('toy_non_target', 'toy_target')):
    """
    Write two classes of procedurally generated PNG images and ingest them.

    Both classes share a smooth base pattern; the target class adds
    separation times a fixed unit pattern. Per-image variation is a smooth
    random pattern scaled by spread plus fine pixel noise.

    :return: (non-target handle, target handle)
    """
    if n_per_class < 1:
        raise InvalidInputError("n_per_class must be at least 1")
    height, width = dim
    if not root:
        raise InvalidInputError("synth_toy_dataset needs a root directory owned by the caller")

    patterns = np.random.default_rng(seed if pattern_seed is None else pattern_seed)
    base = patterns.normal(size=(3, 4, 4))
    direction = patterns.normal(size=(3, 4, 4))
    direction /= np.sqrt(np.mean(direction ** 2))

    rng = np.random.default_rng([seed, 1])
    handles = []
    for label, name in enumerate(names):
        directory = os.path.join(root, name)
        os.makedirs(directory, exist_ok=True)
        for i in range(n_per_class):
            low = 0.1 * base + 0.1 * separation * label * direction + 0.08 * spread * rng.normal(size=(3, 4, 4))
            smooth = F.interpolate(torch.from_numpy(low)[None], size=(height, width),
                                   mode='bilinear', align_corners=False)[0].numpy()
            pixels = np.clip(0.5 + smooth + 0.02 * rng.normal(size=(3, height, width)), 0.0, 1.0)
            array = np.round(pixels * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(array).save(os.path.join(directory, f'{i:05d}.png'))
        handles.append(ingest(directory, name))
    return handles[0], handles[1]


def export_manifest(path, test_handles, draws):
    """
    Write the audit manifest: one row per file with its split and repetition.

    :param test_handles: test pools
    :param draws: list of (repetition, FewShotSplit)
    """
    with open(path, 'w', newline='') as file:
        writer = csv.writer(file, delimiter='\t')
        writer.writerow(['path', 'split', 'repetition'])
        for handle in test_handles:
            for f in handle.files:
                writer.writerow([f, 'test', ''])
        for repetition, split in draws:
            for f in split.non_target.paths:
                writer.writerow([f, 'train_non_target', repetition])
            for f in split.target.paths:
                writer.writerow([f, 'train_target', repetition])
