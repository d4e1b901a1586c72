"""
Image processing applied to normalized image batches: the verification-time
robustness checks and the standard augmentations compared against the
adversarial one.
"""

import torch
import torchvision.transforms.functional as TF
from pydantic import BaseModel, ConfigDict, Field

from errors import InvalidInputError

TRANSFORM_KINDS = ('none', 'gaussian_blur', 'gaussian_noise', 'grayscale', 'rotate90', 'flip', 'mixture')
MIXTURE_ORDER = ('gaussian_blur', 'gaussian_noise', 'grayscale', 'rotate90', 'flip')

LUMINANCE = (0.299, 0.587, 0.114)


class TransformSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    blur_sigma: float = Field(1.0, gt=0)
    blur_kernel: int = Field(5, gt=0)
    noise_std: float = Field(0.05, ge=0)


def gaussian_blur(pixels, settings):
    if settings.blur_kernel % 2 == 0:
        raise InvalidInputError(f"blur kernel must be odd, got {settings.blur_kernel}")
    k = settings.blur_kernel
    return TF.gaussian_blur(pixels, kernel_size=[k, k], sigma=[settings.blur_sigma, settings.blur_sigma])


def gaussian_noise(pixels, settings, seed):
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(pixels.shape, generator=generator, dtype=pixels.dtype)
    return pixels + settings.noise_std * noise.to(pixels.device)


def grayscale(pixels):
    weights = torch.tensor(LUMINANCE, dtype=pixels.dtype, device=pixels.device).view(1, 3, 1, 1)
    luminance = (pixels * weights).sum(dim=1, keepdim=True)
    return luminance.expand(-1, 3, -1, -1).clone()


def rotate90(pixels):
    return torch.rot90(pixels, k=1, dims=(2, 3))


def flip(pixels):
    """Horizontal flip."""
    return torch.flip(pixels, dims=(3,))


def transform_pixels(pixels, kind, seed=0, settings=None):
    settings = settings or TransformSettings()
    if kind == 'none':
        return pixels
    if kind == 'gaussian_blur':
        return gaussian_blur(pixels, settings)
    if kind == 'gaussian_noise':
        return gaussian_noise(pixels, settings, seed)
    if kind == 'grayscale':
        return grayscale(pixels)
    if kind == 'rotate90':
        return rotate90(pixels)
    if kind == 'flip':
        return flip(pixels)
    if kind == 'mixture':
        for step in MIXTURE_ORDER:
            pixels = transform_pixels(pixels, step, seed, settings)
        return pixels
    raise InvalidInputError(f"unknown transform {kind!r}, expected one of {TRANSFORM_KINDS}")


def masked_augmentation(kind, seed=0, settings=None):
    """
    Training-time augmentation hook: transforms only the masked images, with a
    fresh noise seed per epoch.
    """
    if kind not in TRANSFORM_KINDS:
        raise InvalidInputError(f"unknown transform {kind!r}, expected one of {TRANSFORM_KINDS}")

    def augment(images, mask, epoch):
        if kind == 'none' or not mask.any():
            return images
        pixels = images.pixels.clone()
        transformed = transform_pixels(pixels[mask], kind, seed + epoch, settings)
        if transformed.shape != pixels[mask].shape:
            raise InvalidInputError(f"{kind} changes the image shape; training images must be square")
        pixels[mask] = transformed
        return images.with_pixels(pixels)

    return augment
