"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import torch


def check_image(x, name="image", channels=None, value_range=None) -> torch.Tensor:
    """Check a ``C x H x W`` or ``N x C x H x W`` float tensor and return it."""
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.dim() not in (3, 4):
        raise ValueError(f"{name} must be C x H x W or N x C x H x W, got shape {tuple(x.shape)}")
    if not x.is_floating_point():
        raise TypeError(f"{name} must be floating point, got {x.dtype}")
    if channels is not None and x.shape[-3] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {x.shape[-3]}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    if value_range is not None:
        lo, hi = value_range
        if x.numel() and (x.min() < lo or x.max() > hi):
            raise ValueError(f"{name} values must lie in [{lo}, {hi}]")
    return x


def check_onehot(x, name="parsing", atol=1e-6) -> torch.Tensor:
    check_image(x, name)
    if x.numel() and ((x < -atol).any() or ((x.sum(dim=-3) - 1).abs() > atol).any()):
        raise ValueError(f"{name} must sum to one over channels at every pixel")
    return x


def check_same_hw(**tensors) -> tuple[int, int]:
    sizes = {k: tuple(v.shape[-2:]) for k, v in tensors.items()}
    if len(set(sizes.values())) > 1:
        raise ValueError(f"spatial sizes differ: {sizes}")
    return next(iter(sizes.values()))


def check_batch(batch: dict, keys) -> dict:
    missing = [k for k in keys if k not in batch]
    if missing:
        raise KeyError(f"batch is missing {missing}")
    check_same_hw(**{k: batch[k] for k in keys})
    return batch
