"""Differentiable geometric primitives shared by the three try-on stages.

Coordinate conventions
----------------------
* Affine parameters live in normalized coordinates ``[-1, 1]`` (``align_corners=False``),
  so the matrix ``[[a1, 0, b1], [0, a2, b2]]`` maps an output location to the input
  location it samples from.
* Flow fields are in pixel units of their own resolution. Warping is backward
  (gather): ``out[i, j] = in[i + flow_y[i, j], j + flow_x[i, j]]``.

Every function accepts a single ``C x H x W`` tensor or a batch ``N x C x H x W``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

MASK_FILL = 0.0
CLOTH_FILL = 1.0
PERSON_FILL = 0.5

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.t().contiguous()


@dataclass(frozen=True)
class AffineParams:
    """Axis-aligned scale ``(alpha1, alpha2)`` and translation ``(beta1, beta2)``."""

    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 0.0
    beta2: float = 0.0

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([self.alpha1, self.alpha2, self.beta1, self.beta2], dtype=dtype)

    def matrix(self) -> torch.Tensor:
        return params_to_matrix(self.as_tensor(torch.float64))

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "AffineParams":
        a1, a2, b1, b2 = (float(v) for v in t.detach().reshape(4))
        return cls(a1, a2, b1, b2)

    @classmethod
    def from_pixel_shift(cls, dx: float, dy: float, height: int, width: int) -> "AffineParams":
        """Parameters that move the image content by ``(dx, dy)`` pixels."""
        return cls(1.0, 1.0, -2.0 * dx / width, -2.0 * dy / height)


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected a C x H x W or N x C x H x W tensor, got shape {tuple(x.shape)}")


def params_to_matrix(params: torch.Tensor) -> torch.Tensor:
    """``(..., 4)`` parameters -> ``(..., 2, 3)`` matrices ``[[a1, 0, b1], [0, a2, b2]]``."""
    a1, a2, b1, b2 = params.unbind(-1)
    zero = torch.zeros_like(a1)
    row0 = torch.stack([a1, zero, b1], dim=-1)
    row1 = torch.stack([zero, a2, b2], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def _sample(image: torch.Tensor, grid: torch.Tensor, fill: float, align_corners: bool) -> torch.Tensor:
    # Zero padding on (image - fill) is bilinear sampling with a constant border of `fill`.
    if fill == 0.0:
        return F.grid_sample(image, grid, mode="bilinear", padding_mode="zeros", align_corners=align_corners)
    out = F.grid_sample(image - fill, grid, mode="bilinear", padding_mode="zeros", align_corners=align_corners)
    return out + fill


def affine_apply(image: torch.Tensor, params, fill: float = MASK_FILL) -> torch.Tensor:
    """Resample ``image`` through the axis-aligned affine map given by ``params``.

    ``params`` is an :class:`AffineParams` or a tensor of shape ``(4,)`` / ``(N, 4)``
    ordered ``(alpha1, alpha2, beta1, beta2)``. Samples falling outside the input read
    ``fill``.
    """
    x, squeeze = _batched(image)
    if isinstance(params, AffineParams):
        params = params.as_tensor(x.dtype)
    params = torch.as_tensor(params, dtype=x.dtype, device=x.device)
    if params.dim() == 1:
        params = params.unsqueeze(0).expand(x.shape[0], 4)
    if params.shape != (x.shape[0], 4):
        raise ValueError(f"params must have shape (N, 4), got {tuple(params.shape)}")
    if not torch.isfinite(params).all():
        raise ValueError("affine parameters must be finite")
    if (params[:, :2] <= 0).any():
        raise ValueError("scale parameters alpha1, alpha2 must be positive")
    grid = F.affine_grid(params_to_matrix(params), list(x.shape), align_corners=False)
    out = _sample(x, grid, fill, align_corners=False)
    return out.squeeze(0) if squeeze else out


def _pixel_grid(h: int, w: int, dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(h, dtype=dtype, device=device).view(h, 1).expand(h, w)
    xs = torch.arange(w, dtype=dtype, device=device).view(1, w).expand(h, w)
    return xs, ys


def flow_warp(image: torch.Tensor, flow: torch.Tensor, fill: float = MASK_FILL) -> torch.Tensor:
    """Backward-warp ``image`` by a pixel-unit ``flow`` of the same resolution."""
    x, squeeze = _batched(image)
    f, _ = _batched(flow)
    if f.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got {f.shape[1]}")
    if f.shape[-2:] != x.shape[-2:]:
        raise ValueError(
            f"flow resolution {tuple(f.shape[-2:])} does not match image resolution {tuple(x.shape[-2:])}"
        )
    if f.shape[0] != x.shape[0]:
        f = f.expand(x.shape[0], -1, -1, -1)
    h, w = x.shape[-2:]
    xs, ys = _pixel_grid(h, w, x.dtype, x.device)
    sx = xs + f[:, 0]
    sy = ys + f[:, 1]
    # pixel-centre normalisation; unlike align_corners=True it stays valid when a side is 1
    gx = (2.0 * sx + 1.0) / w - 1.0
    gy = (2.0 * sy + 1.0) / h - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    out = _sample(x, grid, fill, align_corners=False)
    return out.squeeze(0) if squeeze else out


def resize_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a flow and rescale its values to the target pixel units."""
    f, squeeze = _batched(flow)
    th, tw = int(size[0]), int(size[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {size}")
    h, w = f.shape[-2:]
    if (h, w) == (th, tw):
        return flow
    out = F.interpolate(f, size=(th, tw), mode="bilinear", align_corners=False)
    scale = torch.tensor([tw / w, th / h], dtype=f.dtype, device=f.device).view(1, 2, 1, 1)
    out = out * scale
    return out.squeeze(0) if squeeze else out


def patchify(x: torch.Tensor, s: int) -> torch.Tensor:
    """Split ``1 x H x W`` maps into ``s*s`` non-overlapping patches stacked on channels.

    Patch order is row-major over the ``s x s`` patch grid. Batched input
    ``N x 1 x H x W`` gives ``N x s*s x H/s x W/s``.
    """
    t, squeeze = _batched(x)
    n, c, h, w = t.shape
    if c != 1:
        raise ValueError(f"patchify expects a single channel, got {c}")
    if s < 1 or h % s or w % s:
        raise ValueError(f"patch scale {s} must divide both H={h} and W={w}")
    ph, pw = h // s, w // s
    out = t.reshape(n, s, ph, s, pw).permute(0, 1, 3, 2, 4).reshape(n, s * s, ph, pw)
    return out.squeeze(0) if squeeze else out


def unpatch(patches: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    t, squeeze = _batched(patches)
    n, c, ph, pw = t.shape
    s = int(round(c ** 0.5))
    if s * s != c:
        raise ValueError(f"patch count {c} is not a perfect square")
    out = t.reshape(n, s, s, ph, pw).permute(0, 1, 3, 2, 4).reshape(n, 1, s * ph, s * pw)
    return out.squeeze(0) if squeeze else out


def sobel_gradients(image: torch.Tensor) -> torch.Tensor:
    """Horizontal and vertical 3x3 Sobel responses, replicate padding.

    Output channels are ``[gx_0..gx_{C-1}, gy_0..gy_{C-1}]``.
    """
    x, squeeze = _batched(image)
    c = x.shape[1]
    kx = SOBEL_X.to(dtype=x.dtype, device=x.device).view(1, 1, 3, 3).repeat(c, 1, 1, 1)
    ky = SOBEL_Y.to(dtype=x.dtype, device=x.device).view(1, 1, 3, 3).repeat(c, 1, 1, 1)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx, groups=c)
    gy = F.conv2d(padded, ky, groups=c)
    out = torch.cat([gx, gy], dim=1)
    return out.squeeze(0) if squeeze else out
