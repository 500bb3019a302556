"""Limb-aware texture fusion: a coarse fusion net followed by a fine net that
reads the exposed limbs as a stack of patches."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import check_batch
from .dataio import ARM_CLASSES
from .geowarp import patchify, sobel_gradients
from .layers import ConvAct, ResBlock, ResEncoder, UNetDecoder
from .metrics import PERCEPTUAL_WEIGHTS, perceptual_distance
from .stage import StageEstimator, to_device

PATCH_SCALE = 8
COARSE_INPUTS = ("warped_cloth", "occluded_person", "target_parsing", "keypoint_map")
FINE_INPUTS = ("keypoint_map", "occluded_person", "target_parsing")


def arm_indicator(parsing: torch.Tensor) -> torch.Tensor:
    """``1 x H x W`` indicator of arm pixels under the argmax of ``parsing``."""
    labels = parsing.argmax(dim=-3, keepdim=True)
    out = torch.zeros_like(labels, dtype=parsing.dtype)
    for c in ARM_CLASSES:
        out = out + (labels == c).to(parsing.dtype)
    return out


def extract_limb_map(image: torch.Tensor, parsing: torch.Tensor) -> torch.Tensor:
    """Person pixels on the arms of ``parsing``, zero elsewhere."""
    if image.shape[-2:] != parsing.shape[-2:]:
        raise ValueError(f"image {tuple(image.shape)} and parsing {tuple(parsing.shape)} differ in size")
    return image * arm_indicator(parsing)


def limb_guidance(limb_map: torch.Tensor, s: int = PATCH_SCALE) -> torch.Tensor:
    """Patchify each color channel and stack: ``3 s^2`` channels at ``H/s x W/s``."""
    return torch.cat([patchify(limb_map[..., c : c + 1, :, :], s) for c in range(limb_map.shape[-3])], dim=-3)


class CoarseFusionNet(nn.Module):
    def __init__(self, cin=31, base=16, depth=5):
        super().__init__()
        self.encoder = ResEncoder(cin, base, depth)
        self.decoder = UNetDecoder(self.encoder.channels, 3, head_extra=cin)

    def forward(self, x):
        return torch.sigmoid(self.decoder(self.encoder(x), extra=x))


class CorrelationBlock(nn.Module):
    """Re-weight limb features by their cosine similarity with the main stream.

    Both streams are projected to a shared space; the per-location similarity in
    ``[-1, 1]`` becomes a weight ``(1 + cos) / 2`` on the limb features.
    """

    def __init__(self, main_channels, limb_channels, dim=32):
        super().__init__()
        self.q = nn.Conv2d(main_channels, dim, 1)
        self.k = nn.Conv2d(limb_channels, dim, 1)

    def similarity(self, main, limb):
        return F.cosine_similarity(self.q(main), self.k(limb), dim=1, eps=1e-6).unsqueeze(1)

    def forward(self, main, limb):
        return limb * (1 + self.similarity(main, limb)) / 2


class LimbEncoder(nn.Module):
    """Brings the ``3 s^2``-channel patch stack down to the bottleneck resolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.inp = ConvAct(cin, cout)
        self.res = ResBlock(cout)

    def forward(self, patches, size):
        x = self.res(self.inp(patches))
        return F.adaptive_avg_pool2d(x, size) if x.shape[-2:] != tuple(size) else x


class FineFusionNet(nn.Module):
    def __init__(self, cin=31, base=16, depth=5, patch_scale=PATCH_SCALE, limb_channels=64):
        super().__init__()
        self.patch_scale = patch_scale
        self.encoder = ResEncoder(cin, base, depth)
        self.limbs = LimbEncoder(3 * patch_scale**2, limb_channels)
        self.correlation = CorrelationBlock(self.encoder.channels[-1], limb_channels)
        self.decoder = UNetDecoder(self.encoder.channels, 3, bottleneck_extra=limb_channels, head_extra=cin)

    def forward(self, x, limb_patches):
        feats = self.encoder(x)
        bottom = feats[-1]
        limb = self.correlation(bottom, self.limbs(limb_patches, bottom.shape[-2:]))
        return torch.sigmoid(self.decoder(feats, torch.cat([bottom, limb], dim=1), extra=x))


class FusionNetwork(nn.Module):
    """Coarse then fine fusion over a batch dict.

    Needs ``person`` (limb texture source), ``warped_cloth``, ``occluded_person``,
    ``target_parsing`` and ``keypoint_map``. ``zero_limbs`` blanks the patch input.
    """

    def __init__(self, base=16, patch_scale=PATCH_SCALE):
        super().__init__()
        self.patch_scale = patch_scale
        self.coarse = CoarseFusionNet(31, base)
        self.fine = FineFusionNet(31, base, patch_scale=patch_scale)

    def forward(self, batch, zero_limbs=False):
        check_batch(batch, COARSE_INPUTS + ("person",))
        coarse = self.coarse(torch.cat([batch[k] for k in COARSE_INPUTS], dim=1))
        limb_map = extract_limb_map(batch["person"], batch["target_parsing"])
        patches = limb_guidance(limb_map, self.patch_scale)
        if zero_limbs:
            patches = torch.zeros_like(patches)
        x = torch.cat([batch[k] for k in FINE_INPUTS] + [coarse], dim=1)
        fine = self.fine(x, patches)
        return {"coarse": coarse, "fine": fine, "limb_map": limb_map}


def stage_loss(output, target, *, lambda_img=1.0, lambda_p=2.0, lambda_edge=0.4,
               perceptual_weights=PERCEPTUAL_WEIGHTS, backbone=None) -> torch.Tensor:
    loss = lambda_img * (output - target).abs().mean()
    if lambda_p:
        loss = loss + lambda_p * perceptual_distance(output, target, backbone, perceptual_weights)
    if lambda_edge:
        loss = loss + lambda_edge * (sobel_gradients(output) - sobel_gradients(target)).abs().mean()
    return loss


def loss_ltf_terms(coarse, fine, target, **weights) -> dict:
    terms = {"coarse": stage_loss(coarse, target, **weights), "fine": stage_loss(fine, target, **weights)}
    terms["total"] = terms["coarse"] + terms["fine"]
    return terms


def loss_ltf(coarse, fine, target, **weights) -> torch.Tensor:
    """Sum of the coarse and fine losses, each ``L1 + perceptual + Sobel-edge L1``."""
    return loss_ltf_terms(coarse, fine, target, **weights)["total"]


class TextureFuser(StageEstimator):
    """Estimator for the fusion stage.

    ``fit`` uses the person's own parsing as ``target_parsing`` and their own
    garment as ``warped_cloth``, so it trains without upstream checkpoints.
    """

    stage = "ltf"

    def __init__(self, base_channels=16, patch_scale=PATCH_SCALE, lambda_img=1.0, lambda_p=2.0, lambda_edge=0.4,
                 perceptual_weights=PERCEPTUAL_WEIGHTS, steps=800, batch_size=4, lr=1e-4, betas=(0.5, 0.999),
                 seed=0, device="cpu"):
        self.base_channels = base_channels
        self.patch_scale = patch_scale
        self.lambda_img = lambda_img
        self.lambda_p = lambda_p
        self.lambda_edge = lambda_edge
        self.perceptual_weights = perceptual_weights
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.betas = betas
        self.seed = seed
        self.device = device

    def build_network(self):
        return FusionNetwork(self.base_channels, self.patch_scale)

    def training_batch(self, batch):
        batch = dict(batch)
        batch["target_parsing"] = batch["parsing"]
        batch["warped_cloth"] = batch["gt_warp_cloth"]
        return batch

    def loss_terms(self, network, batch):
        out = network(batch)
        return loss_ltf_terms(out["coarse"], out["fine"], batch["person"], lambda_img=self.lambda_img,
                              lambda_p=self.lambda_p, lambda_edge=self.lambda_edge,
                              perceptual_weights=self.perceptual_weights)

    @torch.no_grad()
    def render(self, batch, zero_limbs=False) -> dict:
        """Forward pass with ground-truth substitutes; ``zero_limbs`` runs the limb ablation."""
        self._check_fitted()
        self.network_.eval()
        with torch.no_grad():
            return self.network_(self.training_batch(to_device(batch, self.device)), zero_limbs=zero_limbs)
