"""Person parsing estimation: build the non-limb target parsing prior and predict
the full target layout with an SE-attention encoder-decoder."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import check_batch
from .dataio import ARM_CLASSES, BACKGROUND, CLOTHING, NUM_CLASSES, decode_parsing, save_labels
from .layers import ResEncoder, UNetDecoder
from .stage import StageEstimator

CLASS_WEIGHTS = (1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 1.0)
PROB_EPS = 1e-8
MASK_THRESHOLD = 0.5
PPE_INPUTS = ("nonlimb_parsing", "occluded_person", "occluded_parsing", "keypoint_map", "warped_cloth")


def compose_nonlimb(parsing: torch.Tensor, warped_mask: torch.Tensor) -> torch.Tensor:
    """Drop clothing and arms from ``parsing`` and paint the binarized warped mask as clothing.

    Works on ``7 x H x W`` or ``N x 7 x H x W``; the result is one-hot.
    """
    if parsing.shape[-3] != NUM_CLASSES:
        raise ValueError(f"parsing must have {NUM_CLASSES} channels, got {parsing.shape[-3]}")
    if warped_mask.shape[-3] != 1 or warped_mask.shape[-2:] != parsing.shape[-2:]:
        raise ValueError(f"warped mask {tuple(warped_mask.shape)} does not match parsing {tuple(parsing.shape)}")
    labels = parsing.argmax(dim=-3)
    removed = (labels == CLOTHING)
    for c in ARM_CLASSES:
        removed |= labels == c
    labels = torch.where(removed, torch.full_like(labels, BACKGROUND), labels)
    labels = torch.where(warped_mask[..., 0, :, :] > MASK_THRESHOLD, torch.full_like(labels, CLOTHING), labels)
    return F.one_hot(labels, NUM_CLASSES).movedim(-1, -3).to(parsing.dtype)


class TargetParsingPredictor(nn.Module):
    """Residual encoder-decoder with an SE block after every convolution; emits 7 logits."""

    def __init__(self, cin=38, base=16, depth=5):
        super().__init__()
        self.encoder = ResEncoder(cin, base, depth, se=True)
        self.decoder = UNetDecoder(self.encoder.channels, NUM_CLASSES, se=True)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class ParsingNetwork(nn.Module):
    """Wraps the predictor so it consumes a batch dict; ``use_mask`` adds ``warped_mask`` as input."""

    def __init__(self, base=16, use_mask=True):
        super().__init__()
        self.use_mask = use_mask
        self.predictor = TargetParsingPredictor(38 + int(use_mask), base)

    def forward(self, batch):
        keys = PPE_INPUTS + (("warped_mask",) if self.use_mask else ())
        check_batch(batch, keys)
        logits = self.predictor(torch.cat([batch[k] for k in keys], dim=1))
        return {"logits": logits, "probs": torch.softmax(logits, dim=1)}


def predict_target_parsing(net: ParsingNetwork, nonlimb_parsing, occluded_person, occluded_parsing, keypoint_map,
                           warped_cloth, warped_mask=None) -> torch.Tensor:
    """Per-pixel class probabilities ``P^t``."""
    batch = {"nonlimb_parsing": nonlimb_parsing, "occluded_person": occluded_person,
             "occluded_parsing": occluded_parsing, "keypoint_map": keypoint_map, "warped_cloth": warped_cloth}
    if net.use_mask:
        if warped_mask is None:
            raise ValueError("this network was built with use_mask=True; pass warped_mask")
        batch["warped_mask"] = warped_mask
    return net(batch)["probs"]


def loss_ppe(probs: torch.Tensor, target: torch.Tensor, weights=CLASS_WEIGHTS, eps: float = PROB_EPS) -> torch.Tensor:
    """Class-weighted cross-entropy, averaged over samples and pixels."""
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
    if w.numel() != probs.shape[-3] or (w <= 0).any():
        raise ValueError(f"need {probs.shape[-3]} positive class weights, got {tuple(weights)}")
    shape = [1] * probs.dim()
    shape[-3] = -1
    per_pixel = -(w.view(shape) * target * torch.log(probs.clamp_min(eps))).sum(dim=-3)
    return per_pixel.mean()


def parsing_accuracy(probs: torch.Tensor, target: torch.Tensor) -> float:
    """Fraction of pixels whose argmax class matches the target's."""
    return float((probs.argmax(dim=-3) == target.argmax(dim=-3)).float().mean())


def export_parsing(probs: torch.Tensor, path) -> None:
    """Write the argmax layout of one ``7 x H x W`` map as a paletted PNG."""
    save_labels(decode_parsing(probs).cpu().numpy(), path)


class ParsingEstimator(StageEstimator):
    """Estimator for the parsing stage.

    During ``fit`` the warped mask and clothing come from the person's own garment
    (``gt_warp_mask``, ``gt_warp_cloth``), so no warping checkpoint is needed.
    """

    stage = "ppe"

    def __init__(self, base_channels=16, use_mask=True, class_weights=CLASS_WEIGHTS, steps=800, batch_size=4,
                 lr=1e-4, betas=(0.5, 0.999), seed=0, device="cpu"):
        self.base_channels = base_channels
        self.use_mask = use_mask
        self.class_weights = class_weights
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.betas = betas
        self.seed = seed
        self.device = device

    def build_network(self):
        return ParsingNetwork(self.base_channels, self.use_mask)

    def training_batch(self, batch):
        batch = dict(batch)
        batch["warped_mask"] = batch["gt_warp_mask"]
        batch["warped_cloth"] = batch["gt_warp_cloth"]
        batch["nonlimb_parsing"] = compose_nonlimb(batch["parsing"], batch["gt_warp_mask"])
        return batch

    def loss_terms(self, network, batch):
        probs = network(batch)["probs"]
        ce = loss_ppe(probs, batch["parsing"], self.class_weights)
        return {"ce": ce, "total": ce}

    @torch.no_grad()
    def accuracy(self, batch) -> float:
        """Argmax accuracy against ``batch["parsing"]`` with ground-truth substitutes."""
        self._check_fitted()
        self.network_.eval()
        batch = self.training_batch(batch)
        return parsing_accuracy(self.predict(batch)["probs"], batch["parsing"].to(self.device))
