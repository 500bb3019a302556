"""Progressive clothing warping: affine pre-alignment, then a multi-scale flow
predictor whose sub-flows are aggregated by a convolutional GRU."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import check_batch
from .geowarp import CLOTH_FILL, MASK_FILL, affine_apply, flow_warp, resize_flow
from .layers import ConvAct, ResEncoder
from .metrics import PERCEPTUAL_WEIGHTS, perceptual_distance
from .stage import StageEstimator

N_SUBFLOWS = 5
PREALIGN_INPUTS = ("cloth", "cloth_mask", "occluded_parsing", "keypoint_map")
FLOW_INPUTS = ("occluded_person", "occluded_parsing", "keypoint_map")


class PreAlignNet(nn.Module):
    """Shared trunk with a scale branch and a translation branch.

    Both heads start at zero, so an untrained network emits the identity
    ``alpha = exp(0) = 1, beta = 0``.
    """

    def __init__(self, cin=29, base=16, depth=5):
        super().__init__()
        layers, prev = [], cin
        for i in range(depth):
            w = base * min(2**i, 4)
            layers.append(ConvAct(prev, w, stride=2))
            prev = w
        self.trunk = nn.Sequential(*layers)
        self.scale_head = nn.Sequential(nn.Linear(prev, prev), nn.ReLU(), nn.Linear(prev, 2))
        self.shift_head = nn.Sequential(nn.Linear(prev, prev), nn.ReLU(), nn.Linear(prev, 2))
        for head in (self.scale_head, self.shift_head):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    def forward(self, x):
        feat = self.trunk(x).mean(dim=(-2, -1))
        alpha = torch.exp(self.scale_head(feat))
        beta = self.shift_head(feat)
        return torch.cat([alpha, beta], dim=1)


class ConvGRUCell(nn.Module):
    """Gated update of a hidden flow state from one sub-flow.

    ``fr, fz, fh`` act on the sub-flow (with bias), ``hr, hz, hh`` on the hidden
    state (bias-free).
    """

    def __init__(self, hidden=16, cin=2, kernel=3):
        super().__init__()
        pad = kernel // 2
        self.hidden = hidden
        self.fr = nn.Conv2d(cin, hidden, kernel, padding=pad)
        self.fz = nn.Conv2d(cin, hidden, kernel, padding=pad)
        self.fh = nn.Conv2d(cin, hidden, kernel, padding=pad)
        self.hr = nn.Conv2d(hidden, hidden, kernel, padding=pad, bias=False)
        self.hz = nn.Conv2d(hidden, hidden, kernel, padding=pad, bias=False)
        self.hh = nn.Conv2d(hidden, hidden, kernel, padding=pad, bias=False)

    def forward(self, f, h):
        return gru_step(self, f, h)


def gru_step(cell: ConvGRUCell, f: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
    if f.shape[-2:] != h_prev.shape[-2:]:
        raise ValueError(f"sub-flow {tuple(f.shape[-2:])} and hidden state {tuple(h_prev.shape[-2:])} differ in size")
    if h_prev.shape[-3] != cell.hidden:
        raise ValueError(f"hidden state has {h_prev.shape[-3]} channels, cell expects {cell.hidden}")
    r = torch.sigmoid(cell.fr(f) + cell.hr(h_prev))
    z = torch.sigmoid(cell.fz(f) + cell.hz(h_prev))
    candidate = torch.tanh(cell.fh(f) + cell.hh(r * h_prev))
    return (1 - z) * h_prev + z * candidate


def aggregate_flows(cell: ConvGRUCell, subflows, size=None) -> torch.Tensor:
    """Run the GRU over ``f_1 .. f_5`` from a zero state; returns the last hidden state.

    Every sub-flow is rescaled to ``size`` (default: the size of the last one).
    """
    if len(subflows) != N_SUBFLOWS:
        raise ValueError(f"expected {N_SUBFLOWS} sub-flows, got {len(subflows)}")
    size = tuple(size) if size is not None else tuple(subflows[-1].shape[-2:])
    first = subflows[0]
    h = first.new_zeros(first.shape[0], cell.hidden, *size)
    for f in subflows:
        h = gru_step(cell, resize_flow(f, size), h)
    return h


class FlowPredictor(nn.Module):
    """Five-stage residual encoder, per-stage sub-flow heads, ConvGRU, five-layer decoder.

    Sub-flows are ordered coarse to fine (``f_1`` from the deepest stage) and
    aggregated at a quarter of the input resolution.
    """

    def __init__(self, cin=31, base=16, hidden=16, agg_stride=4):
        super().__init__()
        self.encoder = ResEncoder(cin, base, depth=N_SUBFLOWS, stem=False)
        self.heads = nn.ModuleList(nn.Conv2d(c, 2, 1) for c in self.encoder.channels[1:])
        for head in self.heads:
            nn.init.normal_(head.weight, std=1e-2)
            nn.init.zeros_(head.bias)
        self.gru = ConvGRUCell(hidden)
        self.agg_stride = agg_stride
        self.decoder = nn.ModuleList([
            nn.Conv2d(hidden, 32, 3, padding=1),
            nn.Conv2d(32, 32, 3, padding=1),
            nn.Conv2d(32, 16, 3, padding=1),
            nn.Conv2d(16, 16, 3, padding=1),
            nn.Conv2d(16, 2, 3, padding=1),
        ])
        nn.init.zeros_(self.decoder[-1].weight)
        nn.init.zeros_(self.decoder[-1].bias)

    def subflows(self, x):
        feats = self.encoder(x)[1:]
        return [head(f) for head, f in zip(reversed(self.heads), reversed(feats))]

    def decode(self, h, size):
        """Five convs; bilinear x2 steps after the second and the fourth reach ``size``."""
        half = (max(size[0] // 2, 1), max(size[1] // 2, 1))
        x = h
        for i, conv in enumerate(self.decoder[:-1]):
            x = F.leaky_relu(conv(x), 0.2)
            if i in (1, 3):
                x = F.interpolate(x, size=half if i == 1 else size, mode="bilinear", align_corners=False)
        return self.decoder[-1](x)

    def forward(self, x):
        h, w = x.shape[-2:]
        agg = (max(h // self.agg_stride, 1), max(w // self.agg_stride, 1))
        subflows = self.subflows(x)
        state = aggregate_flows(self.gru, subflows, agg)
        return self.decode(state, (h, w)), subflows


class WarpingNetwork(nn.Module):
    def __init__(self, base=16, hidden=16):
        super().__init__()
        self.prealign_net = PreAlignNet(29, base)
        self.flow_net = FlowPredictor(31, base, hidden)

    def forward(self, batch):
        return pcw_forward(self, batch)


def prealign(net: PreAlignNet, cloth, cloth_mask, occluded_parsing, keypoint_map):
    """Regress affine parameters and apply them; returns ``(params, C_a, M_a)``."""
    params = net(torch.cat([cloth, cloth_mask, occluded_parsing, keypoint_map], dim=1))
    return params, affine_apply(cloth, params, fill=CLOTH_FILL), affine_apply(cloth_mask, params, fill=MASK_FILL)


def pcw_forward(net: WarpingNetwork, batch) -> dict:
    """Full warping pass over a batch dict; returns warped cloth, mask, flow and intermediates.

    The warped clothing is composited on black (``C_w = warp(C_a) * M_w``) so it
    lives in the same domain as the ground-truth ``I * M_gt`` it is trained against.
    """
    check_batch(batch, PREALIGN_INPUTS + FLOW_INPUTS)
    params, cloth_a, mask_a = prealign(
        net.prealign_net, batch["cloth"], batch["cloth_mask"], batch["occluded_parsing"], batch["keypoint_map"]
    )
    x = torch.cat([cloth_a, batch["keypoint_map"], batch["occluded_parsing"], batch["occluded_person"]], dim=1)
    flow, subflows = net.flow_net(x)
    mask_w = flow_warp(mask_a, flow, fill=MASK_FILL)
    cloth_w = flow_warp(cloth_a, flow, fill=CLOTH_FILL) * mask_w
    return {"warped_cloth": cloth_w, "warped_mask": mask_w, "flow": flow, "aligned_cloth": cloth_a,
            "aligned_mask": mask_a, "affine": params, "subflows": subflows}


def build_gravity_mask(mask: torch.Tensor, floor: float = 0.0) -> torch.Tensor:
    """Per-column weights decaying linearly from 1 at the garment top to ``floor`` at the hem."""
    m = mask > 0.5
    h = m.shape[-2]
    rows = torch.arange(h, device=m.device).view(*([1] * (m.dim() - 2)), h, 1)
    big = torch.full_like(rows, h).expand(m.shape)
    top = torch.where(m, rows.expand(m.shape), big).amin(dim=-2, keepdim=True)
    bottom = torch.where(m, rows.expand(m.shape), torch.full_like(big, -1)).amax(dim=-2, keepdim=True)
    span = (bottom - top).clamp_min(1).to(torch.float32)
    weight = 1.0 - (1.0 - floor) * (rows - top).to(torch.float32) / span
    inside = (rows >= top) & (rows <= bottom)
    return torch.where(inside, weight, torch.zeros_like(weight)).to(mask.dtype if mask.is_floating_point() else torch.float32)


def loss_gravity(warped_mask, gt_mask, gravity_mask) -> torch.Tensor:
    if not (warped_mask.shape == gt_mask.shape == gravity_mask.shape):
        raise ValueError("mask shapes differ")
    return ((warped_mask - gt_mask) * gravity_mask).abs().mean()


def loss_tv(flow: torch.Tensor, eps: float = 1e-6, reduction: str = "mean") -> torch.Tensor:
    """Isotropic total variation with forward differences (zero past the last row/column)."""
    dx = F.pad(flow[..., :, 1:] - flow[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(flow[..., 1:, :] - flow[..., :-1, :], (0, 0, 0, 1))
    mag = torch.sqrt((dx**2 + dy**2).sum(dim=-3) + eps)
    if reduction == "mean":
        return mag.mean()
    if reduction == "sum":
        return mag.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def pcw_loss_terms(warped_cloth, warped_mask, flow, batch, *, lambda_gra=1.0, lambda_vgg=8.0, lambda_tv=0.1,
                   tv_eps=1e-6, gravity_floor=0.0, perceptual_weights=PERCEPTUAL_WEIGHTS, backbone=None) -> dict:
    gt_mask = batch["gt_warp_mask"]
    gravity = build_gravity_mask(gt_mask, gravity_floor)
    terms = {
        "gra": loss_gravity(warped_mask, gt_mask, gravity),
        "vgg": perceptual_distance(warped_cloth, batch["gt_warp_cloth"], backbone, perceptual_weights)
        if lambda_vgg else warped_cloth.new_zeros(()),
        "tv": loss_tv(flow, tv_eps),
    }
    terms["total"] = lambda_gra * terms["gra"] + lambda_vgg * terms["vgg"] + lambda_tv * terms["tv"]
    return terms


def pcw_total_loss(warped_cloth, warped_mask, flow, batch, **weights) -> torch.Tensor:
    return pcw_loss_terms(warped_cloth, warped_mask, flow, batch, **weights)["total"]


class ClothingWarper(StageEstimator):
    """Estimator for the warping stage.

    ``fit`` trains pre-alignment and flow prediction jointly on paired samples;
    ``predict`` returns the warped clothing, its mask and the aggregated flow.
    """

    stage = "pcw"

    def __init__(self, base_channels=16, hidden_channels=16, lambda_gra=1.0, lambda_vgg=8.0, lambda_tv=0.1,
                 tv_eps=1e-6, gravity_floor=0.0, perceptual_weights=PERCEPTUAL_WEIGHTS, steps=600, batch_size=4,
                 lr=1e-4, betas=(0.5, 0.999), seed=0, device="cpu"):
        self.base_channels = base_channels
        self.hidden_channels = hidden_channels
        self.lambda_gra = lambda_gra
        self.lambda_vgg = lambda_vgg
        self.lambda_tv = lambda_tv
        self.tv_eps = tv_eps
        self.gravity_floor = gravity_floor
        self.perceptual_weights = perceptual_weights
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.betas = betas
        self.seed = seed
        self.device = device

    def build_network(self):
        return WarpingNetwork(self.base_channels, self.hidden_channels)

    def loss_terms(self, network, batch):
        out = network(batch)
        return pcw_loss_terms(out["warped_cloth"], out["warped_mask"], out["flow"], batch,
                              lambda_gra=self.lambda_gra, lambda_vgg=self.lambda_vgg, lambda_tv=self.lambda_tv,
                              tv_eps=self.tv_eps, gravity_floor=self.gravity_floor,
                              perceptual_weights=self.perceptual_weights)
