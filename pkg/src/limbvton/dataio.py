"""Dataset loading and the clothing-agnostic person representation.

Parsing maps use a reduced 7-class table::

    0 background   1 hair   2 face   3 upper clothing
    4 left arm     5 right arm       6 lower body / rest
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from ._validation import check_image, check_onehot

NUM_CLASSES = 7
NUM_KEYPOINTS = 18
BACKGROUND, HAIR, FACE, CLOTHING, LEFT_ARM, RIGHT_ARM, LOWER = range(NUM_CLASSES)
ARM_CLASSES = (LEFT_ARM, RIGHT_ARM)
PRESERVE_CLASSES = (BACKGROUND, HAIR, FACE, LOWER)
CLASS_NAMES = ("background", "hair", "face", "upper_clothing", "left_arm", "right_arm", "lower_body")

OCCLUSION_FILL = 0.5
KEYPOINT_SIGMA = 3.0
DEFAULT_SIZE = (256, 192)

# LIP / VITON image-parse ids -> reduced table.
LIP_TO_REDUCED = np.array(
    [
        BACKGROUND,  # 0 background
        HAIR,  # 1 hat
        HAIR,  # 2 hair
        LOWER,  # 3 glove
        FACE,  # 4 sunglasses
        CLOTHING,  # 5 upper-clothes
        CLOTHING,  # 6 dress
        CLOTHING,  # 7 coat
        LOWER,  # 8 socks
        LOWER,  # 9 pants
        LOWER,  # 10 jumpsuits
        LOWER,  # 11 scarf
        LOWER,  # 12 skirt
        FACE,  # 13 face
        LEFT_ARM,  # 14 left-arm
        RIGHT_ARM,  # 15 right-arm
        LOWER,  # 16 left-leg
        LOWER,  # 17 right-leg
        LOWER,  # 18 left-shoe
        LOWER,  # 19 right-shoe
    ],
    dtype=np.int64,
)

# Palette used when exporting reduced label maps as paletted PNGs.
PALETTE = [
    (0, 0, 0),
    (254, 0, 0),
    (0, 0, 254),
    (254, 85, 0),
    (51, 169, 220),
    (0, 254, 254),
    (85, 51, 0),
]


def render_keypoints(keypoints, height: int, width: int, sigma: float = KEYPOINT_SIGMA) -> torch.Tensor:
    """Render 18 pose points as Gaussian heatmaps of peak 1.

    ``keypoints`` is an ``18 x 3`` array of ``(x, y, visible)``; points with a
    non-positive visibility flag give an all-zero channel. Visible points are
    snapped to the nearest pixel so each channel peaks at exactly 1.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim != 2 or kp.shape[0] != NUM_KEYPOINTS or kp.shape[1] not in (2, 3):
        raise ValueError(f"expected {NUM_KEYPOINTS} keypoints of (x, y, visible), got shape {kp.shape}")
    if kp.shape[1] == 2:
        kp = np.concatenate([kp, np.ones((NUM_KEYPOINTS, 1))], axis=1)
    visible = kp[:, 2] > 0
    xy = kp[visible, :2]
    if ((xy[:, 0] < 0) | (xy[:, 0] >= width) | (xy[:, 1] < 0) | (xy[:, 1] >= height)).any():
        raise ValueError("visible keypoint outside the image")
    out = torch.zeros(NUM_KEYPOINTS, height, width)
    ys = torch.arange(height, dtype=torch.float64).view(-1, 1)
    xs = torch.arange(width, dtype=torch.float64).view(1, -1)
    for j in np.flatnonzero(visible):
        cx, cy = np.floor(kp[j, 0] + 0.5), np.floor(kp[j, 1] + 0.5)
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        out[j] = torch.exp(-d2 / (2.0 * sigma * sigma)).float()
    return out


def encode_parsing(labels) -> torch.Tensor:
    """One-hot encode an ``H x W`` label image with ids in ``0..6``."""
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if lab.dim() != 2:
        raise ValueError(f"label image must be 2-D, got shape {tuple(lab.shape)}")
    if lab.numel() and (lab.min() < 0 or lab.max() >= NUM_CLASSES):
        raise ValueError(f"labels must lie in 0..{NUM_CLASSES - 1}")
    return torch.nn.functional.one_hot(lab, NUM_CLASSES).permute(2, 0, 1).float()


def decode_parsing(parsing: torch.Tensor) -> torch.Tensor:
    return parsing.argmax(dim=-3)


def reduce_lip_labels(labels) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= len(LIP_TO_REDUCED)):
        raise ValueError("label outside the 20-class LIP table")
    return LIP_TO_REDUCED[lab]


def _bbox(region: torch.Tensor):
    rows = torch.nonzero(region.any(dim=1)).flatten()
    cols = torch.nonzero(region.any(dim=0)).flatten()
    if rows.numel() == 0:
        return None
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def build_agnostic_mask(parsing: torch.Tensor, preserve=PRESERVE_CLASSES) -> torch.Tensor:
    """Occlusion mask for the clothing-agnostic representation.

    The bounding rectangle of the clothing is grown to cover the exposed arms, then
    every pixel of a preserved class is released again.
    """
    check_onehot(parsing, "parsing")
    clothing = parsing[CLOTHING] > 0.5
    if not clothing.any():
        raise ValueError("parsing map has no clothing pixels; not a valid training sample")
    region = clothing.clone()
    for c in ARM_CLASSES:
        region |= parsing[c] > 0.5
    top, bottom, left, right = _bbox(region)
    mask = torch.zeros_like(parsing[0])
    mask[top : bottom + 1, left : right + 1] = 1.0
    for c in preserve:
        mask[parsing[c] > 0.5] = 0.0
    return mask.unsqueeze(0)


def apply_occlusion(image: torch.Tensor, parsing: torch.Tensor, mask: torch.Tensor, fill: float = OCCLUSION_FILL):
    """Hide the masked region: gray in the image, background in the parsing map."""
    if not (image.shape[-2:] == parsing.shape[-2:] == mask.shape[-2:]):
        raise ValueError("image, parsing and mask must share H x W")
    m = mask.reshape(1, *mask.shape[-2:])
    occluded_image = image * (1 - m) + fill * m
    background = torch.zeros_like(parsing)
    background[BACKGROUND] = 1.0
    occluded_parsing = parsing * (1 - m) + background * m
    return occluded_image, occluded_parsing


def extract_gt_warp(image: torch.Tensor, parsing: torch.Tensor):
    """Ground-truth warped mask and clothing taken from the person's own garment."""
    mask = parsing[CLOTHING : CLOTHING + 1].clone()
    return mask, image * mask


@dataclass
class TryOnSample:
    """One aligned record; every spatial tensor shares ``H x W``."""

    person: torch.Tensor
    cloth: torch.Tensor
    cloth_mask: torch.Tensor
    parsing: torch.Tensor
    keypoints: np.ndarray
    keypoint_map: torch.Tensor
    occluded_person: torch.Tensor
    occluded_parsing: torch.Tensor
    gt_warp_mask: torch.Tensor
    gt_warp_cloth: torch.Tensor
    name: str = ""
    cloth_name: str = ""

    @classmethod
    def build(cls, person, cloth, cloth_mask, parsing, keypoints, name="", cloth_name="", sigma=KEYPOINT_SIGMA):
        check_image(person, "person", channels=3)
        check_image(cloth, "cloth", channels=3)
        h, w = person.shape[-2:]
        for label, t in (("cloth", cloth), ("cloth_mask", cloth_mask), ("parsing", parsing)):
            if t.shape[-2:] != (h, w):
                raise ValueError(f"{label} is {tuple(t.shape[-2:])}, expected {(h, w)}")
        cloth_mask = (cloth_mask > 0.5).float()
        kmap = render_keypoints(keypoints, h, w, sigma)
        mask = build_agnostic_mask(parsing)
        occ_person, occ_parsing = apply_occlusion(person, parsing, mask)
        gt_mask, gt_cloth = extract_gt_warp(person, parsing)
        return cls(person, cloth, cloth_mask, parsing, np.asarray(keypoints, dtype=np.float32), kmap,
                   occ_person, occ_parsing, gt_mask, gt_cloth, name, cloth_name)

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), torch.Tensor)}


def collate(samples) -> dict:
    """Stack samples into a batch dict of tensors plus name lists."""
    batch = {k: torch.stack([getattr(s, k) for s in samples]) for k in samples[0].tensors()}
    batch["name"] = [s.name for s in samples]
    batch["cloth_name"] = [s.cloth_name for s in samples]
    return batch


def load_rgb(path, size=DEFAULT_SIZE) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BICUBIC)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1).contiguous()


def load_mask(path, size=DEFAULT_SIZE) -> torch.Tensor:
    img = Image.open(path).convert("L")
    if img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.NEAREST)
    return torch.from_numpy((np.asarray(img) > 127).astype(np.float32)).unsqueeze(0)


def load_labels(path, size=DEFAULT_SIZE, scheme="lip") -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        img = img.convert("L")
    if img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.NEAREST)
    labels = np.asarray(img, dtype=np.int64)
    return reduce_lip_labels(labels) if scheme == "lip" else labels


def load_keypoints(path, size=DEFAULT_SIZE, source_size=None) -> np.ndarray:
    """Read 18 ``[x, y, confidence]`` triples; out-of-frame points become invisible."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        # OpenPose dump: {"people": [{"pose_keypoints_2d": [...]}]}
        people = data.get("people") or [{}]
        data = people[0].get("pose_keypoints_2d", people[0].get("pose_keypoints", []))
    kp = np.asarray(data, dtype=np.float64).reshape(-1, 3)
    if kp.shape[0] != NUM_KEYPOINTS:
        raise ValueError(f"{path}: expected {NUM_KEYPOINTS} keypoints, found {kp.shape[0]}")
    if source_size is not None:
        kp[:, 0] *= size[1] / source_size[1]
        kp[:, 1] *= size[0] / source_size[0]
    h, w = size
    outside = (kp[:, 0] < 0) | (kp[:, 0] > w - 0.5) | (kp[:, 1] < 0) | (kp[:, 1] > h - 0.5)
    kp[outside | (kp[:, 2] <= 0), 2] = 0.0
    return kp.astype(np.float32)


def save_labels(labels, path) -> None:
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    img.putpalette([v for rgb in PALETTE for v in rgb] + [0] * (768 - 3 * len(PALETTE)))
    img.save(path)


def save_rgb(image: torch.Tensor, path) -> None:
    arr = (image.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}: malformed pair line {line!r}")
            pairs.append((parts[0], parts[1]))
    return pairs


def _find(directory: Path, stem: str, exts) -> Path:
    for ext in exts:
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no file for {stem!r} in {directory}")


def _stem(name: str) -> str:
    return os.path.splitext(name)[0]


class VitonDataset(Dataset):
    """VITON-style directory: ``image/ cloth/ cloth-mask/ image-parse/ pose/`` + pairs file.

    Each pairs line is ``person_name clothing_name``; training lists pair a person
    with their own garment.
    """

    def __init__(self, root, pairs="pairs.txt", size=DEFAULT_SIZE, parse_scheme="lip", sigma=KEYPOINT_SIGMA):
        self.root = Path(root)
        self.size = tuple(size)
        self.parse_scheme = parse_scheme
        self.sigma = sigma
        pairs_path = Path(pairs) if os.path.isabs(str(pairs)) else self.root / pairs
        self.pairs = read_pairs(pairs_path)
        if not self.pairs:
            raise ValueError(f"{pairs_path} lists no pairs")

    def __len__(self):
        return len(self.pairs)

    def load(self, person: str, cloth: str) -> TryOnSample:
        r = self.root
        ps, cs = _stem(person), _stem(cloth)
        img_exts = (".jpg", ".png", ".jpeg")
        image = load_rgb(_find(r / "image", ps, img_exts), self.size)
        cloth_img = load_rgb(_find(r / "cloth", cs, img_exts), self.size)
        cmask = load_mask(_find(r / "cloth-mask", cs, img_exts), self.size)
        labels = load_labels(_find(r / "image-parse", ps, (".png",)), self.size, self.parse_scheme)
        kp = load_keypoints(_find(r / "pose", ps, (".json", "_keypoints.json")), self.size)
        return TryOnSample.build(image, cloth_img, cmask, encode_parsing(labels), kp,
                                 name=ps, cloth_name=cs, sigma=self.sigma)

    def __getitem__(self, index) -> TryOnSample:
        person, cloth = self.pairs[index]
        return self.load(person, cloth)
