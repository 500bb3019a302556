"""Procedural VITON-style dataset for smoke tests, overfit runs and demos.

Each person wears a striped upper garment drawn from a canonical garment shape; the
matching in-shop image shows the same garment, flat and centered on white. The
person's garment is the shop garment under a scale, a translation and a mild
lean, so the warping stage has a known, learnable target.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

# LIP ids written to image-parse/
LIP_BACKGROUND, LIP_HAIR, LIP_UPPER, LIP_PANTS, LIP_FACE, LIP_LEFT_ARM, LIP_RIGHT_ARM = 0, 2, 5, 9, 13, 14, 15

# (center x / W, top / H, half width / W, height / H) of the garment in shop images;
# smaller and lower than on the person, so warping starts clearly misaligned.
SHOP_FRAME_FRACTIONS = (0.5, 0.3, 0.17, 0.32)

# Canonical garment outline in (u, v): u across [-1, 1], v from collar 0 to hem 1.
GARMENT = [
    (-0.35, 0.0), (0.35, 0.0), (1.0, 0.12), (0.95, 0.32), (0.62, 0.25), (0.6, 1.0),
    (-0.6, 1.0), (-0.62, 0.25), (-0.95, 0.32), (-1.0, 0.12),
]


def _garment_texture(u, v, style):
    base, stripe, freq, phase = style["base"], style["stripe"], style["freq"], style["phase"]
    t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * v + phase)
    rgb = base[None, :] * (1 - t[:, None]) + stripe[None, :] * t[:, None]
    # a chest patch makes horizontal placement observable
    patch = (np.abs(u - style["patch_u"]) < 0.18) & (np.abs(v - 0.45) < 0.1)
    rgb[patch] = style["patch"]
    return rgb


def _frame_xy(frame, u, v):
    cx, top, hw, height, lean = frame
    return cx + u * hw + lean * v * v * hw, top + v * height


def _frame_uv(frame, x, y):
    cx, top, hw, height, lean = frame
    v = (y - top) / height
    u = (x - cx - lean * v * v * hw) / hw
    return u, v


def _polygon(frame):
    return [_frame_xy(frame, u, v) for u, v in GARMENT]


def _paint_garment(img, region, frame, style):
    ys, xs = np.nonzero(region)
    u, v = _frame_uv(frame, xs + 0.5, ys + 0.5)
    img[ys, xs] = _garment_texture(u, v, style)


def make_person(rng, height=256, width=192):
    """Draw one person; returns ``(image, lip_labels, keypoints, garment_style)``."""
    H, W = height, width
    hw = W * rng.uniform(0.2, 0.24)
    frame = (W / 2 + rng.uniform(-0.05, 0.05) * W, H * rng.uniform(0.24, 0.28), hw,
             H * rng.uniform(0.34, 0.4), rng.uniform(-0.08, 0.08))
    style = {
        "base": rng.uniform(0.1, 0.9, 3), "stripe": rng.uniform(0.1, 0.9, 3),
        "freq": rng.uniform(1.5, 3.0), "phase": rng.uniform(0, 2 * np.pi),
        "patch": rng.uniform(0.0, 1.0, 3), "patch_u": rng.uniform(-0.25, 0.25),
    }
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.7, 1.05)
    hair = rng.uniform(0.05, 0.35, 3)
    pants = rng.uniform(0.05, 0.5, 3)
    bg = rng.uniform(0.75, 0.95, 3)

    label_img = Image.new("L", (W, H), LIP_BACKGROUND)
    draw = ImageDraw.Draw(label_img)
    hem_l = _frame_xy(frame, -0.6, 1.0)
    hem_r = _frame_xy(frame, 0.6, 1.0)
    hip_y = hem_l[1]
    draw.polygon([(hem_l[0] + 2, hip_y - 4), (hem_r[0] - 2, hip_y - 4), (hem_r[0] - 4, H), (hem_l[0] + 4, H)],
                 fill=LIP_PANTS)

    arm_w = max(3, int(W * 0.065))
    arms = {}
    for side, sign, lip in (("right", -1, LIP_RIGHT_ARM), ("left", 1, LIP_LEFT_ARM)):
        shoulder = _frame_xy(frame, sign * 0.9, 0.2)
        elbow = (shoulder[0] + sign * rng.uniform(0.0, 0.06) * W, shoulder[1] + H * rng.uniform(0.14, 0.17))
        wrist = (elbow[0] + sign * rng.uniform(-0.03, 0.05) * W, elbow[1] + H * rng.uniform(0.13, 0.16))
        draw.line([shoulder, elbow, wrist], fill=lip, width=arm_w, joint="curve")
        arms[side] = (shoulder, elbow, wrist)

    draw.polygon(_polygon(frame), fill=LIP_UPPER)
    collar = _frame_xy(frame, 0.0, 0.0)
    head_r = W * 0.09
    head_c = (collar[0], collar[1] - head_r * 1.35)
    draw.rectangle([collar[0] - head_r * 0.35, head_c[1], collar[0] + head_r * 0.35, collar[1] + 1], fill=LIP_FACE)
    draw.ellipse([head_c[0] - head_r * 1.05, head_c[1] - head_r * 1.25, head_c[0] + head_r * 1.05,
                  head_c[1] + head_r * 0.6], fill=LIP_HAIR)
    draw.ellipse([head_c[0] - head_r * 0.85, head_c[1] - head_r * 0.85, head_c[0] + head_r * 0.85,
                  head_c[1] + head_r * 1.05], fill=LIP_FACE)
    labels = np.asarray(label_img, dtype=np.uint8).copy()

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.empty((H, W, 3))
    img[:] = bg * (0.92 + 0.08 * yy[..., None] / H)
    img[labels == LIP_PANTS] = pants
    img[labels == LIP_HAIR] = hair
    img[labels == LIP_FACE] = skin
    for lip, side in ((LIP_RIGHT_ARM, "right"), (LIP_LEFT_ARM, "left")):
        region = labels == lip
        shade = 0.85 + 0.15 * (yy - arms[side][0][1]) / (H * 0.3)
        img[region] = skin * np.clip(shade[region], 0.7, 1.0)[:, None]
        wrist = arms[side][2]
        band = region & (np.abs(yy - (wrist[1] - H * 0.03)) < H * 0.012)
        img[band] = style["patch"][::-1]
    _paint_garment(img, labels == LIP_UPPER, frame, style)

    def pt(p, visible=1.0):
        x, y = p
        if not (0 <= x < W and 0 <= y < H):
            return [0.0, 0.0, 0.0]
        return [float(x), float(y), visible]

    hip_r = (hem_l[0] + hw * 0.2, hip_y)
    hip_l = (hem_r[0] - hw * 0.2, hip_y)
    kp = [
        pt((head_c[0], head_c[1] + head_r * 0.3)),  # nose
        pt(collar),  # neck
        pt(_frame_xy(frame, -0.75, 0.08)), pt(arms["right"][1]), pt(arms["right"][2]),
        pt(_frame_xy(frame, 0.75, 0.08)), pt(arms["left"][1]), pt(arms["left"][2]),
        pt(hip_r), pt((hip_r[0], hip_y + H * 0.2)), pt((hip_r[0], hip_y + H * 0.4)),
        pt(hip_l), pt((hip_l[0], hip_y + H * 0.2)), pt((hip_l[0], hip_y + H * 0.4)),
        pt((head_c[0] - head_r * 0.35, head_c[1] - head_r * 0.1)),
        pt((head_c[0] + head_r * 0.35, head_c[1] - head_r * 0.1)),
        pt((head_c[0] - head_r * 0.8, head_c[1])), pt((head_c[0] + head_r * 0.8, head_c[1])),
    ]
    return np.clip(img, 0, 1), labels, np.asarray(kp, dtype=np.float32), style


def make_cloth(style, height=256, width=192):
    """Flat in-shop view of the garment on a white background; returns ``(image, mask)``."""
    H, W = height, width
    frame = SHOP_FRAME_FRACTIONS[0] * W, SHOP_FRAME_FRACTIONS[1] * H, SHOP_FRAME_FRACTIONS[2] * W, \
        SHOP_FRAME_FRACTIONS[3] * H, 0.0
    mask_img = Image.new("L", (W, H), 0)
    ImageDraw.Draw(mask_img).polygon(_polygon(frame), fill=255)
    mask = np.asarray(mask_img) > 127
    img = np.ones((H, W, 3))
    _paint_garment(img, mask, frame, style)
    return img, mask


def _save_rgb(arr, path):
    Image.fromarray((np.clip(arr, 0, 1) * 255 + 0.5).astype(np.uint8)).save(path)


def write_dataset(root, n=8, height=256, width=192, seed=0, unpaired=True) -> Path:
    """Write ``n`` persons and their garments in the VITON directory layout.

    ``pairs.txt`` pairs each person with their own garment; ``test_pairs.txt``
    pairs person ``i`` with garment ``i + 1`` when ``unpaired`` is set.
    """
    root = Path(root)
    for sub in ("image", "cloth", "cloth-mask", "image-parse", "pose"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n):
        stem = f"{i:06d}"
        img, labels, kp, style = make_person(rng, height, width)
        cloth, mask = make_cloth(style, height, width)
        _save_rgb(img, root / "image" / f"{stem}_0.png")
        Image.fromarray(labels, mode="L").save(root / "image-parse" / f"{stem}_0.png")
        with open(root / "pose" / f"{stem}_0.json", "w") as fh:
            json.dump(kp.tolist(), fh)
        _save_rgb(cloth, root / "cloth" / f"{stem}_1.png")
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(root / "cloth-mask" / f"{stem}_1.png")
        names.append(stem)
    with open(root / "pairs.txt", "w") as fh:
        for stem in names:
            fh.write(f"{stem}_0.png {stem}_1.png\n")
    with open(root / "test_pairs.txt", "w") as fh:
        for i, stem in enumerate(names):
            other = names[(i + 1) % n] if unpaired else stem
            fh.write(f"{stem}_0.png {other}_1.png\n")
    return root
