"""Stage training, end-to-end try-on inference and evaluation runs."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .dataio import (
    DEFAULT_SIZE,
    TryOnSample,
    VitonDataset,
    collate,
    encode_parsing,
    load_keypoints,
    load_labels,
    load_mask,
    load_rgb,
    save_rgb,
)
from .ltf import TextureFuser
from .metrics import MetricReport, default_backbone, fid, psnr, save_features, ssim
from .pcw import ClothingWarper
from .ppe import ParsingEstimator, compose_nonlimb, export_parsing
from .stage import to_device

logger = logging.getLogger(__name__)

DEVICE_ENV = "LIMBVTON_DEVICE"
STAGES = ("pcw", "ppe", "ltf")
ESTIMATORS = {"pcw": ClothingWarper, "ppe": ParsingEstimator, "ltf": TextureFuser}
INTERMEDIATES = (
    ("pcw_aligned_cloth", "aligned_cloth"),
    ("pcw_warped_cloth", "warped_cloth"),
    ("ppe_nonlimb_parsing", "nonlimb_parsing"),
    ("ppe_target_parsing", "target_parsing"),
    ("ltf_coarse", "coarse"),
    ("ltf_fine", "fine"),
)


class MissingCheckpointError(FileNotFoundError):
    def __init__(self, stage, path):
        super().__init__(f"no checkpoint for stage {stage!r} at {path}")
        self.stage = stage


def resolve_device(device=None) -> str:
    """Explicit argument, else ``$LIMBVTON_DEVICE``, else ``cpu``."""
    return device or os.environ.get(DEVICE_ENV) or "cpu"


def checkpoint_path(directory, stage) -> Path:
    return Path(directory) / f"{stage}.ckpt"


def train(module: str, dataset, config: TrainConfig, out_dir=None, device=None, callback=None):
    """Train one stage on ``dataset``; writes ``<out_dir>/<module>.ckpt`` and ``<module>.log``.

    Returns the fitted estimator.
    """
    if module not in ESTIMATORS:
        raise ValueError(f"module must be one of {STAGES}, got {module!r}")
    if config.module != module:
        raise ValueError(f"config is for {config.module!r}, not {module!r}")
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_file = out / f"{module}.log"
    log_file.write_text("")
    est = ESTIMATORS[module](**config.estimator_params(), device=resolve_device(device))
    est.config_ = config.to_dict()
    est.fit(dataset, log_file=log_file, checkpoint_dir=out, checkpoint_every=config.checkpoint_every,
            callback=callback, deterministic=config.deterministic)
    est.save(checkpoint_path(out, module))
    logger.info("trained %s for %d steps -> %s", module, est.n_steps_, checkpoint_path(out, module))
    return est


@dataclass
class TryOnPipeline:
    """Warping, then parsing, then fusion, with every stage's output kept."""

    warper: ClothingWarper
    parser: ParsingEstimator
    fuser: TextureFuser

    @classmethod
    def from_directory(cls, directory, device=None):
        device = resolve_device(device)
        loaded = {}
        for stage in STAGES:
            path = checkpoint_path(directory, stage)
            if not path.exists():
                raise MissingCheckpointError(stage, path)
            loaded[stage] = ESTIMATORS[stage].load(path, device=device)
        return cls(loaded["pcw"], loaded["ppe"], loaded["ltf"])

    @torch.no_grad()
    def run(self, batch: dict) -> dict:
        device = self.warper.device
        batch = to_device(batch, device)
        warp = self.warper.predict(batch)
        state = dict(batch, warped_cloth=warp["warped_cloth"], warped_mask=warp["warped_mask"])
        state["nonlimb_parsing"] = compose_nonlimb(batch["parsing"], warp["warped_mask"])
        state["target_parsing"] = self.parser.predict(state)["probs"]
        fused = self.fuser.predict(state)
        return {
            "aligned_cloth": warp["aligned_cloth"],
            "warped_cloth": warp["warped_cloth"],
            "warped_mask": warp["warped_mask"],
            "flow": warp["flow"],
            "nonlimb_parsing": state["nonlimb_parsing"],
            "target_parsing": state["target_parsing"],
            "coarse": fused["coarse"],
            "fine": fused["fine"],
        }


def sample_from_files(person, cloth, parse=None, pose=None, cloth_mask=None, size=DEFAULT_SIZE,
                      parse_scheme="lip") -> TryOnSample:
    """Build a sample from image paths; annotations default to the VITON sibling folders."""
    person, cloth = Path(person), Path(cloth)
    root_p, root_c = person.parent.parent, cloth.parent.parent
    parse = Path(parse) if parse else root_p / "image-parse" / f"{person.stem}.png"
    pose = Path(pose) if pose else root_p / "pose" / f"{person.stem}.json"
    cloth_mask = Path(cloth_mask) if cloth_mask else root_c / "cloth-mask" / f"{cloth.stem}.png"
    for label, p in (("parsing", parse), ("pose", pose), ("cloth mask", cloth_mask)):
        if not p.exists():
            raise FileNotFoundError(f"{label} file not found: {p}")
    labels = load_labels(parse, size, parse_scheme)
    return TryOnSample.build(load_rgb(person, size), load_rgb(cloth, size), load_mask(cloth_mask, size),
                             encode_parsing(labels), load_keypoints(pose, size), name=person.stem,
                             cloth_name=cloth.stem)


def write_outputs(outputs: dict, index: int, out_dir, intermediates=False) -> list[Path]:
    """Write ``ltf_fine.png`` (and the other five stage images when asked) for one batch item."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fname, key in INTERMEDIATES:
        if not intermediates and key != "fine":
            continue
        path = out_dir / f"{fname}.png"
        value = outputs[key][index]
        if key.endswith("parsing"):
            export_parsing(value, path)
        else:
            save_rgb(value, path)
        written.append(path)
    return written


def infer(sample: TryOnSample, pipeline: TryOnPipeline, out_dir, intermediates=False) -> dict:
    """Run one sample end to end and write its images; returns the output tensors."""
    outputs = pipeline.run(collate([sample]))
    write_outputs(outputs, 0, out_dir, intermediates)
    return outputs


def report_from_images(names, outputs, targets, backbone=None, features_dir=None) -> MetricReport:
    """SSIM/PSNR per image plus FID between output and target embeddings."""
    if len(names) == 0:
        raise ValueError("nothing to evaluate: the test list is empty")
    report = MetricReport()
    feats_out, feats_ref = [], []
    backbone = backbone or default_backbone()
    for name, x, y in zip(names, outputs, targets):
        report.add(name, ssim(x, y), psnr(x, y))
        feats_out.append(backbone.embed(x.unsqueeze(0).float()).cpu().numpy())
        feats_ref.append(backbone.embed(y.unsqueeze(0).float()).cpu().numpy())
    if len(names) >= 2:
        a, b = np.concatenate(feats_out), np.concatenate(feats_ref)
        report.fid = fid(a, b)
        if features_dir is not None:
            Path(features_dir).mkdir(parents=True, exist_ok=True)
            save_features(Path(features_dir) / "outputs.npy", a)
            save_features(Path(features_dir) / "targets.npy", b)
    return report


@torch.no_grad()
def evaluate(dataset: VitonDataset, pipeline: TryOnPipeline, report_path=None, image_dir=None,
             features_dir=None) -> MetricReport:
    """Try on every pair of ``dataset`` in list order and score ``I_f`` against the person image.

    ``features_dir`` receives the FID embeddings as ``outputs.npy`` / ``targets.npy``.
    """
    if len(dataset) == 0:
        raise ValueError("nothing to evaluate: the test list is empty")
    names, outs, refs = [], [], []
    for i in range(len(dataset)):
        sample = dataset[i]
        result = pipeline.run(collate([sample]))
        name = f"{sample.name}__{sample.cloth_name}"
        if image_dir is not None:
            write_outputs(result, 0, Path(image_dir) / name)
        names.append(name)
        outs.append(result["fine"][0].cpu())
        refs.append(sample.person)
    report = report_from_images(names, outs, refs, features_dir=features_dir)
    if report_path is not None:
        report.write(report_path)
    return report
