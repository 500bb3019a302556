"""Training configuration, learning-rate schedule and the flat ``key = value`` config format."""
from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, fields, replace

MODULES = ("pcw", "ppe", "ltf")
FULL_STEPS = {"pcw": 60_000, "ppe": 80_000, "ltf": 80_000}
DESK_DIVISOR = 100


@dataclass(frozen=True)
class TrainConfig:
    module: str = "pcw"
    steps: int = FULL_STEPS["pcw"]
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 1000
    deterministic: bool = True
    height: int = 256
    width: int = 192
    data_root: str = ""
    pairs: str = "pairs.txt"
    out_dir: str = "runs"
    # warping
    lambda_gra: float = 1.0
    lambda_vgg: float = 8.0
    lambda_tv: float = 0.1
    tv_eps: float = 1e-6
    gravity_floor: float = 0.0
    # parsing
    class_weights: tuple = (1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 1.0)
    # fusion
    lambda_img: float = 1.0
    lambda_p: float = 2.0
    lambda_edge: float = 0.4
    patch_scale: int = 8
    # shared
    perceptual_weights: tuple = (1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0)
    base_channels: int = 16

    def __post_init__(self):
        if self.module not in MODULES:
            raise ValueError(f"module must be one of {MODULES}, got {self.module!r}")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")

    @property
    def betas(self):
        return (self.beta1, self.beta2)

    def to_dict(self) -> dict:
        return asdict(self)

    def estimator_params(self) -> dict:
        """Keyword arguments for the stage estimator of ``self.module``."""
        common = dict(steps=self.steps, batch_size=self.batch_size, lr=self.lr, betas=self.betas, seed=self.seed,
                      base_channels=self.base_channels)
        if self.module == "pcw":
            return dict(common, lambda_gra=self.lambda_gra, lambda_vgg=self.lambda_vgg, lambda_tv=self.lambda_tv,
                        tv_eps=self.tv_eps, gravity_floor=self.gravity_floor,
                        perceptual_weights=self.perceptual_weights)
        if self.module == "ppe":
            return dict(common, class_weights=self.class_weights)
        return dict(common, lambda_img=self.lambda_img, lambda_p=self.lambda_p, lambda_edge=self.lambda_edge,
                    patch_scale=self.patch_scale, perceptual_weights=self.perceptual_weights)


def default_config(module="pcw", profile="desk", **overrides) -> TrainConfig:
    """Defaults per stage. ``profile="full"`` keeps the full step counts; ``"desk"`` divides them by 100."""
    if profile not in ("desk", "full"):
        raise ValueError(f"unknown profile {profile!r}")
    steps = FULL_STEPS[module] // (DESK_DIVISOR if profile == "desk" else 1)
    every = max(steps // 10, 1)
    return replace(TrainConfig(module=module, steps=steps, checkpoint_every=every), **overrides)


def lr_at(step: int, total_steps: int, base_lr: float = 1e-4) -> float:
    """Constant for the first half of training, then linear decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    half = total_steps / 2
    if step < half:
        return base_lr
    return base_lr * (1.0 - (step - half) / half)


def _parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys may be dotted."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = _parse_value(value)
    return out


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def config_from_mapping(mapping: dict, module=None, profile="desk") -> TrainConfig:
    """Build a config from flat keys.

    Plain keys apply to every stage; ``<stage>.key`` applies only when ``<stage>``
    is being trained (e.g. ``ppe.steps = 500``). ``train.key`` is an alias for a
    plain key.
    """
    module = module or mapping.get("module") or mapping.get("train.module") or "pcw"
    profile = mapping.get("profile", profile)
    values = {}
    for key, value in mapping.items():
        scope, _, name = key.rpartition(".")
        if scope and scope not in ("train", module):
            if scope in MODULES:
                continue
            raise KeyError(f"unknown config scope {scope!r} in {key!r}")
        if name in ("module", "profile"):
            continue
        if name not in _FIELDS:
            raise KeyError(f"unknown config key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        values[name] = value
    base = default_config(module, profile)
    if "steps" in values and "checkpoint_every" not in values:
        values["checkpoint_every"] = max(int(values["steps"]) // 10, 1)
    return replace(base, **values)


def load_config(path, module=None) -> TrainConfig:
    with open(path) as fh:
        return config_from_mapping(parse_config_text(fh.read()), module)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in cfg.to_dict().items())
