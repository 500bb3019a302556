"""Common estimator machinery for the three trainable stages."""
from __future__ import annotations

import contextlib
import logging
from pathlib import Path

import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import lr_at

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss becomes NaN or infinite; the offending batch is dumped."""


def to_device(batch: dict, device) -> dict:
    return {k: v.to(device) if isinstance(v, torch.Tensor) else v for k, v in batch.items()}


def iterate_batches(samples, batch_size, seed):
    """Endless reshuffled batches over an indexable dataset, deterministic for a seed."""
    from .dataio import collate

    gen = torch.Generator().manual_seed(seed)
    n = len(samples)
    if n == 0:
        raise ValueError("dataset is empty")
    while True:
        order = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield collate([samples[i] for i in idx])


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def format_log_line(step, lr, terms) -> str:
    parts = [f"step={step}", f"lr={lr:.6e}"] + [f"{k}={float(torch.as_tensor(v).detach()):.6f}" for k, v in terms.items()]
    return " ".join(parts)


class StageEstimator(BaseEstimator):
    """Base class: subclasses define ``build_network`` and ``loss_terms``.

    Hyperparameters are constructor arguments (so ``get_params``/``set_params``
    and ``sklearn.base.clone`` work); the trained network is ``network_``.
    """

    stage = ""

    def build_network(self):
        raise NotImplementedError

    def loss_terms(self, network, batch) -> dict:
        raise NotImplementedError

    def training_batch(self, batch: dict) -> dict:
        """Hook for substituting ground truth for upstream-stage outputs."""
        return batch

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError(f"this {type(self).__name__} is not fitted yet; call fit or load a checkpoint")

    def init_network(self):
        torch.manual_seed(self.seed)
        self.network_ = self.build_network().to(self.device)
        self.n_steps_ = 0
        self.history_ = []
        return self

    def fit(self, X, y=None, *, steps=None, log_file=None, checkpoint_dir=None, checkpoint_every=None,
            callback=None, deterministic=True, warm_start=False):
        """Train on an indexable dataset of :class:`~limbvton.dataio.TryOnSample`.

        ``callback(step, estimator, terms)`` may return ``True`` to stop early.
        Each step appends a ``step=.. lr=.. total=..`` line to ``log_file``.
        """
        total_steps = int(steps or self.steps)
        if not (warm_start and hasattr(self, "network_")):
            self.init_network()
        net = self.network_
        optimizer = torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=self.lr,
                                     betas=tuple(self.betas))
        batches = iterate_batches(X, self.batch_size, self.seed)
        log = open(log_file, "a") if log_file else None
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        try:
            with deterministic_mode(deterministic):
                for step in range(total_steps):
                    net.train()  # callbacks may have switched to eval
                    lr = lr_at(step, total_steps, self.lr)
                    for group in optimizer.param_groups:
                        group["lr"] = lr
                    batch = self.training_batch(to_device(next(batches), self.device))
                    terms = self.loss_terms(net, batch)
                    loss = terms["total"]
                    if not torch.isfinite(loss):
                        self._dump(batch, step, checkpoint_dir)
                        raise TrainingDivergedError(f"non-finite loss at step {step}: {format_log_line(step, lr, terms)}")
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    self.n_steps_ += 1
                    scalars = {k: float(v.detach()) for k, v in terms.items()}
                    line = format_log_line(self.n_steps_, lr, scalars)
                    self.history_.append(scalars)
                    if log:
                        log.write(line + "\n")
                    logger.debug(line)
                    every = checkpoint_every or max(total_steps // 10, 1)
                    if checkpoint_dir is not None and (self.n_steps_ % every == 0 or step == total_steps - 1):
                        self.save(Path(checkpoint_dir) / f"{self.stage}.ckpt")
                    if callback is not None and callback(self.n_steps_, self, scalars):
                        break
        finally:
            if log:
                log.close()
            net.eval()
        return self

    def _dump(self, batch, step, directory):
        path = Path(directory or ".") / f"{self.stage}_nan_batch_step{step}.pt"
        torch.save({k: v.detach().cpu() if isinstance(v, torch.Tensor) else v for k, v in batch.items()}, path)
        logger.error("non-finite loss at step %d; batch written to %s", step, path)

    @torch.no_grad()
    def predict(self, batch: dict) -> dict:
        """Run the trained network on a batch dict (see :func:`limbvton.dataio.collate`)."""
        self._check_fitted()
        self.network_.eval()
        return self.network_(to_device(batch, self.device))

    @torch.no_grad()
    def score(self, X, y=None) -> float:
        """Negative mean training loss over ``X`` (higher is better)."""
        self._check_fitted()
        from .dataio import collate

        self.network_.eval()
        losses = []
        for start in range(0, len(X), self.batch_size):
            batch = collate([X[i] for i in range(start, min(start + self.batch_size, len(X)))])
            batch = self.training_batch(to_device(batch, self.device))
            losses.append(float(self.loss_terms(self.network_, batch)["total"]))
        return -sum(losses) / len(losses)

    def save(self, path) -> Path:
        self._check_fitted()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        params = self.get_params()
        params.pop("device", None)
        torch.save({"format_version": CHECKPOINT_VERSION, "stage": self.stage, "params": params,
                    "config": getattr(self, "config_", None), "step": self.n_steps_,
                    "state_dict": self.network_.state_dict()}, path)
        return path

    @classmethod
    def load(cls, path, device="cpu"):
        ckpt = torch.load(path, map_location=device, weights_only=False)
        if ckpt.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('format_version')}")
        if ckpt.get("stage") != cls.stage:
            raise ValueError(f"{path}: checkpoint is for stage {ckpt.get('stage')!r}, not {cls.stage!r}")
        est = cls(**ckpt["params"], device=device)
        est.network_ = est.build_network().to(device)
        est.network_.load_state_dict(ckpt["state_dict"])
        est.network_.eval()
        est.n_steps_ = ckpt["step"]
        est.config_ = ckpt.get("config")
        est.history_ = []
        return est
