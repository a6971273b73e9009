"""Loss terms, their lambda-weighted combination and the MSE -> NLL schedule.

Every function accepts torch tensors (and keeps the autograd graph) or numpy
arrays. Reductions are means over every leading batch axis and over steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .data import GaussianTrajectory, ManeuverDistribution, ManeuverLabel, PredictionOutput

LOG_2PI = math.log(2 * math.pi)
PROB_CLAMP = 1e-12

ArrayLike = Union[torch.Tensor, np.ndarray]


@dataclass(frozen=True)
class LossConfig:
    lambda_: float = 1.0
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    def to_dict(self) -> dict:
        return {"lambda": self.lambda_, "warmup_epochs": self.warmup_epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)

    def phase(self, epoch: int) -> str:
        return "mse" if epoch < self.warmup_epochs else "nll"


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def mse_loss(pred_means: ArrayLike, truth: ArrayLike) -> torch.Tensor:
    """Mean over steps (and batch) of the squared Euclidean position error."""
    pred_means, truth = _t(pred_means), _t(truth)
    if pred_means.shape != truth.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_means.shape)} vs {tuple(truth.shape)}")
    return ((pred_means - truth) ** 2).sum(-1).mean()


def nll_loss(params: Union[ArrayLike, GaussianTrajectory], truth: ArrayLike) -> torch.Tensor:
    """Mean negative log-likelihood of ``truth`` under per-step diagonal Gaussians.

    ``params`` has trailing shape (F, 4) = (mu_x, mu_y, sigma_x, sigma_y).
    """
    if isinstance(params, GaussianTrajectory):
        params = np.stack([params.mu_x, params.mu_y, params.sigma_x, params.sigma_y], axis=-1)
    params, truth = _t(params), _t(truth)
    if params.shape[:-1] != truth.shape[:-1] or params.shape[-1] != 4 or truth.shape[-1] != 2:
        raise ValueError(f"shape mismatch: {tuple(params.shape)} vs {tuple(truth.shape)}")
    mu, sigma = params[..., :2], params[..., 2:]
    if bool((sigma <= 0).any()):
        raise ValueError("standard deviations must be positive")
    z = (truth - mu) / sigma
    per_step = LOG_2PI + torch.log(sigma).sum(-1) + 0.5 * (z ** 2).sum(-1)
    return per_step.mean()


def maneuver_ce(p_lateral: Union[ArrayLike, ManeuverDistribution], p_longitudinal=None,
                lateral=None, longitudinal=None) -> torch.Tensor:
    """Summed lateral + longitudinal cross-entropy, averaged over the batch.

    Call as ``maneuver_ce(dist, label)`` with value objects, or with
    probability tensors (B, 3) and integer label tensors (B,).
    """
    if isinstance(p_lateral, ManeuverDistribution):
        dist, label = p_lateral, p_longitudinal
        if not isinstance(label, ManeuverLabel):
            raise TypeError("expected a ManeuverLabel")
        p_lateral, p_longitudinal = dist.p_lateral[None], dist.p_longitudinal[None]
        lateral, longitudinal = [int(label.lateral)], [int(label.longitudinal)]
    p_la, p_lo = _t(p_lateral), _t(p_longitudinal)
    la = torch.as_tensor(lateral, dtype=torch.long).reshape(-1, 1)
    lo = torch.as_tensor(longitudinal, dtype=torch.long).reshape(-1, 1)
    ce_la = -torch.log(p_la.reshape(-1, 3).gather(1, la).clamp_min(PROB_CLAMP))
    ce_lo = -torch.log(p_lo.reshape(-1, 3).gather(1, lo).clamp_min(PROB_CLAMP))
    return (ce_la + ce_lo).mean()


def combined_loss(l_traj, l_man, cfg: LossConfig):
    return l_traj + cfg.lambda_ * l_man


def trajectory_loss_for_epoch(epoch: int, cfg: LossConfig, output, truth, label=None) -> torch.Tensor:
    """MSE on the ground-truth mode during warm-up, NLL on that mode afterwards.

    ``output`` is either a ``PredictionOutput`` (then ``label`` picks the mode)
    or a tensor of shape (B, F, 4) already holding the ground-truth mode.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if isinstance(output, PredictionOutput):
        g = output.modes[label.index]
        output = np.stack([g.mu_x, g.mu_y, g.sigma_x, g.sigma_y], axis=-1)
    output = _t(output)
    if cfg.phase(epoch) == "mse":
        return mse_loss(output[..., :2], truth)
    return nll_loss(output, truth)


def model_losses(out: dict, batch: dict, epoch: int, cfg: LossConfig):
    """(trajectory loss, maneuver loss) for a forward pass decoded on the true modes.

    The maneuver loss is None for models without intention heads.
    """
    traj = out["traj"][:, 0]
    l_traj = trajectory_loss_for_epoch(epoch, cfg, traj, batch["future"])
    if "p_lat" not in out:
        return l_traj, None
    return l_traj, maneuver_ce(out["p_lat"], out["p_lon"], batch["lat"], batch["lon"])
