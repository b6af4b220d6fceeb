"""UDA-style objectives: training-signal annealing, confidence masking, consistency and entropy terms."""
from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

TSA_SCHEDULES = ("linear", "log", "exp", "disabled")
# thresholds above 1 can never be exceeded by a probability
DISABLED_THRESHOLD = 1.5


@dataclass(frozen=True)
class SslConfig:
    lambda_: float = 0.5
    tsa_schedule: str = "log"
    tsa_literal: bool = False
    eta_cbm_default: float = 0.75
    # keys are class indices, class names or fnmatch patterns such as "cardiac_*"
    eta_cbm_per_class: dict = field(default_factory=dict)
    temperature: float = 0.8
    entropy_weight: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError(f"ssl.lambda must lie in [0, 1], got {self.lambda_}")
        if self.tsa_schedule not in TSA_SCHEDULES:
            raise ValueError(f"ssl.tsa_schedule must be one of {TSA_SCHEDULES}, got {self.tsa_schedule!r}")
        if not self.temperature > 0:
            raise ValueError(f"ssl.temperature must be positive, got {self.temperature}")
        if self.entropy_weight < 0:
            raise ValueError(f"ssl.entropy_weight must be non-negative, got {self.entropy_weight}")
        for key, value in [("default", self.eta_cbm_default), *self.eta_cbm_per_class.items()]:
            if value < 0:
                raise ValueError(f"ssl.eta_cbm threshold for {key!r} must be non-negative, got {value}")

    @property
    def unsupervised_active(self) -> bool:
        return self.lambda_ > 0 or self.entropy_weight > 0

    def thresholds(self, class_names) -> np.ndarray:
        """Per-class CBM thresholds; later keys override earlier ones."""
        names = list(class_names)
        out = np.full(len(names), self.eta_cbm_default, dtype=np.float64)
        for key, value in self.eta_cbm_per_class.items():
            if isinstance(key, int) or (isinstance(key, str) and key.isdigit()):
                idx = int(key)
                if not 0 <= idx < len(names):
                    raise ValueError(f"eta_cbm_per_class index {idx} out of range")
                out[idx] = value
                continue
            hits = [i for i, n in enumerate(names) if fnmatch.fnmatchcase(n, key)]
            if not hits:
                raise ValueError(f"eta_cbm_per_class key {key!r} matches no class")
            out[hits] = value
        return out

    def to_dict(self) -> dict:
        return {
            "lambda": self.lambda_,
            "tsa_schedule": self.tsa_schedule,
            "tsa_literal": self.tsa_literal,
            "eta_cbm_default": self.eta_cbm_default,
            "eta_cbm_per_class": dict(self.eta_cbm_per_class),
            "temperature": self.temperature,
            "entropy_weight": self.entropy_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SslConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True)
class StepContext:
    step: int
    total_steps: int
    num_classes: int

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.step <= self.total_steps:
            raise ValueError(f"step {self.step} outside [0, {self.total_steps}]")


# exp(-5): the raw log/exp curves miss one endpoint by this much
_TSA_GAP = math.exp(-5.0)


def tsa_threshold(ctx: StepContext, schedule: str) -> float:
    """Threshold growing from exactly 1/C at step 0 to exactly 1 at the last step.

    The log and exp curves ``1 - exp(-5t/T)`` and ``exp(5(t/T - 1))`` are
    rescaled affinely onto [0, 1] so that both endpoints are exact.
    """
    c = ctx.num_classes
    frac = ctx.step / ctx.total_steps
    if schedule == "linear":
        alpha = frac
    elif schedule == "log":
        alpha = (1.0 - math.exp(-5.0 * frac)) / (1.0 - _TSA_GAP)
    elif schedule == "exp":
        alpha = (math.exp(5.0 * (frac - 1.0)) - _TSA_GAP) / (1.0 - _TSA_GAP)
    elif schedule == "disabled":
        return 1.0
    else:
        raise ValueError(f"unknown TSA schedule {schedule!r}")
    if frac == 1.0:
        return 1.0
    return alpha * (1.0 - 1.0 / c) + 1.0 / c


def tsa_mask(probs, labels, eta_tsa: float, literal: bool = False) -> np.ndarray:
    """Rows whose true-class probability has not yet passed the threshold.

    ``literal=True`` flips the comparison to keep rows with ``p(y*) > eta``.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    truth = p[np.arange(len(labels)), labels]
    eta = np.asarray(eta_tsa, dtype=p.dtype)
    return truth > eta if literal else truth <= eta


def cbm_mask(probs_orig, cfg: SslConfig, thresholds=None) -> np.ndarray:
    """Rows whose top probability exceeds the threshold of the predicted class."""
    p = probs_orig.data if isinstance(probs_orig, Tensor) else np.asarray(probs_orig)
    if thresholds is None:
        # without class names only integer keys can resolve
        thresholds = cfg.thresholds([str(i) for i in range(p.shape[1])])
    top = p.argmax(axis=1)
    return p[np.arange(len(p)), top] > np.asarray(thresholds)[top]


def consistency_loss(logits_orig: Tensor, logits_aug: Tensor, cfg: SslConfig, thresholds=None) -> Tensor:
    """Masked KL(sharpened original || augmented); the original branch is gradient-stopped."""
    if logits_orig.shape != logits_aug.shape:
        raise ValueError(f"logit shapes differ: {logits_orig.shape} vs {logits_aug.shape}")
    target = T.softmax(logits_orig.detach(), temperature=cfg.temperature)
    keep = cbm_mask(T.softmax(logits_orig.detach()), cfg, thresholds)
    return T.kl_divergence(target, T.softmax(logits_aug), mask=keep)


def total_loss(sup_ce: Tensor, consistency: Tensor | None, ent: Tensor | None, cfg: SslConfig | None) -> Tensor:
    """``sup + lambda * consistency + entropy_weight * entropy``; supervised-only when cfg is None."""
    if cfg is None:
        return sup_ce
    loss = sup_ce
    if consistency is not None and cfg.lambda_:
        loss = loss + consistency * cfg.lambda_
    if ent is not None and cfg.entropy_weight:
        loss = loss + ent * cfg.entropy_weight
    return loss
