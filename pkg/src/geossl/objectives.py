"""Loss functions: NT-Xent, BYOL, parameter regression, invariant variant, combined."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

_NORM_EPS = 1e-12


class NormalizationError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms <= _NORM_EPS).any()):
        raise NormalizationError("cannot normalize a zero-norm embedding")
    return x / norms


def nt_xent(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """SimCLR loss averaged over all 2N anchors; the positive of row i is its other view."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if z1.shape != z2.shape or z1.ndim != 2 or z1.shape[0] < 1:
        raise ValueError(f"expected two matching NxK batches, got {tuple(z1.shape)} and {tuple(z2.shape)}")
    n = z1.shape[0]
    z = _unit_rows(torch.cat([z1, z2], dim=0))
    logits = z @ z.T / temperature
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    positives = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(logits, positives)


def byol_loss(prediction: torch.Tensor, target_projection: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``2 - 2 cos(p, t)``; the target is detached."""
    p = _unit_rows(prediction)
    t = _unit_rows(target_projection.detach())
    return (2.0 - 2.0 * (p * t).sum(dim=1)).mean()


def symmetric_byol_loss(p1, p2, t1, t2) -> torch.Tensor:
    """Average of both view orderings: ``p1`` against ``t2`` and ``p2`` against ``t1``."""
    return 0.5 * (byol_loss(p1, t2) + byol_loss(p2, t1))


def logcosh(x: torch.Tensor) -> torch.Tensor:
    a = x.abs()
    return a + torch.log1p(torch.exp(-2.0 * a)) - math.log(2.0)


def param_regression_loss(estimate: torch.Tensor, truth: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(estimate.shape)} vs {tuple(truth.shape)}")
    err = estimate - truth
    if kind == "mse":
        return (err**2).mean()
    if kind == "logcosh":
        return logcosh(err).mean()
    raise ValueError(f"unknown regression loss {kind!r}")


def invariant_variant_loss(l1: torch.Tensor, l1_prime: torch.Tensor) -> torch.Tensor:
    """MSE between the latents of x1 and x1'; pushes f towards invariance to B2."""
    if l1.shape != l1_prime.shape:
        raise ValueError(f"shape mismatch {tuple(l1.shape)} vs {tuple(l1_prime.shape)}")
    return ((l1 - l1_prime) ** 2).mean()


@dataclass(frozen=True)
class LossReport:
    l1_contrastive: float
    l2_regression: float
    total: float
    weight_lambda: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def combined_loss(contrastive, regression, lam: float = 1.0) -> LossReport:
    l1 = _scalar(contrastive)
    l2 = _scalar(regression)
    total = l1 + lam * l2
    if not all(math.isfinite(v) for v in (l1, l2, total)):
        raise DivergenceError(
            "non-finite loss", {"l1_contrastive": l1, "l2_regression": l2, "lambda": lam}
        )
    return LossReport(l1, l2, total, lam)
