"""Soft proposal layer: random-walk objectness over feature-map positions.

Features ``U`` are ``(K, H, W)`` or batched ``(B, K, H, W)`` tensors. The
transition graph links grid positions within ``radius`` of each other,
weighted by feature dissimilarity times a spatial Gaussian. Its stationary
distribution, found by power iteration, is the proposal map ``M`` which is
multiplied back into every channel of ``U``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import NumericError

KERNELS = ("dissimilarity", "similarity")


@dataclass(frozen=True)
class SPConfig:
    epsilon: Optional[float] = None  # None -> 0.15 * max(H, W)
    radius: int = 3
    tol: float = 1e-6
    max_iter: int = 50
    kernel: str = "dissimilarity"

    def resolved_epsilon(self, h: int, w: int) -> float:
        return self.epsilon if self.epsilon is not None else 0.15 * max(h, w)

    def validate(self) -> "SPConfig":
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("sp.epsilon must be positive")
        if self.radius < 1:
            raise ValueError("sp.radius must be >= 1")
        if not self.tol > 0:
            raise ValueError("sp.tol must be positive")
        if self.max_iter < 1:
            raise ValueError("sp.max_iter must be >= 1")
        if self.kernel not in KERNELS:
            raise ValueError(f"sp.kernel must be one of {KERNELS}")
        return self


@lru_cache(maxsize=32)
def _grid_geometry(h: int, w: int, radius: int):
    """Squared grid distances, neighbourhood mask and full-disc size."""
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    mask = d2 <= radius * radius
    off = np.arange(-radius, radius + 1)
    disc = int(((off[:, None] ** 2 + off[None, :] ** 2) <= radius * radius).sum())
    return d2, mask, disc


def fallback_rows(h: int, w: int, radius: int) -> np.ndarray:
    """Uniform walk over each position's full neighbourhood disc.

    Every neighbour gets ``1/S`` with ``S`` the disc size; offsets that fall
    off the grid return their mass to the position itself. The matrix is
    symmetric, hence doubly stochastic.
    """
    _, mask, disc = _grid_geometry(h, w, radius)
    p = mask / float(disc)
    np.fill_diagonal(p, 0.0)
    p[np.diag_indices_from(p)] = 1.0 - p.sum(1)
    return p


def _as_batch(U):
    U = torch.as_tensor(U)
    if U.dim() == 3:
        return U.unsqueeze(0), True
    if U.dim() == 4:
        return U, False
    raise ValueError(f"feature map must be (K,H,W) or (B,K,H,W), got {tuple(U.shape)}")


def build_transition(U, epsilon: Optional[float] = None, radius: int = 3,
                     kernel: str = "dissimilarity") -> torch.Tensor:
    """Row-stochastic ``(N, N)`` (or ``(B, N, N)``) transition matrix."""
    Ub, single = _as_batch(U)
    if not torch.isfinite(Ub).all():
        raise NumericError("feature map contains non-finite values")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    b, k, h, w = Ub.shape
    eps = 0.15 * max(h, w) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    d2, mask, _ = _grid_geometry(h, w, radius)
    spatial = np.where(mask, np.exp(-d2 / (2 * eps * eps)), 0.0)
    spatial = torch.as_tensor(spatial, dtype=Ub.dtype, device=Ub.device)

    flat = Ub.detach().reshape(b, k, h * w).transpose(1, 2)
    dist = torch.cdist(flat, flat, compute_mode="donot_use_mm_for_euclid_dist")
    if kernel == "dissimilarity":
        feat = dist
    elif kernel == "similarity":
        feat = torch.exp(-dist)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    weights = feat * spatial
    rowsum = weights.sum(-1, keepdim=True)
    dead = rowsum <= 0
    P = weights / torch.where(dead, torch.ones_like(rowsum), rowsum)
    if dead.any():
        fb = torch.as_tensor(fallback_rows(h, w, radius), dtype=Ub.dtype, device=Ub.device)
        P = torch.where(dead, fb.expand_as(P), P)
    return P[0] if single else P


@dataclass
class Propagation:
    proposal: torch.Tensor  # (N,) or (B, N); reshaped by callers that know H, W
    converged: torch.Tensor  # bool, per item
    iterations: int
    residual: torch.Tensor  # last L1 step size, per item


def propagate(P, tol: float = 1e-6, max_iter: int = 50) -> Propagation:
    """Stationary distribution of a row-stochastic matrix by power iteration.

    Starts from the uniform distribution and applies ``M <- P^T M`` until
    the L1 change drops below ``tol`` for every item, or ``max_iter`` steps.
    """
    P = torch.as_tensor(P)
    single = P.dim() == 2
    Pb = P.unsqueeze(0) if single else P
    if Pb.dim() != 3 or Pb.shape[1] != Pb.shape[2]:
        raise ValueError(f"transition matrix must be square, got {tuple(P.shape)}")
    b, n, _ = Pb.shape
    M = torch.full((b, n), 1.0 / n, dtype=Pb.dtype, device=Pb.device)
    delta = torch.zeros(b, dtype=Pb.dtype, device=Pb.device)
    steps = 0
    for steps in range(1, max_iter + 1):
        nxt = torch.bmm(M.unsqueeze(1), Pb).squeeze(1)
        delta = (nxt - M).abs().sum(-1)
        M = nxt
        if bool((delta < tol).all()):
            break
    M = M / M.sum(-1, keepdim=True)
    converged = delta < tol
    if single:
        return Propagation(M[0], converged[0], steps, delta[0])
    return Propagation(M, converged, steps, delta)


def couple(U, M) -> torch.Tensor:
    """Weight every channel of ``U`` by the proposal map ``M``."""
    U = torch.as_tensor(U)
    M = torch.as_tensor(M)
    if U.shape[-2:] != M.shape[-2:]:
        raise ValueError(f"spatial size mismatch: {tuple(U.shape)} vs {tuple(M.shape)}")
    if U.dim() == 4 and M.dim() == 3:
        if U.shape[0] != M.shape[0]:
            raise ValueError("batch size mismatch between features and proposal")
        return U * M.unsqueeze(1)
    if M.dim() != 2:
        raise ValueError(f"proposal must be (H,W) or (B,H,W), got {tuple(M.shape)}")
    return U * M


def sp_forward(U, cfg: SPConfig = SPConfig(), proposal=None):
    """Coupled features and proposal map.

    The random walk is not differentiated: ``M`` is computed from detached
    features, so gradients reach ``U`` only through the coupling product.
    Passing ``proposal`` skips the walk and couples with the given map.

    Returns ``(V, M, info)`` where ``info`` is the :class:`Propagation` (or
    None when ``proposal`` was supplied).
    """
    Ub, single = _as_batch(U)
    b, _, h, w = Ub.shape
    info = None
    if proposal is None:
        with torch.no_grad():
            P = build_transition(Ub.detach(), cfg.resolved_epsilon(h, w), cfg.radius, cfg.kernel)
            info = propagate(P, cfg.tol, cfg.max_iter)
        M = info.proposal.reshape(b, h, w)
    else:
        M = torch.as_tensor(proposal, dtype=Ub.dtype, device=Ub.device).reshape(b, h, w).detach()
    V = couple(Ub, M)
    if single:
        return V[0], M[0], info
    return V, M, info


class SoftProposal(nn.Module):
    """Module form of :func:`sp_forward`; remembers the last proposal map."""

    def __init__(self, cfg: SPConfig = SPConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        self.last_proposal: Optional[torch.Tensor] = None
        self.last_info: Optional[Propagation] = None

    def forward(self, U, proposal=None):
        V, M, info = sp_forward(U, self.cfg, proposal)
        self.last_proposal, self.last_info = M, info
        return V, M


def _softplus(x: torch.Tensor) -> torch.Tensor:
    # log(1 + e^x) without overflow for large |x|
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-x.abs()))


def multilabel_soft_margin_loss(x, y, reduction: str = "mean") -> torch.Tensor:
    """One-vs-all logistic loss summed over classes.

    ``-sum_i y_i log sigmoid(x_i) + (1 - y_i) log(1 - sigmoid(x_i))`` in the
    stable form ``y_i softplus(-x_i) + (1 - y_i) softplus(x_i)``. For ``(B, C)``
    inputs the per-sample sums are averaged (``reduction="mean"``), summed
    (``"sum"``) or returned as is (``"none"``).
    """
    x = torch.as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.to(torch.get_default_dtype())
    y = torch.as_tensor(y, device=x.device)
    if x.shape != y.shape:
        raise ValueError(f"score/target shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 0 or x.shape[-1] < 1:
        raise ValueError("need at least one class")
    if not bool(((y == 0) | (y == 1)).all()):
        raise ValueError("targets must be binary")
    if not torch.isfinite(x).all():
        raise NumericError("non-finite class scores")
    y = y.to(x.dtype)
    per = (y * _softplus(-x) + (1 - y) * _softplus(x)).sum(-1)
    if x.dim() == 1 or reduction == "none":
        return per
    if reduction == "mean":
        return per.mean()
    if reduction == "sum":
        return per.sum()
    raise ValueError(f"unknown reduction {reduction!r}")
