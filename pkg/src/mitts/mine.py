"""Donsker-Varadhan mutual-information lower bound with a trainable critic.

The critic scores an (emotion, timbre) embedding pair; averaging scores on
joint pairs and log-mean-exp on shuffled (product-of-marginals) pairs gives
a lower bound on their mutual information.  A closed-form Gaussian oracle
is included so the whole estimator can be verified end to end.

The critic update direction follows the usual neural-estimation scheme:
gradient ascent on the bound for the critic itself, while the downstream
training loss penalizes the (ReLU-clamped) bound value to push the two
embeddings toward independence.  No moving-average bias correction is
applied to the critic gradient: the penalty drives the bound toward zero,
where the correction is negligible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from mitts.errors import ValidationError


@dataclass
class MIEstimate:
    """One evaluation of the bound on a batch of pairs (values in nats)."""

    value: float
    joint_mean: float
    log_marginal_mean_exp: float
    batch_size: int


class MIEstimator(nn.Module):
    """Critic network over (emotion, timbre) pairs.

    Each input runs through its own fully-connected layer with ELU; the two
    branches are concatenated and scored by a three-layer head (ELU after
    the first two layers, scalar output).
    """

    def __init__(self, emotion_dim: int, timbre_dim: int, hidden: int = 128, lr: float = 1e-4):
        super().__init__()
        self.branch_emotion = nn.Linear(emotion_dim, hidden)
        self.branch_timbre = nn.Linear(timbre_dim, hidden)
        self.head = nn.Sequential(
            nn.Linear(2 * hidden, hidden),
            nn.ELU(),
            nn.Linear(hidden, hidden),
            nn.ELU(),
            nn.Linear(hidden, 1),
        )
        self.act = nn.ELU()
        self.optimizer = torch.optim.Adam(self.parameters(), lr=lr)

    def score(self, emotion: torch.Tensor, timbre: torch.Tensor) -> torch.Tensor:
        """T(y, z) for a batch of pairs; returns shape (B,)."""
        hy = self.act(self.branch_emotion(emotion))
        hz = self.act(self.branch_timbre(timbre))
        return self.head(torch.cat([hy, hz], dim=-1)).squeeze(-1)

    def dv_bound(self, emotion: torch.Tensor, timbre: torch.Tensor, shuffled_timbre: torch.Tensor) -> torch.Tensor:
        """Differentiable lower bound: mean joint score minus log-mean-exp of
        marginal scores (max-shifted for stability)."""
        t_joint = self.score(emotion, timbre)
        t_marginal = self.score(emotion, shuffled_timbre)
        b = t_marginal.shape[0]
        lme = torch.logsumexp(t_marginal, dim=0) - math.log(b)
        return t_joint.mean() - lme

    def update(self, emotion: torch.Tensor, timbre: torch.Tensor, seed: int) -> float:
        """One ascent step on the bound.  Inputs are detached so the step can
        never move parameters upstream of the embeddings."""
        emotion = emotion.detach()
        timbre = timbre.detach()
        shuffled = timbre[make_marginal_permutation(timbre.shape[0], seed)]
        bound = self.dv_bound(emotion, timbre, shuffled)
        if not torch.isfinite(bound):
            raise FloatingPointError("mutual-information bound became non-finite during critic update")
        self.optimizer.zero_grad()
        (-bound).backward()
        self.optimizer.step()
        return float(bound.detach())

    def estimate(self, emotion: torch.Tensor, timbre: torch.Tensor, seed: int = 0) -> MIEstimate:
        """Evaluate the bound without touching parameters."""
        with torch.no_grad():
            shuffled = timbre[make_marginal_permutation(timbre.shape[0], seed)]
            t_joint = self.score(emotion, timbre)
            t_marginal = self.score(emotion, shuffled)
        return estimate_from_scores(t_joint, t_marginal)


def estimate_from_scores(t_joint: torch.Tensor, t_marginal: torch.Tensor) -> MIEstimate:
    """Assemble the bound from raw critic scores."""
    if t_joint.ndim != 1 or t_marginal.ndim != 1:
        raise ValidationError("scores must be 1-D batches")
    b = t_marginal.shape[0]
    if b < 2:
        raise ValidationError("need at least two pairs to form marginal samples")
    if not (torch.isfinite(t_joint).all() and torch.isfinite(t_marginal).all()):
        raise FloatingPointError("non-finite critic scores")
    joint_mean = float(t_joint.double().mean())
    lme = float(torch.logsumexp(t_marginal.double(), dim=0) - math.log(b))
    if not (math.isfinite(joint_mean) and math.isfinite(lme)):
        raise FloatingPointError("mutual-information bound overflowed")
    return MIEstimate(
        value=joint_mean - lme,
        joint_mean=joint_mean,
        log_marginal_mean_exp=lme,
        batch_size=int(t_joint.shape[0]),
    )


def make_marginal_permutation(batch_size: int, seed: int) -> torch.Tensor:
    """Seeded permutation with no fixed points, for building product-of-
    marginals pairs by shuffling one side of the batch."""
    if batch_size < 2:
        raise ValidationError("batch_size must be >= 2 to build marginal pairs")
    rng = np.random.default_rng([abs(int(seed)), 29])
    perm = rng.permutation(batch_size)
    fixed = np.flatnonzero(perm == np.arange(batch_size))
    if len(fixed) == 1:
        j = (fixed[0] + 1) % batch_size
        perm[[fixed[0], j]] = perm[[j, fixed[0]]]
    elif len(fixed) > 1:
        perm[fixed] = perm[np.roll(fixed, 1)]
    return torch.as_tensor(perm, dtype=torch.int64)


def make_marginal(timbre: torch.Tensor, seed: int) -> torch.Tensor:
    """Shuffle rows of a (B, D) batch into marginal samples (no fixed points)."""
    return timbre[make_marginal_permutation(timbre.shape[0], seed)]


def gaussian_mi_oracle(rho: float, dims: int = 1) -> float:
    """Exact MI, in nats, of `dims` independent correlated-Gaussian coordinate
    pairs: dims * (-0.5 * ln(1 - rho^2))."""
    if not abs(rho) < 1.0:
        raise ValidationError("rho must satisfy |rho| < 1")
    if dims < 1:
        raise ValidationError("dims must be >= 1")
    return dims * (-0.5 * math.log1p(-rho * rho)) + 0.0


def sample_correlated_gaussians(
    rho: float, dims: int, batch: int, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw (y, z) with corr(y_d, z_d) = rho per coordinate, independent across
    coordinates."""
    y = rng.standard_normal((batch, dims))
    noise = rng.standard_normal((batch, dims))
    z = rho * y + math.sqrt(1.0 - rho * rho) * noise
    return torch.as_tensor(y, dtype=torch.float32), torch.as_tensor(z, dtype=torch.float32)


def fit_gaussian_mi(
    rho: float,
    dims: int = 1,
    steps: int = 2000,
    batch: int = 256,
    hidden: int = 128,
    lr: float = 5e-4,
    seed: int = 0,
    eval_batch: int = 16384,
) -> tuple[float, MIEstimator]:
    """Train a fresh critic on correlated Gaussian pairs and evaluate the
    bound on held-out samples.  Returns (estimate, trained critic)."""
    torch.manual_seed(seed)
    est = MIEstimator(dims, dims, hidden=hidden, lr=lr)
    rng = np.random.default_rng([seed, 41])
    for step in range(steps):
        y, z = sample_correlated_gaussians(rho, dims, batch, rng)
        est.update(y, z, seed=step)
    eval_rng = np.random.default_rng([seed, 43])
    y, z = sample_correlated_gaussians(rho, dims, eval_batch, rng=eval_rng)
    return est.estimate(y, z, seed=10_000).value, est
