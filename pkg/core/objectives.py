"""Client objective: diffusion, temporal-consistency, identity, perceptual and sync terms.

Each loss has a companion ``*_grad`` returning the gradient of the loss with
respect to its predicted/generated argument, which the denoiser chains through
its manual backward pass. Frames are ``F x D`` arrays.
"""

import math
from dataclasses import dataclass, fields
from typing import Dict, Tuple

import numpy as np

from core.errors import DegenerateProbeError, NonFiniteLossError, ShapeMismatchError
from core.rng import substream
from models.schemas import LossWeights

# Norms below this are treated as zero (cosine undefined / correlation uninformative)
_ZERO_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class FrozenProbes:
    """Fixed random linear probes standing in for pretrained networks.

    ``identity`` (E_id x D) maps a frame latent to an identity embedding and
    ``perceptual`` (P x D) maps it to a feature vector. Both are derived from the
    run seed, so every client and the server hold the same probes.
    """

    identity: np.ndarray
    perceptual: np.ndarray

    def __post_init__(self):
        self.identity.setflags(write=False)
        self.perceptual.setflags(write=False)

    @classmethod
    def from_seed(cls, seed: int, latent_dim: int, id_dim: int, feature_dim: int) -> "FrozenProbes":
        rng = substream(seed, "probes")
        identity = rng.standard_normal((id_dim, latent_dim)) / math.sqrt(latent_dim)
        perceptual = rng.standard_normal((feature_dim, latent_dim)) / math.sqrt(latent_dim)
        return cls(identity=identity, perceptual=perceptual)

    def features(self, frames: np.ndarray) -> np.ndarray:
        return np.atleast_2d(frames) @ self.perceptual.T


@dataclass(frozen=True)
class LossParts:
    """Unweighted loss terms of one clip or one batch."""

    diffusion: float
    tdc: float
    identity: float
    perceptual: float
    sync: float

    def as_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def mean(parts: "list[LossParts]") -> "LossParts":
        return LossParts(**{f.name: float(np.mean([getattr(p, f.name) for p in parts])) for f in fields(LossParts)})


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted total plus the unweighted terms it was built from."""

    total: float
    parts: LossParts


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _two_frames(frames: np.ndarray, what: str) -> None:
    if frames.ndim != 2 or frames.shape[0] < 2:
        raise ShapeMismatchError(f"{what} needs an F x D clip with F >= 2, got shape {frames.shape}")


def denoised_estimate(z_t: np.ndarray, predicted_noise: np.ndarray, alpha_bar: float) -> np.ndarray:
    """One-step estimate of z_0 from z_t and the predicted noise."""
    return (z_t - math.sqrt(1.0 - alpha_bar) * predicted_noise) / math.sqrt(alpha_bar)


def diffusion_loss(true_noise: np.ndarray, predicted_noise: np.ndarray) -> float:
    """Mean squared error over all frames and coordinates."""
    _same_shape(true_noise, predicted_noise, "diffusion_loss")
    return float(np.mean((predicted_noise - true_noise) ** 2))


def diffusion_loss_grad(true_noise: np.ndarray, predicted_noise: np.ndarray) -> np.ndarray:
    return 2.0 * (predicted_noise - true_noise) / predicted_noise.size


def tdc_loss(true_noise: np.ndarray, predicted_noise: np.ndarray) -> float:
    """Mean L1 gap between consecutive-frame differences of true and predicted noise."""
    _same_shape(true_noise, predicted_noise, "tdc_loss")
    _two_frames(predicted_noise, "tdc_loss")
    gap = np.diff(predicted_noise, axis=0) - np.diff(true_noise, axis=0)
    return float(np.mean(np.abs(gap)))


def tdc_loss_grad(true_noise: np.ndarray, predicted_noise: np.ndarray) -> np.ndarray:
    gap = np.diff(predicted_noise, axis=0) - np.diff(true_noise, axis=0)
    step = np.sign(gap) / gap.size
    grad = np.zeros_like(predicted_noise)
    grad[1:] += step
    grad[:-1] -= step
    return grad


def _identity_cosine(generated: np.ndarray, ref_embedding: np.ndarray, probes: FrozenProbes) -> Tuple[float, np.ndarray, float, float]:
    if generated.ndim != 2 or generated.shape[0] == 0:
        raise ShapeMismatchError(f"expected a non-empty F x D clip, got shape {generated.shape}")
    embedding = probes.identity @ generated.mean(axis=0)
    if embedding.shape != ref_embedding.shape:
        raise ShapeMismatchError(f"probe embedding {embedding.shape} vs reference {ref_embedding.shape}")
    norm_u = float(np.linalg.norm(embedding))
    norm_e = float(np.linalg.norm(ref_embedding))
    if norm_u < _ZERO_NORM or norm_e < _ZERO_NORM:
        raise DegenerateProbeError("identity embedding has zero norm")
    cos = float(embedding @ ref_embedding) / (norm_u * norm_e)
    return min(1.0, max(-1.0, cos)), embedding, norm_u, norm_e


def identity_cosine(generated: np.ndarray, ref_embedding: np.ndarray, probes: FrozenProbes) -> float:
    """Cosine between the mean-frame probe embedding and the reference embedding."""
    return _identity_cosine(generated, ref_embedding, probes)[0]


def identity_loss(generated: np.ndarray, ref_embedding: np.ndarray, probes: FrozenProbes) -> float:
    """1 - cos(g(mean generated frame), e_ref), in [0, 2]."""
    return 1.0 - identity_cosine(generated, ref_embedding, probes)


def identity_loss_grad(generated: np.ndarray, ref_embedding: np.ndarray, probes: FrozenProbes) -> np.ndarray:
    cos, embedding, norm_u, norm_e = _identity_cosine(generated, ref_embedding, probes)
    d_embedding = -(ref_embedding / (norm_u * norm_e) - cos * embedding / (norm_u * norm_u))
    d_mean = probes.identity.T @ d_embedding
    return np.broadcast_to(d_mean / generated.shape[0], generated.shape).copy()


def perceptual_loss(generated: np.ndarray, target: np.ndarray, probes: FrozenProbes) -> float:
    """Mean absolute difference of perceptual probe features."""
    _same_shape(generated, target, "perceptual_loss")
    return float(np.mean(np.abs(probes.features(generated) - probes.features(target))))


def perceptual_loss_grad(generated: np.ndarray, target: np.ndarray, probes: FrozenProbes) -> np.ndarray:
    gap = probes.features(generated) - probes.features(target)
    return (np.sign(gap) / gap.size) @ probes.perceptual


def _change_magnitudes(sequence: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    steps = np.diff(sequence, axis=0)
    return steps, np.linalg.norm(steps, axis=1)


def _sync_terms(generated: np.ndarray, cond: np.ndarray):
    _two_frames(generated, "sync_proxy_loss")
    if cond.shape[0] != generated.shape[0]:
        raise ShapeMismatchError(f"conditioning length {cond.shape[0]} != frame count {generated.shape[0]}")
    _, cond_change = _change_magnitudes(cond)
    frame_steps, frame_change = _change_magnitudes(generated)
    a = cond_change - cond_change.mean()
    b = frame_change - frame_change.mean()
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    return a, b, norm_a, norm_b, frame_steps, frame_change


def sync_proxy_loss(generated: np.ndarray, cond: np.ndarray) -> float:
    """1 - Pearson correlation of conditioning change and frame change magnitudes.

    Returns the neutral value 1 when either sequence has zero variance.
    """
    a, b, norm_a, norm_b, _, _ = _sync_terms(generated, cond)
    if norm_a < _ZERO_NORM or norm_b < _ZERO_NORM:
        return 1.0
    corr = float(a @ b) / (norm_a * norm_b)
    return min(2.0, max(0.0, 1.0 - corr))


def sync_proxy_loss_grad(generated: np.ndarray, cond: np.ndarray) -> np.ndarray:
    a, b, norm_a, norm_b, frame_steps, frame_change = _sync_terms(generated, cond)
    grad = np.zeros_like(generated)
    if norm_a < _ZERO_NORM or norm_b < _ZERO_NORM:
        return grad
    corr = float(a @ b) / (norm_a * norm_b)
    d_change = -(a / (norm_a * norm_b) - corr * b / (norm_b * norm_b))
    safe = np.where(frame_change > 0.0, frame_change, 1.0)
    unit = np.where(frame_change[:, None] > 0.0, frame_steps / safe[:, None], 0.0)
    step = d_change[:, None] * unit
    grad[1:] += step
    grad[:-1] -= step
    return grad


def combined_loss(parts: LossParts, weights: LossWeights) -> LossBreakdown:
    """Weighted client objective.

    Raises:
        NonFiniteLossError: If any term is NaN or infinite
    """
    for name, value in parts.as_dict().items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss term {name} is {value}")
    total = (
        parts.diffusion
        + weights.lambda_tdc * parts.tdc
        + weights.lambda_id * parts.identity
        + weights.lambda_perc * parts.perceptual
        + weights.lambda_sync * parts.sync
    )
    return LossBreakdown(total=total, parts=parts)


def clip_loss_parts(
    z0: np.ndarray,
    cond: np.ndarray,
    ref_embedding: np.ndarray,
    z_t: np.ndarray,
    true_noise: np.ndarray,
    predicted_noise: np.ndarray,
    alpha_bar: float,
    probes: FrozenProbes,
) -> LossParts:
    """All five terms for one noised clip, generated frames taken as the one-step estimate."""
    generated = denoised_estimate(z_t, predicted_noise, alpha_bar)
    return LossParts(
        diffusion=diffusion_loss(true_noise, predicted_noise),
        tdc=tdc_loss(true_noise, predicted_noise),
        identity=identity_loss(generated, ref_embedding, probes),
        perceptual=perceptual_loss(generated, z0, probes),
        sync=sync_proxy_loss(generated, cond),
    )


def clip_loss_grad(
    z0: np.ndarray,
    cond: np.ndarray,
    ref_embedding: np.ndarray,
    z_t: np.ndarray,
    true_noise: np.ndarray,
    predicted_noise: np.ndarray,
    alpha_bar: float,
    probes: FrozenProbes,
    weights: LossWeights,
) -> np.ndarray:
    """Gradient of the weighted clip objective with respect to the predicted noise."""
    grad = diffusion_loss_grad(true_noise, predicted_noise)
    if weights.lambda_tdc:
        grad = grad + weights.lambda_tdc * tdc_loss_grad(true_noise, predicted_noise)

    generated = denoised_estimate(z_t, predicted_noise, alpha_bar)
    d_generated = np.zeros_like(generated)
    if weights.lambda_id:
        d_generated += weights.lambda_id * identity_loss_grad(generated, ref_embedding, probes)
    if weights.lambda_perc:
        d_generated += weights.lambda_perc * perceptual_loss_grad(generated, z0, probes)
    if weights.lambda_sync:
        d_generated += weights.lambda_sync * sync_proxy_loss_grad(generated, cond)
    # d(generated)/d(predicted_noise) = -sqrt(1 - alpha_bar) / sqrt(alpha_bar)
    return grad - math.sqrt(1.0 - alpha_bar) / math.sqrt(alpha_bar) * d_generated
