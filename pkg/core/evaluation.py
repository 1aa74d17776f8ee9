"""Reverse-diffusion sampling and the per-round validation metrics."""

import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.denoiser import AdapterSet, BackboneParams, predict_noise
from core.errors import EmptySplitError, ShapeMismatchError
from core.objectives import FrozenProbes, LossParts, clip_loss_parts, combined_loss, identity_cosine
from core.rng import substream
from core.schedule import NoiseSchedule, forward_diffuse
from core.synthdata import LatentClip
from models.schemas import LossWeights, RoundRecord, SamplerConfig

# (z_t, t) -> predicted noise; lets tests swap in an oracle for the network
NoisePredictor = Callable[[np.ndarray, int], np.ndarray]


def sampling_steps(schedule: NoiseSchedule, num_steps: int) -> np.ndarray:
    """Descending diffusion steps visited by a sampler with ``num_steps`` steps.

    The full schedule is T-1..0; fewer steps are spread evenly and always start
    at T-1 and end at 0 (a single step visits only T-1).
    """
    if not 1 <= num_steps <= schedule.T_steps:
        raise ValueError(f"num_steps must be in [1, {schedule.T_steps}], got {num_steps}")
    return np.round(np.linspace(schedule.T_steps - 1, 0, num_steps)).astype(int)


def reverse_sample(
    backbone: BackboneParams,
    adapters: Optional[AdapterSet],
    cond: np.ndarray,
    ident: np.ndarray,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    predictor: Optional[NoisePredictor] = None,
) -> np.ndarray:
    """Generate an F x D latent clip by ancestral DDPM denoising from z_T ~ N(0, I).

    With fewer steps than the schedule, each jump uses the respaced
    ``alpha = alpha_bar[t] / alpha_bar[t_next]``. The deterministic variant
    drops the ancestral noise; the final step never adds noise. The latent
    decoder is the identity, so the returned latent is the generated clip.

    Args:
        backbone: Frozen backbone
        adapters: Adapters to sample with, or None
        cond: F x E_c conditioning sequence
        ident: Identity embedding
        schedule: Noise schedule
        config: Step count, stochasticity and fallback seed
        rng: Generator for z_T and ancestral noise; defaults to one seeded from config.seed
        predictor: Replacement noise predictor

    Returns:
        Generated F x D latent clip
    """
    rng = rng if rng is not None else substream(config.seed, "reverse")
    if predictor is None:
        def predictor(z: np.ndarray, t: int) -> np.ndarray:
            return predict_noise(backbone, adapters, z, t, cond, ident)

    steps = sampling_steps(schedule, config.num_steps)
    z = rng.standard_normal((cond.shape[0], backbone.latent_dim))
    for i, t in enumerate(steps):
        alpha_bar = schedule.alpha_bars[t]
        last = i + 1 == len(steps)
        if last:
            alpha = alpha_bar
        elif steps[i + 1] == t - 1:
            alpha = schedule.alphas[t]
        else:
            alpha = alpha_bar / schedule.alpha_bars[steps[i + 1]]
        beta = 1.0 - alpha
        eps = predictor(z, int(t))
        z = (z - beta / math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha)
        if config.stochastic and not last:
            z = z + math.sqrt(beta) * rng.standard_normal(z.shape)
    return z


def eval_identity(generated: np.ndarray, ref_embedding: np.ndarray, probes: FrozenProbes) -> float:
    """Identity similarity (1 + cos(g(mean frame), e_ref)) / 2, in [0, 1]."""
    return (1.0 + identity_cosine(generated, ref_embedding, probes)) / 2.0


def eval_temporal(generated: np.ndarray) -> Tuple[float, float]:
    """Return (stability, jitter): jitter is the mean L2 step between frames, stability 1/(1+jitter)."""
    if generated.ndim != 2 or generated.shape[0] < 2:
        raise ShapeMismatchError(f"temporal metrics need at least 2 frames, got shape {generated.shape}")
    jitter = float(np.mean(np.linalg.norm(np.diff(generated, axis=0), axis=1)))
    return 1.0 / (1.0 + jitter), jitter


def eval_round(
    backbone: BackboneParams,
    adapters: Optional[AdapterSet],
    pool: Sequence[LatentClip],
    round_index: int,
    schedule: NoiseSchedule,
    probes: FrozenProbes,
    loss_weights: LossWeights,
    sampler: SamplerConfig,
    seed: int,
    predictor: Optional[Callable[[np.ndarray, int, LatentClip], np.ndarray]] = None,
) -> RoundRecord:
    """Evaluate a global model on a fixed validation pool.

    The step, noise and sampler draws for pool item ``i`` depend only on
    ``(seed, i)``, so records of different rounds differ only through the model.

    Raises:
        EmptySplitError: If the pool is empty
    """
    if not pool:
        raise EmptySplitError("validation pool is empty")
    losses: List[float] = []
    identities: List[float] = []
    stabilities: List[float] = []
    for i, clip in enumerate(pool):
        if predictor is None:
            def predict(z: np.ndarray, t: int, clip: LatentClip = clip) -> np.ndarray:
                return predict_noise(backbone, adapters, z, t, clip.cond, clip.ref_embedding)
        else:
            def predict(z: np.ndarray, t: int, clip: LatentClip = clip) -> np.ndarray:
                return predictor(z, t, clip)

        loss_rng = substream(seed, "eval-loss", i)
        t = int(loss_rng.integers(schedule.T_steps))
        noise = loss_rng.standard_normal(clip.frames.shape)
        z_t = forward_diffuse(schedule, clip.frames, t, noise)
        parts: LossParts = clip_loss_parts(
            clip.frames, clip.cond, clip.ref_embedding, z_t, noise, predict(z_t, t), schedule.alpha_bars[t], probes
        )
        losses.append(combined_loss(parts, loss_weights).total)

        generated = reverse_sample(
            backbone, adapters, clip.cond, clip.ref_embedding, schedule, sampler,
            rng=substream(seed, "eval-sample", i), predictor=predict,
        )
        identities.append(eval_identity(generated, clip.ref_embedding, probes))
        stabilities.append(eval_temporal(generated)[0])

    return RoundRecord(
        round=round_index,
        val_loss=float(np.mean(losses)),
        val_identity=float(np.mean(identities)),
        val_temporal=float(np.mean(stabilities)),
    )


def build_validation_pool(clips: Sequence[LatentClip], budget: int, seed: int) -> List[LatentClip]:
    """Pick ``budget`` clips (or all, if fewer) deterministically, keeping pool order."""
    if len(clips) <= budget:
        return list(clips)
    chosen = substream(seed, "eval-pool").choice(len(clips), size=budget, replace=False)
    return [clips[i] for i in sorted(int(c) for c in chosen)]
