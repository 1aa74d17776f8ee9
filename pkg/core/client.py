"""Client runtime: local adapter training, update computation and reliability scoring."""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from core.denoiser import AdapterSet, BackboneParams, adapter_gradients, flatten_adapters, unflatten_adapters
from core.errors import ClientDivergedError, EmptySplitError, NonFiniteLossError
from core.evaluation import eval_identity, eval_temporal, reverse_sample
from core.objectives import FrozenProbes
from core.schedule import NoiseSchedule
from core.synthdata import ClientDataset, LatentClip, sample_batch
from models.schemas import LocalTrainConfig, SamplerConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReliabilityScore:
    """Scalar quality signal s = alpha_mix * id_sim + (1 - alpha_mix) * temp_stab."""

    id_sim: float
    temp_stab: float
    alpha_mix: float
    s: float

    @classmethod
    def combine(cls, id_sim: float, temp_stab: float, alpha_mix: float) -> "ReliabilityScore":
        for name, value in (("id_sim", id_sim), ("temp_stab", temp_stab), ("alpha_mix", alpha_mix)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        s = alpha_mix * id_sim + (1.0 - alpha_mix) * temp_stab
        return cls(id_sim=id_sim, temp_stab=temp_stab, alpha_mix=alpha_mix, s=min(1.0, max(0.0, s)))


@dataclass
class LocalTrainResult:
    """Outcome of one client's local round."""

    adapters: AdapterSet
    delta: np.ndarray
    loss_trace: List[float]


def local_train(
    backbone: BackboneParams,
    global_adapters: AdapterSet,
    dataset: ClientDataset,
    config: LocalTrainConfig,
    schedule: NoiseSchedule,
    probes: FrozenProbes,
    rng: np.random.Generator,
) -> LocalTrainResult:
    """Run E epochs of mini-batch gradient descent on the adapters, starting from the global state.

    Each epoch takes ceil(n_k / batch_size) steps. When ``config.prox_mu`` is
    positive the proximal term (mu/2)*||phi - phi_global||^2 is added to the
    objective and handled by a proximal step after each gradient step.

    Args:
        backbone: Frozen backbone, never modified
        global_adapters: Broadcast global adapters phi^t, never modified
        dataset: The client's private data
        config: Local optimization settings
        schedule: Noise schedule
        probes: Frozen probes
        rng: Client-round generator for batch sampling

    Returns:
        Trained adapters, the raw delta phi_k - phi^t and the per-step losses

    Raises:
        EmptySplitError: If the client has no training clips
        ClientDivergedError: If a loss or gradient becomes non-finite
    """
    if not dataset.train_indices:
        raise EmptySplitError(f"client {dataset.client_id} has no training clips")
    start = flatten_adapters(global_adapters)
    current = start.copy()
    steps_per_epoch = math.ceil(dataset.n_k / config.batch_size)
    loss_trace: List[float] = []
    step = 0
    for _ in range(config.local_epochs):
        for _ in range(steps_per_epoch):
            batch = sample_batch(dataset, config.batch_size, rng, schedule.T_steps)
            try:
                grads, breakdown = adapter_gradients(
                    backbone, unflatten_adapters(current, global_adapters), batch, schedule, config.loss_weights, probes
                )
            except NonFiniteLossError:
                raise ClientDivergedError(dataset.client_id, step)
            gradient = flatten_adapters(grads)
            loss = breakdown.total
            if config.prox_mu > 0.0:
                drift = current - start
                loss += 0.5 * config.prox_mu * float(drift @ drift)
            if not (math.isfinite(loss) and np.all(np.isfinite(gradient))):
                raise ClientDivergedError(dataset.client_id, step)
            current = current - config.learning_rate * gradient
            if config.prox_mu > 0.0:
                # Proximal step on the quadratic term; stable for any mu.
                shrink = config.learning_rate * config.prox_mu
                current = (current + shrink * start) / (1.0 + shrink)
            loss_trace.append(loss)
            step += 1

    logger.debug(
        "client=%d local steps=%d first_loss=%.6f last_loss=%.6f",
        dataset.client_id, step, loss_trace[0], loss_trace[-1],
    )
    return LocalTrainResult(
        adapters=unflatten_adapters(current, global_adapters),
        delta=current - start,
        loss_trace=loss_trace,
    )


def compute_reliability(
    backbone: BackboneParams,
    trained_adapters: AdapterSet,
    validation_clips: Sequence[LatentClip],
    probes: FrozenProbes,
    schedule: NoiseSchedule,
    alpha_mix: float,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> ReliabilityScore:
    """Score locally trained adapters on held-out clips.

    One clip is generated per validation item; id_sim is the mean identity
    similarity and temp_stab = 1 / (1 + J) with J the mean jitter.

    Raises:
        EmptySplitError: If there are no validation clips
    """
    if not validation_clips:
        raise EmptySplitError("no validation clips to score reliability on")
    similarities = []
    jitters = []
    for clip in validation_clips:
        generated = reverse_sample(backbone, trained_adapters, clip.cond, clip.ref_embedding, schedule, sampler, rng=rng)
        similarities.append(eval_identity(generated, clip.ref_embedding, probes))
        jitters.append(eval_temporal(generated)[1])
    temp_stab = 1.0 / (1.0 + float(np.mean(jitters)))
    return ReliabilityScore.combine(float(np.mean(similarities)), temp_stab, alpha_mix)


def personalize(
    backbone: BackboneParams,
    global_adapters: AdapterSet,
    dataset: ClientDataset,
    config: LocalTrainConfig,
    schedule: NoiseSchedule,
    probes: FrozenProbes,
    rng: np.random.Generator,
) -> AdapterSet:
    """Fine-tune a private copy of the global adapters for local inference; nothing is uploaded."""
    return local_train(backbone, global_adapters, dataset, config, schedule, probes, rng).adapters
