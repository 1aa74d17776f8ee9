"""Round orchestration: client sampling, protected uploads and weighted aggregation.

A round runs in two message phases with an id-sorted barrier between them:

1. every sampled client trains, protects its delta (clip + noise) and reports
   the scalar pair (s_k, n_k) in the clear;
2. the server broadcasts weights w_k; each client uploads ``w_k * delta``,
   pairwise-masked when secure aggregation is on.

Uploads lost after phase 1 are removed from the masked sum with
``unmask_dropouts`` and the aggregate is renormalized over survivors.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import settings
from core.client import ReliabilityScore, compute_reliability, local_train
from core.denoiser import AdapterSet, BackboneParams, flatten_adapters, unflatten_adapters
from core.errors import AggregationError, ClientDivergedError, DegenerateProbeError, EmptySplitError, NonFiniteLossError
from core.evaluation import build_validation_pool, eval_round
from core.objectives import FrozenProbes
from core.privacy import MaskingSession, clip_and_noise, mask_update, unmask_dropouts
from core.rng import substream
from core.schedule import NoiseSchedule
from core.synthdata import World
from models.schemas import FederationConfig, LocalTrainConfig, RoundRecord, SamplerConfig, sample_size

logger = logging.getLogger(__name__)

# Client-side failures the server treats as a dropout
_DROPOUT_ERRORS = (ClientDivergedError, EmptySplitError, DegenerateProbeError, NonFiniteLossError)


@dataclass(eq=False)
class ClientUpdate:
    """Protected delta plus the clear scalar pair (s_k, n_k)."""

    client_id: int
    delta: np.ndarray
    score: float
    n_k: int

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError(f"client {self.client_id} reported n_k={self.n_k}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"client {self.client_id} reported s_k={self.score}")


@dataclass(eq=False)
class FederationResult:
    """Final and best global adapters with the per-round log."""

    final_adapters: AdapterSet
    best_adapters: AdapterSet
    best_round: int
    records: List[RoundRecord]
    skipped_rounds: List[int] = field(default_factory=list)
    uploaded_floats: int = 0
    global_history: List[np.ndarray] = field(default_factory=list)

    @property
    def best_record(self) -> RoundRecord:
        return self.records[self.best_round - 1]


def sample_clients(all_ids: Sequence[int], p: float, round_index: int, seed: int) -> Tuple[int, ...]:
    """Uniformly sample max(1, round(p*K)) clients without replacement, sorted by id.

    Raises:
        ValueError: If there are no clients or p is outside (0, 1]
    """
    if not all_ids:
        raise ValueError("cannot sample from an empty client universe")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"client fraction must be in (0, 1], got {p}")
    ids = sorted(all_ids)
    size = sample_size(len(ids), p)
    if size == len(ids):
        return tuple(ids)
    chosen = substream(seed, "sample", round_index).choice(len(ids), size=size, replace=False)
    return tuple(sorted(ids[int(i)] for i in chosen))


def fedavg_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Data-size weights n_k / sum(n)."""
    if not updates:
        raise ValueError("no updates to weight")
    counts = np.array([u.n_k for u in updates], dtype=np.float64)
    return counts / counts.sum()


def isfa_weights(updates: Sequence[ClientUpdate], gamma: float) -> np.ndarray:
    """Identity-stable weights n_k exp(gamma s_k) / sum_j n_j exp(gamma s_j).

    The exponent is shifted by its maximum before exponentiation; with gamma = 0
    this reduces to :func:`fedavg_weights` bit for bit.
    """
    if not updates:
        raise ValueError("no updates to weight")
    counts = np.array([u.n_k for u in updates], dtype=np.float64)
    logits = gamma * np.array([u.score for u in updates], dtype=np.float64)
    unnormalized = counts * np.exp(logits - logits.max())
    return unnormalized / unnormalized.sum()


def apply_update(global_adapters: AdapterSet, weighted_sum: np.ndarray, eta: float) -> AdapterSet:
    """phi^{t+1} = phi^t + eta * weighted_sum.

    Raises:
        AggregationError: If the result is not finite
    """
    updated = flatten_adapters(global_adapters) + eta * weighted_sum
    if not np.all(np.isfinite(updated)):
        raise AggregationError("aggregated adapters are not finite")
    return unflatten_adapters(updated, global_adapters)


def aggregate(global_adapters: AdapterSet, updates: Sequence[ClientUpdate], weights: Sequence[float], eta: float) -> AdapterSet:
    """Add eta * sum_k w_k delta_k to the global adapters, summing in ascending client_id order.

    Raises:
        AggregationError: On a weight/update count or length mismatch, or a non-finite result
    """
    if len(weights) != len(updates):
        raise AggregationError(f"{len(weights)} weights for {len(updates)} updates")
    length = global_adapters.size
    total = np.zeros(length)
    for weight, update in sorted(zip(weights, updates), key=lambda pair: pair[1].client_id):
        if update.delta.shape != (length,):
            raise AggregationError(f"client {update.client_id} sent length {update.delta.size}, expected {length}")
        total += weight * update.delta
    return apply_update(global_adapters, total, eta)


@dataclass
class _ClientOutcome:
    client_id: int
    update: Optional[ClientUpdate] = None
    reliability: Optional[ReliabilityScore] = None
    error: Optional[str] = None


def run_federation(
    world: World,
    backbone: BackboneParams,
    initial_adapters: AdapterSet,
    schedule: NoiseSchedule,
    probes: FrozenProbes,
    federation: FederationConfig,
    local: LocalTrainConfig,
    sampler: SamplerConfig,
    seed: int,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
    keep_history: bool = False,
) -> FederationResult:
    """Run ``federation.rounds`` rounds and return final and best adapters.

    Args:
        world: Client datasets
        backbone: Frozen shared backbone
        initial_adapters: phi^0
        schedule: Noise schedule
        probes: Frozen probes shared by clients and server
        federation: Round protocol settings
        local: Client optimization settings; prox_mu only applies to fedprox
        sampler: Sampler used for validation generations
        seed: Run seed
        on_round: Called with each record as soon as it exists
        keep_history: Keep the flat global adapters after every round

    Returns:
        The federation result
    """
    if federation.strategy != "fedprox" and local.prox_mu != 0.0:
        local = local.model_copy(update={"prox_mu": 0.0})
    reliability_sampler = sampler.model_copy(update={"num_steps": federation.reliability_steps})
    pool = build_validation_pool(world.validation_clips(), federation.eval_budget, seed)
    workers = max(1, min(federation.num_workers, settings.MAX_WORKERS))

    global_adapters = initial_adapters.copy()
    best_adapters = global_adapters.copy()
    best_loss = math.inf
    best_round = 0
    records: List[RoundRecord] = []
    skipped: List[int] = []
    history: List[np.ndarray] = []
    uploaded = 0
    length = global_adapters.size

    logger.info(
        "federation start strategy=%s rounds=%d clients=%d fraction=%s adapter_len=%d dp=%s secure_agg=%s",
        federation.strategy, federation.rounds, len(world.clients), federation.client_fraction,
        length, federation.dp.enabled, federation.secure_agg,
    )

    for round_index in range(1, federation.rounds + 1):
        participants = sample_clients(world.client_ids, federation.client_fraction, round_index, seed)
        phi_t = global_adapters

        def client_job(client_id: int) -> _ClientOutcome:
            dataset = world.client(client_id)
            try:
                result = local_train(
                    backbone, phi_t, dataset, local, schedule, probes, substream(seed, "local", round_index, client_id)
                )
                protected = clip_and_noise(result.delta, federation.dp, substream(seed, "dp", round_index, client_id))
                reliability = compute_reliability(
                    backbone, result.adapters, dataset.val_clips, probes, schedule, federation.alpha_mix,
                    reliability_sampler, substream(seed, "reliability", round_index, client_id),
                )
            except _DROPOUT_ERRORS as e:
                return _ClientOutcome(client_id=client_id, error=str(e))
            update = ClientUpdate(client_id=client_id, delta=protected, score=reliability.s, n_k=dataset.n_k)
            return _ClientOutcome(client_id=client_id, update=update, reliability=reliability)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool_executor:
                outcomes = list(pool_executor.map(client_job, participants))
        else:
            outcomes = [client_job(cid) for cid in participants]
        outcomes.sort(key=lambda o: o.client_id)

        for outcome in outcomes:
            if outcome.error is not None:
                logger.warning("round=%d client=%d dropped reason=%s", round_index, outcome.client_id, outcome.error)
            else:
                logger.debug(
                    "round=%d client=%d s=%.6f n=%d", round_index, outcome.client_id, outcome.update.score, outcome.update.n_k
                )
        updates = [o.update for o in outcomes if o.update is not None]

        try:
            global_adapters, uploaded_now = _aggregate_round(
                phi_t, updates, participants, federation, seed, round_index
            )
            uploaded += uploaded_now * length
        except AggregationError as e:
            logger.warning("round=%d skipped reason=%s", round_index, e)
            skipped.append(round_index)
            global_adapters = phi_t

        record = eval_round(
            backbone, global_adapters, pool, round_index, schedule, probes, local.loss_weights, sampler, seed
        )
        records.append(record)
        if keep_history:
            history.append(flatten_adapters(global_adapters))
        if record.val_loss < best_loss or best_round == 0:
            best_loss = record.val_loss
            best_round = round_index
            best_adapters = global_adapters.copy()
        logger.info(
            "round=%d participants=%d aggregated=%d val_loss=%.6f val_identity=%.4f val_temporal=%.4f",
            round_index, len(participants), len(updates), record.val_loss, record.val_identity, record.val_temporal,
        )
        if on_round is not None:
            on_round(record)

    logger.info("federation done best_round=%d best_val_loss=%.6f skipped=%s", best_round, best_loss, skipped)
    return FederationResult(
        final_adapters=global_adapters,
        best_adapters=best_adapters,
        best_round=best_round,
        records=records,
        skipped_rounds=skipped,
        uploaded_floats=uploaded,
        global_history=history,
    )


def _weights_for(updates: Sequence[ClientUpdate], federation: FederationConfig) -> np.ndarray:
    if federation.strategy == "isfa":
        return isfa_weights(updates, federation.gamma)
    return fedavg_weights(updates)


def _aggregate_round(
    global_adapters: AdapterSet,
    updates: List[ClientUpdate],
    participants: Tuple[int, ...],
    federation: FederationConfig,
    seed: int,
    round_index: int,
) -> Tuple[AdapterSet, int]:
    """Weight, upload and aggregate one round; returns new adapters and the upload count."""
    if not updates:
        raise AggregationError("every sampled client failed")
    weights = _weights_for(updates, federation)

    kept = np.ones(len(updates), dtype=bool)
    if federation.dropout_rate > 0.0:
        kept = substream(seed, "dropout", round_index).random(len(updates)) >= federation.dropout_rate
        for update, ok in zip(updates, kept):
            if not ok:
                logger.warning("round=%d client=%d upload lost after weighting", round_index, update.client_id)
    if not kept.any():
        raise AggregationError("every upload was lost")
    survivors = [u for u, ok in zip(updates, kept) if ok]
    survivor_weights = weights[kept]
    renormalize = not kept.all()

    if federation.secure_agg:
        session = MaskingSession.open(seed, round_index, participants, global_adapters.size)
        received_sum = np.zeros(global_adapters.size)
        for weight, update in zip(survivor_weights, survivors):
            received_sum += mask_update(weight * update.delta, update.client_id, session)
        received_ids = {u.client_id for u in survivors}
        dropped_ids = [cid for cid in participants if cid not in received_ids]
        weighted_sum = unmask_dropouts(received_sum, session, received_ids, dropped_ids)
        if renormalize:
            weighted_sum = weighted_sum / survivor_weights.sum()
        return apply_update(global_adapters, weighted_sum, federation.eta), len(survivors)

    if renormalize:
        survivor_weights = survivor_weights / survivor_weights.sum()
    return aggregate(global_adapters, survivors, survivor_weights, federation.eta), len(survivors)
