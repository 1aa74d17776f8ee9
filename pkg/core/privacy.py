"""Client-level differential privacy and simulated secure aggregation.

NOT A SECURE IMPLEMENTATION. Masks are real-valued Gaussian vectors drawn from
a Philox4x64 stream seeded by ``(run_seed, "mask", round, i, j)``, and dropout
recovery regenerates those streams directly instead of reconstructing seeds
from secret shares. The simulation preserves what the server gets to see (only
the sum of uploads), which is what utility studies need.

The scalar pair (s_k, n_k) travels in the clear alongside the masked vectors.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from core.errors import MaskingError, NonFiniteLossError
from core.rng import counter_stream
from models.schemas import DpConfig

logger = logging.getLogger(__name__)


def clip_and_noise(delta: np.ndarray, config: DpConfig, rng: np.random.Generator) -> np.ndarray:
    """Clip ``delta`` to L2 norm ``clip_norm`` and add N(0, (sigma*C)^2) per coordinate.

    Returns an unchanged copy when DP is disabled. With ``noise_multiplier`` 0
    only clipping is applied and ``rng`` is not consumed.

    Raises:
        NonFiniteLossError: If ``delta`` contains NaN or infinity
    """
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(delta)):
        raise NonFiniteLossError("client update contains non-finite values")
    if not config.enabled:
        return delta.copy()
    norm = float(np.linalg.norm(delta))
    if norm <= config.clip_norm:
        clipped = delta.copy()
    else:
        scale = config.clip_norm / norm
        clipped = delta * scale
        # rounding can leave the norm a few ulps above C
        while np.linalg.norm(clipped) > config.clip_norm:
            scale = np.nextafter(scale, 0.0)
            clipped = delta * scale
    if config.noise_multiplier == 0.0:
        return clipped
    return clipped + rng.normal(0.0, config.noise_multiplier * config.clip_norm, size=delta.shape)


@dataclass(frozen=True)
class MaskingSession:
    """Pairwise-mask state of one round; immutable once opened."""

    run_seed: int
    round: int
    participants: Tuple[int, ...]
    length: int

    @classmethod
    def open(cls, run_seed: int, round_index: int, participants: Iterable[int], length: int) -> "MaskingSession":
        ids = tuple(sorted(participants))
        if len(set(ids)) != len(ids):
            raise MaskingError("duplicate participant ids")
        if length < 1:
            raise MaskingError("mask length must be positive")
        return cls(run_seed=run_seed, round=round_index, participants=ids, length=length)

    def pair_mask(self, i: int, j: int) -> np.ndarray:
        """Mask shared by ``i`` and ``j``; identical whichever endpoint asks."""
        lo, hi = (i, j) if i < j else (j, i)
        return counter_stream(self.run_seed, "mask", self.round, lo, hi).standard_normal(self.length)


def mask_update(protected: np.ndarray, self_id: int, session: MaskingSession) -> np.ndarray:
    """Add +mask(i, j) for every partner j > i and -mask(j, i) for every j < i.

    Raises:
        MaskingError: If ``self_id`` is not a participant or the length differs
    """
    if self_id not in session.participants:
        raise MaskingError(f"client {self_id} is not in the round {session.round} session")
    if protected.shape != (session.length,):
        raise MaskingError(f"update length {protected.shape} != session length {session.length}")
    masked = np.array(protected, dtype=np.float64)
    for other in session.participants:
        if other > self_id:
            masked += session.pair_mask(self_id, other)
        elif other < self_id:
            masked -= session.pair_mask(other, self_id)
    return masked


def unmask_dropouts(
    sum_of_received: np.ndarray,
    session: MaskingSession,
    received_ids: Iterable[int],
    dropped_ids: Iterable[int],
) -> np.ndarray:
    """Remove the masks that received clients shared with dropped partners.

    Masks between two received clients cancel in the sum; only pairs with a
    dropped partner leave a residue, which is regenerated and subtracted.

    Raises:
        MaskingError: If the two sets overlap or do not cover the participants
    """
    received = sorted(set(received_ids))
    dropped = sorted(set(dropped_ids))
    if set(received) & set(dropped):
        raise MaskingError("received and dropped clients overlap")
    if tuple(sorted(received + dropped)) != session.participants:
        raise MaskingError("received and dropped clients must partition the session participants")
    corrected = np.array(sum_of_received, dtype=np.float64)
    for i in received:
        for j in dropped:
            if i < j:
                corrected -= session.pair_mask(i, j)
            else:
                corrected += session.pair_mask(j, i)
    if dropped:
        logger.debug("round=%d unmasked dropped=%s survivors=%d", session.round, dropped, len(received))
    return corrected
