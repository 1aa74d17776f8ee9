"""Conditional noise predictor with LoRA identity adapters and exact manual gradients.

The network is a per-frame two-layer perceptron::

    x = [z_t[f], temb(t), c[f], e]            (d_in = D + E_t + E_c + E_id)
    h = tanh((W1 + B1 A1) x + b1)             (H)
    eps_hat[f] = (W2 + B2 A2) h + b2          (D)

The backbone (W1, b1, W2, b2) is frozen during federation; only the factors
(B, A) of both layers are trained and communicated.

Flat adapter layout: layer 0 then layer 1; within a layer B before A; each
matrix row-major.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import CheckpointFormatError, EmptySplitError, ShapeMismatchError
from core.objectives import FrozenProbes, LossBreakdown, LossParts, clip_loss_grad, clip_loss_parts, combined_loss, diffusion_loss, diffusion_loss_grad
from core.rng import substream
from core.schedule import NoiseSchedule, forward_diffuse
from core.synthdata import BatchItem, LatentClip, draw_batch
from models.schemas import LossWeights
from utils.binary import read_arrays, write_arrays

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BackboneParams:
    """Frozen perceptron weights shared by every client and the server."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    latent_dim: int
    time_embed_dim: int
    cond_dim: int
    id_dim: int

    def __post_init__(self):
        d_in = self.latent_dim + self.time_embed_dim + self.cond_dim + self.id_dim
        hidden = self.W1.shape[0]
        if self.W1.shape != (hidden, d_in) or self.b1.shape != (hidden,):
            raise ShapeMismatchError(f"first layer shapes {self.W1.shape}, {self.b1.shape} do not match d_in={d_in}")
        if self.W2.shape != (self.latent_dim, hidden) or self.b2.shape != (self.latent_dim,):
            raise ShapeMismatchError(f"second layer shapes {self.W2.shape}, {self.b2.shape} do not match")
        for array in (self.W1, self.b1, self.W2, self.b2):
            array.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[0]

    @property
    def weights(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.W1, self.W2

    @property
    def num_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size


@dataclass(eq=False)
class AdapterSet:
    """LoRA factor pairs ``(B, A)`` for both perceptron layers.

    Owned by one worker at a time; copy before handing to another.
    """

    factors: List[Tuple[np.ndarray, np.ndarray]]
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be at least 1")
        for B, A in self.factors:
            if B.shape[1] != self.rank or A.shape[0] != self.rank:
                raise ShapeMismatchError(f"factor shapes {B.shape}, {A.shape} do not have rank {self.rank}")

    def delta(self, layer: int) -> np.ndarray:
        """Low-rank weight update B @ A of ``layer``."""
        B, A = self.factors[layer]
        return B @ A

    def effective_weight(self, layer: int, base: np.ndarray) -> np.ndarray:
        if self.delta(layer).shape != base.shape:
            raise ShapeMismatchError(f"adapter for layer {layer} has shape {self.delta(layer).shape}, weight {base.shape}")
        return base + self.delta(layer)

    def copy(self) -> "AdapterSet":
        return AdapterSet(factors=[(B.copy(), A.copy()) for B, A in self.factors], rank=self.rank)

    @property
    def size(self) -> int:
        return sum(B.size + A.size for B, A in self.factors)

    def arrays(self) -> List[np.ndarray]:
        return [m for pair in self.factors for m in pair]


def init_backbone(
    latent_dim: int,
    time_embed_dim: int,
    cond_dim: int,
    id_dim: int,
    hidden_width: int,
    seed: int,
    scale: float = 1.0,
) -> BackboneParams:
    """Draw backbone weights from a seeded Gaussian with fan-in scaling; biases start at zero."""
    rng = substream(seed, "backbone")
    d_in = latent_dim + time_embed_dim + cond_dim + id_dim
    return BackboneParams(
        W1=rng.standard_normal((hidden_width, d_in)) * scale / math.sqrt(d_in),
        b1=np.zeros(hidden_width),
        W2=rng.standard_normal((latent_dim, hidden_width)) * scale / math.sqrt(hidden_width),
        b2=np.zeros(latent_dim),
        latent_dim=latent_dim,
        time_embed_dim=time_embed_dim,
        cond_dim=cond_dim,
        id_dim=id_dim,
    )


def init_adapters(backbone: BackboneParams, rank: int, seed: int) -> AdapterSet:
    """A ~ N(0, 1/rank) and B = 0, so the adapted model starts equal to the backbone."""
    if rank < 1:
        raise ValueError("adapter rank must be at least 1")
    rng = substream(seed, "adapters")
    factors = []
    for W in backbone.weights:
        d_out, d_in = W.shape
        A = rng.standard_normal((rank, d_in)) / math.sqrt(rank)
        factors.append((np.zeros((d_out, rank)), A))
    return AdapterSet(factors=factors, rank=rank)


def flatten_adapters(adapters: AdapterSet) -> np.ndarray:
    """Concatenate factors as layer 0 (B, A), layer 1 (B, A), each row-major."""
    return np.concatenate([m.ravel() for m in adapters.arrays()])


def unflatten_adapters(vec: np.ndarray, template: AdapterSet) -> AdapterSet:
    """Inverse of :func:`flatten_adapters` using the shapes of ``template``.

    Raises:
        ShapeMismatchError: If the vector length differs from the template's
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size != template.size:
        raise ShapeMismatchError(f"adapter vector has length {vec.size}, template needs {template.size}")
    factors = []
    offset = 0
    for B, A in template.factors:
        new_B = vec[offset : offset + B.size].reshape(B.shape).copy()
        offset += B.size
        new_A = vec[offset : offset + A.size].reshape(A.shape).copy()
        offset += A.size
        factors.append((new_B, new_A))
    return AdapterSet(factors=factors, rank=template.rank)


def save_adapters(adapters: AdapterSet, path: Union[str, Path]) -> None:
    """Write a checkpoint whose payload is the flat adapter vector."""
    write_arrays(path, adapters.arrays())


def load_adapters(path: Union[str, Path]) -> AdapterSet:
    arrays = read_arrays(path)
    if not arrays or len(arrays) % 2 or any(a.ndim != 2 for a in arrays):
        raise CheckpointFormatError("adapter checkpoint must hold (B, A) matrix pairs")
    factors = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
    return AdapterSet(factors=factors, rank=factors[0][0].shape[1])


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding of step ``t``: sines then cosines at geometric frequencies."""
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def _network_input(backbone: BackboneParams, z_t: np.ndarray, t: int, cond: np.ndarray, ident: np.ndarray) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim != 2 or z_t.shape[1] != backbone.latent_dim:
        raise ShapeMismatchError(f"z_t must be F x {backbone.latent_dim}, got {z_t.shape}")
    frames = z_t.shape[0]
    if cond.shape != (frames, backbone.cond_dim):
        raise ShapeMismatchError(f"cond must be {frames} x {backbone.cond_dim}, got {cond.shape}")
    if ident.shape != (backbone.id_dim,):
        raise ShapeMismatchError(f"identity embedding must have {backbone.id_dim} dims, got {ident.shape}")
    temb = np.broadcast_to(timestep_embedding(t, backbone.time_embed_dim), (frames, backbone.time_embed_dim))
    return np.hstack([z_t, temb, cond, np.broadcast_to(ident, (frames, backbone.id_dim))])


def _layer_weights(backbone: BackboneParams, adapters: Optional[AdapterSet]) -> Tuple[np.ndarray, np.ndarray]:
    if adapters is None:
        return backbone.W1, backbone.W2
    return adapters.effective_weight(0, backbone.W1), adapters.effective_weight(1, backbone.W2)


def _forward(W1: np.ndarray, b1: np.ndarray, W2: np.ndarray, b2: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    hidden = np.tanh(x @ W1.T + b1)
    return hidden, hidden @ W2.T + b2


def _backward(W2: np.ndarray, x: np.ndarray, hidden: np.ndarray, d_out: np.ndarray):
    """Gradients of the weights and biases given dL/d(output)."""
    dW2 = d_out.T @ hidden
    db2 = d_out.sum(axis=0)
    d_pre = (d_out @ W2) * (1.0 - hidden**2)
    dW1 = d_pre.T @ x
    db1 = d_pre.sum(axis=0)
    return dW1, db1, dW2, db2


def predict_noise(
    backbone: BackboneParams,
    adapters: Optional[AdapterSet],
    z_t: np.ndarray,
    t: int,
    cond: np.ndarray,
    ident: np.ndarray,
) -> np.ndarray:
    """Predict the injected noise for every frame of ``z_t``.

    Args:
        backbone: Frozen backbone
        adapters: LoRA adapters, or None for the bare backbone
        z_t: F x D noisy latent
        t: Diffusion step
        cond: F x E_c conditioning
        ident: E_id identity embedding

    Returns:
        F x D predicted noise

    Raises:
        ShapeMismatchError: If any input shape is inconsistent
    """
    x = _network_input(backbone, z_t, t, cond, ident)
    W1, W2 = _layer_weights(backbone, adapters)
    _, out = _forward(W1, backbone.b1, W2, backbone.b2, x)
    return out


def _noised(schedule: NoiseSchedule, item: BatchItem) -> np.ndarray:
    return forward_diffuse(schedule, item.clip.frames, item.t, item.noise)


def batch_loss(
    backbone: BackboneParams,
    adapters: Optional[AdapterSet],
    batch: Sequence[BatchItem],
    schedule: NoiseSchedule,
    loss_weights: LossWeights,
    probes: FrozenProbes,
) -> LossBreakdown:
    """Weighted client objective averaged over ``batch``, without gradients."""
    if not batch:
        raise EmptySplitError("batch is empty")
    parts = []
    for item in batch:
        clip = item.clip
        z_t = _noised(schedule, item)
        predicted = predict_noise(backbone, adapters, z_t, item.t, clip.cond, clip.ref_embedding)
        parts.append(
            clip_loss_parts(clip.frames, clip.cond, clip.ref_embedding, z_t, item.noise, predicted, schedule.alpha_bars[item.t], probes)
        )
    return combined_loss(LossParts.mean(parts), loss_weights)


def adapter_gradients(
    backbone: BackboneParams,
    adapters: AdapterSet,
    batch: Sequence[BatchItem],
    schedule: NoiseSchedule,
    loss_weights: LossWeights,
    probes: FrozenProbes,
) -> Tuple[AdapterSet, LossBreakdown]:
    """Exact gradient of the batch-mean client objective with respect to the adapter factors.

    Backbone gradients are never formed: per-layer weight gradients are
    accumulated and projected onto the factors at the end.

    Raises:
        EmptySplitError: If the batch is empty
    """
    if not batch:
        raise EmptySplitError("batch is empty")
    W1, W2 = _layer_weights(backbone, adapters)
    dW1 = np.zeros_like(W1)
    dW2 = np.zeros_like(W2)
    parts = []
    scale = 1.0 / len(batch)
    for item in batch:
        clip = item.clip
        alpha_bar = schedule.alpha_bars[item.t]
        z_t = _noised(schedule, item)
        x = _network_input(backbone, z_t, item.t, clip.cond, clip.ref_embedding)
        hidden, predicted = _forward(W1, backbone.b1, W2, backbone.b2, x)
        parts.append(clip_loss_parts(clip.frames, clip.cond, clip.ref_embedding, z_t, item.noise, predicted, alpha_bar, probes))
        d_out = scale * clip_loss_grad(
            clip.frames, clip.cond, clip.ref_embedding, z_t, item.noise, predicted, alpha_bar, probes, loss_weights
        )
        g1, _, g2, _ = _backward(W2, x, hidden, d_out)
        dW1 += g1
        dW2 += g2

    grads = []
    for (B, A), dW in zip(adapters.factors, (dW1, dW2)):
        grads.append((dW @ A.T, B.T @ dW))
    return AdapterSet(factors=grads, rank=adapters.rank), combined_loss(LossParts.mean(parts), loss_weights)


def pretrain_backbone(
    backbone: BackboneParams,
    clips: Sequence[LatentClip],
    schedule: NoiseSchedule,
    steps: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> BackboneParams:
    """Train every backbone parameter on the diffusion loss over a public clip pool.

    Returns the input unchanged when ``steps`` is 0.
    """
    if steps == 0:
        return backbone
    rng = substream(seed, "pretrain")
    W1, b1, W2, b2 = (p.copy() for p in (backbone.W1, backbone.b1, backbone.W2, backbone.b2))
    for step in range(steps):
        batch = draw_batch(clips, batch_size, rng, schedule.T_steps)
        grads = [np.zeros_like(p) for p in (W1, b1, W2, b2)]
        loss = 0.0
        for item in batch:
            z_t = _noised(schedule, item)
            x = _network_input(backbone, z_t, item.t, item.clip.cond, item.clip.ref_embedding)
            hidden, predicted = _forward(W1, b1, W2, b2, x)
            loss += diffusion_loss(item.noise, predicted) / len(batch)
            d_out = diffusion_loss_grad(item.noise, predicted) / len(batch)
            for total, g in zip(grads, _backward(W2, x, hidden, d_out)):
                total += g
        W1, b1, W2, b2 = (p - learning_rate * g for p, g in zip((W1, b1, W2, b2), grads))
        if step % 50 == 0 or step == steps - 1:
            logger.debug("pretrain step=%d diffusion_loss=%.6f", step, loss)
    return replace(backbone, W1=W1, b1=b1, W2=W2, b2=b2)
