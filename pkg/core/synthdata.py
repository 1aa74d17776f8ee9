"""Synthetic non-IID client datasets standing in for a partitioned talking-head corpus.

Each clip is generated as::

    z0[f] = M_id @ e + motion_scale * <u, c[f]> * v + N(0, sigma_data^2)

where ``e`` is the clip's identity embedding, ``c`` a random-walk conditioning
sequence, and ``M_id``, ``u``, ``v`` are seeded global structures. ``M_id`` is
the left inverse of the identity probe, so the probe reads the identity back
from clean frames. Identities are partitioned disjointly across clients.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from core.errors import CheckpointFormatError, EmptySplitError
from core.objectives import FrozenProbes
from core.rng import substream
from models.schemas import WorldConfig
from utils.binary import decode_arrays, encode_arrays

logger = logging.getLogger(__name__)

MAX_IDENTITIES = 100_000
_WORLD_FORMAT_VERSION = 2


@dataclass(frozen=True, eq=False)
class Identity:
    """A speaker identity and its unit-norm reference embedding e(r)."""

    id: int
    embedding: np.ndarray


@dataclass(frozen=True, eq=False)
class LatentClip:
    """One clip: F x D latent frames, F x E_c conditioning, reference embedding.

    ``ref_embedding`` is the identity embedding supplied with the clip; for
    clean clips it equals the embedding of ``identity_id``.
    """

    frames: np.ndarray
    cond: np.ndarray
    identity_id: int
    ref_embedding: np.ndarray


@dataclass(frozen=True, eq=False)
class BatchItem:
    """A clip with its diffusion step and the noise injected into every frame."""

    clip: LatentClip
    t: int
    noise: np.ndarray


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """The private clips of one client with a fixed train/validation split."""

    client_id: int
    clips: Tuple[LatentClip, ...]
    train_indices: Tuple[int, ...]
    val_indices: Tuple[int, ...]
    identity_ids: Tuple[int, ...]
    unreliable: bool = False

    @property
    def n_k(self) -> int:
        """Sample count reported to the server: the number of training clips."""
        return len(self.train_indices)

    @property
    def train_clips(self) -> List[LatentClip]:
        return [self.clips[i] for i in self.train_indices]

    @property
    def val_clips(self) -> List[LatentClip]:
        return [self.clips[i] for i in self.val_indices]


@dataclass(frozen=True, eq=False)
class World:
    """Clients, the shared identity table and the public pre-training pool."""

    config: WorldConfig
    seed: int
    clients: Tuple[ClientDataset, ...]
    identities: Tuple[Identity, ...]
    public_clips: Tuple[LatentClip, ...] = field(default=())

    @property
    def client_ids(self) -> List[int]:
        return [client.client_id for client in self.clients]

    def client(self, client_id: int) -> ClientDataset:
        return self.clients[client_id]

    def probes(self) -> FrozenProbes:
        c = self.config
        return FrozenProbes.from_seed(self.seed, c.latent_dim, c.id_dim, c.feature_dim)

    def validation_clips(self) -> List[LatentClip]:
        """Union of client validation splits, ordered by client then clip."""
        return [clip for client in self.clients for clip in client.val_clips]


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    return matrix / np.linalg.norm(matrix, axis=-1, keepdims=True)


def _split_sizes(n_clips: int, validation_fraction: float) -> Tuple[int, int]:
    n_val = max(1, int(math.floor(validation_fraction * n_clips))) if n_clips >= 2 else 0
    return n_clips - n_val, n_val


def _make_clip(
    rng: np.random.Generator,
    identity: Identity,
    structure: Tuple[np.ndarray, np.ndarray, np.ndarray],
    config: WorldConfig,
) -> LatentClip:
    mixing, u, v = structure
    cond = np.empty((config.frames, config.cond_dim))
    cond[0] = rng.standard_normal(config.cond_dim)
    for f in range(1, config.frames):
        cond[f] = cond[f - 1] + config.cond_drift * rng.standard_normal(config.cond_dim)
    motion = config.motion_scale * np.outer(cond @ u, v)
    frames = mixing @ identity.embedding + motion
    frames = frames + config.sigma_data * rng.standard_normal(frames.shape)
    return LatentClip(frames=frames, cond=cond, identity_id=identity.id, ref_embedding=identity.embedding)


def generate_world(config: WorldConfig, seed: int) -> World:
    """Generate a seeded world with identity-disjoint clients.

    Args:
        config: World dimensions and generator constants
        seed: Run seed; the same seed always yields the same world

    Returns:
        The world, clients ordered by client_id

    Raises:
        ValueError: If more identities are requested than representable
    """
    k = config.num_clients
    n_identities = k * config.identities_per_client + config.public_identities
    if n_identities > MAX_IDENTITIES:
        raise ValueError(f"{n_identities} identities requested, at most {MAX_IDENTITIES} supported")

    probes = FrozenProbes.from_seed(seed, config.latent_dim, config.id_dim, config.feature_dim)
    structure_rng = substream(seed, "world", "structure")
    mixing = np.linalg.pinv(probes.identity)
    u = _unit_rows(structure_rng.standard_normal(config.cond_dim))
    v = _unit_rows(structure_rng.standard_normal(config.latent_dim))
    structure = (mixing, u, v)

    embeddings = _unit_rows(substream(seed, "world", "identities").standard_normal((n_identities, config.id_dim)))
    identities = tuple(Identity(id=i, embedding=embeddings[i]) for i in range(n_identities))

    n_unreliable = int(math.floor(config.unreliable_fraction * k + 0.5))
    unreliable_rng = substream(seed, "world", "unreliable")
    unreliable = set(int(c) for c in unreliable_rng.choice(k, size=n_unreliable, replace=False)) if n_unreliable else set()

    n_train, n_val = _split_sizes(config.clips_per_client, config.validation_fraction)
    clients = []
    for client_id in range(k):
        rng = substream(seed, "world", "client", client_id)
        owned = tuple(range(client_id * config.identities_per_client, (client_id + 1) * config.identities_per_client))
        clips = [
            _make_clip(rng, identities[owned[j % len(owned)]], structure, config)
            for j in range(config.clips_per_client)
        ]
        if client_id in unreliable:
            # Training clips carry the reference embedding of an identity held elsewhere.
            foreign = [i for i in range(k * config.identities_per_client) if i not in owned]
            for j in range(n_train):
                if foreign:
                    wrong = identities[int(rng.choice(foreign))]
                    clips[j] = LatentClip(clips[j].frames, clips[j].cond, clips[j].identity_id, wrong.embedding)
        clients.append(
            ClientDataset(
                client_id=client_id,
                clips=tuple(clips),
                train_indices=tuple(range(n_train)),
                val_indices=tuple(range(n_train, n_train + n_val)),
                identity_ids=owned,
                unreliable=client_id in unreliable,
            )
        )

    public_ids = list(range(k * config.identities_per_client, n_identities))
    public_rng = substream(seed, "world", "public")
    public_clips = tuple(
        _make_clip(public_rng, identities[public_ids[j % len(public_ids)]], structure, config)
        for j in range(config.public_clips if public_ids else 0)
    )

    logger.debug(
        "world generated clients=%d identities=%d unreliable=%s public_clips=%d",
        k, n_identities, sorted(unreliable), len(public_clips),
    )
    return World(config=config, seed=seed, clients=tuple(clients), identities=identities, public_clips=public_clips)


def draw_batch(clips: Sequence[LatentClip], batch_size: int, rng: np.random.Generator, T_steps: int) -> List[BatchItem]:
    """Draw clips uniformly with replacement, one step and one noise tensor per clip."""
    if not clips:
        raise EmptySplitError("cannot sample a batch from an empty clip set")
    batch = []
    for _ in range(batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        t = int(rng.integers(T_steps))
        noise = rng.standard_normal(clip.frames.shape)
        batch.append(BatchItem(clip=clip, t=t, noise=noise))
    return batch


def sample_batch(dataset: ClientDataset, batch_size: int, rng: np.random.Generator, T_steps: int) -> List[BatchItem]:
    """Sample a training mini-batch of (clip, t, noise) triples.

    Raises:
        EmptySplitError: If the training split is empty
    """
    if not dataset.train_indices:
        raise EmptySplitError(f"client {dataset.client_id} has no training clips")
    return draw_batch(dataset.train_clips, batch_size, rng, T_steps)


# Export / import -----------------------------------------------------------

_CONFIG_FIELDS = list(WorldConfig.model_fields)


def _clip_arrays(clips: Sequence[LatentClip], config: WorldConfig) -> List[np.ndarray]:
    n = len(clips)
    return [
        np.array([c.identity_id for c in clips], dtype=np.float64),
        np.array([c.frames for c in clips]).reshape(n, config.frames, config.latent_dim),
        np.array([c.cond for c in clips]).reshape(n, config.frames, config.cond_dim),
        np.array([c.ref_embedding for c in clips]).reshape(n, config.id_dim),
    ]


def _clips_from_arrays(ids, frames, cond, refs) -> Tuple[LatentClip, ...]:
    return tuple(
        LatentClip(frames=frames[j], cond=cond[j], identity_id=int(ids[j]), ref_embedding=refs[j])
        for j in range(len(ids))
    )


def _seed_words(seed: int) -> np.ndarray:
    """Split a seed into 32-bit words, least significant first; each word is exact in float64."""
    words = []
    while True:
        words.append(seed & 0xFFFFFFFF)
        seed >>= 32
        if not seed:
            return np.array(words, dtype=np.float64)


def _seed_from_words(words: np.ndarray) -> int:
    return sum(int(word) << (32 * i) for i, word in enumerate(words))


def encode_world(world: World) -> bytes:
    """Serialize a world into the flat binary container."""
    config = world.config
    meta = np.array(
        [_WORLD_FORMAT_VERSION, len(world.clients), len(world.identities)]
        + [float(getattr(config, name)) for name in _CONFIG_FIELDS],
        dtype=np.float64,
    )
    arrays = [meta, _seed_words(world.seed), np.array([identity.embedding for identity in world.identities])]
    for client in world.clients:
        arrays.append(
            np.array(
                [client.client_id, len(client.clips), len(client.val_indices), float(client.unreliable)]
                + list(client.identity_ids),
                dtype=np.float64,
            )
        )
        arrays.extend(_clip_arrays(client.clips, config))
    arrays.extend(_clip_arrays(world.public_clips, config))
    return encode_arrays(arrays)


def decode_world(data: bytes) -> World:
    arrays = decode_arrays(data)
    meta = arrays[0]
    if int(meta[0]) != _WORLD_FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported world format {int(meta[0])}")
    n_clients, n_identities = int(meta[1]), int(meta[2])
    values = {}
    for name, raw in zip(_CONFIG_FIELDS, meta[3:]):
        annotation = WorldConfig.model_fields[name].annotation
        values[name] = int(raw) if annotation is int else float(raw)
    config = WorldConfig(**values)
    if len(arrays) != 3 + 5 * n_clients + 4:
        raise CheckpointFormatError("world file has an unexpected array count")

    seed = _seed_from_words(arrays[1])
    identities = tuple(Identity(id=i, embedding=arrays[2][i]) for i in range(n_identities))
    clients = []
    cursor = 3
    for _ in range(n_clients):
        info = arrays[cursor]
        clips = _clips_from_arrays(*arrays[cursor + 1 : cursor + 5])
        n_clips, n_val = int(info[1]), int(info[2])
        clients.append(
            ClientDataset(
                client_id=int(info[0]),
                clips=clips,
                train_indices=tuple(range(n_clips - n_val)),
                val_indices=tuple(range(n_clips - n_val, n_clips)),
                identity_ids=tuple(int(i) for i in info[4:]),
                unreliable=bool(info[3]),
            )
        )
        cursor += 5
    public_clips = _clips_from_arrays(*arrays[cursor : cursor + 4])
    return World(config=config, seed=seed, clients=tuple(clients), identities=identities, public_clips=public_clips)


def save_world(world: World, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_world(world))


def load_world(path: Union[str, Path]) -> World:
    return decode_world(Path(path).read_bytes())


def world_hash(world: World) -> str:
    """SHA-256 of the exported world; equal hashes mean bit-identical worlds."""
    return hashlib.sha256(encode_world(world)).hexdigest()
