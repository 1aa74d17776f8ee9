"""Tests for synthetic world generation, batching and world export."""

import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from core.errors import CheckpointFormatError, EmptySplitError
from core.rng import counter_stream, substream
from core.schedule import build_linear_schedule, forward_diffuse
from core.synthdata import (
    ClientDataset,
    decode_world,
    draw_batch,
    encode_world,
    generate_world,
    load_world,
    sample_batch,
    save_world,
    world_hash,
)
from models.schemas import WorldConfig


def small_world_config(**changes):
    values = dict(
        num_clients=4, identities_per_client=2, clips_per_client=8, frames=5, latent_dim=6,
        cond_dim=2, id_dim=3, feature_dim=4, public_identities=2, public_clips=4,
    )
    values.update(changes)
    return WorldConfig(**values)


class RngTest(unittest.TestCase):
    """Test cases for seed derivation."""

    def test_same_keys_same_stream(self):
        assert_array_equal(substream(3, "client", 1, 2).random(5), substream(3, "client", 1, 2).random(5))
        assert_array_equal(counter_stream(3, "mask", 1, 0, 1).random(5), counter_stream(3, "mask", 1, 0, 1).random(5))

    def test_different_keys_differ(self):
        self.assertFalse(np.array_equal(substream(3, "client", 1).random(5), substream(3, "client", 2).random(5)))
        self.assertFalse(np.array_equal(substream(3, "a").random(5), substream(4, "a").random(5)))

    def test_negative_key_rejected(self):
        with self.assertRaises(ValueError):
            substream(0, -1)


class GenerateWorldTest(unittest.TestCase):
    """Test cases for generate_world."""

    def test_identities_are_disjoint(self):
        world = generate_world(small_world_config(num_clients=2, identities_per_client=1), seed=0)
        first = {clip.identity_id for clip in world.client(0).clips}
        second = {clip.identity_id for clip in world.client(1).clips}
        self.assertEqual(len(first), 1)
        self.assertEqual(len(second), 1)
        self.assertFalse(first & second)
        public = {clip.identity_id for clip in world.public_clips}
        self.assertFalse(public & (first | second))

    def test_zero_noise_constant_conditioning_freezes_frames(self):
        world = generate_world(small_world_config(sigma_data=0.0, cond_drift=0.0), seed=1)
        for clip in world.client(2).clips:
            assert_allclose(clip.frames, np.broadcast_to(clip.frames[0], clip.frames.shape), atol=1e-12)

    def test_same_seed_same_world(self):
        config = small_world_config(unreliable_fraction=0.5)
        self.assertEqual(world_hash(generate_world(config, 5)), world_hash(generate_world(config, 5)))
        self.assertNotEqual(world_hash(generate_world(config, 5)), world_hash(generate_world(config, 6)))

    def test_identity_reads_back_from_clean_frames(self):
        world = generate_world(small_world_config(sigma_data=0.0, motion_scale=0.0), seed=2)
        probes = world.probes()
        clip = world.client(1).clips[0]
        assert_allclose(probes.identity @ clip.frames.mean(axis=0), clip.ref_embedding, atol=1e-10)
        self.assertAlmostEqual(float(np.linalg.norm(clip.ref_embedding)), 1.0, places=12)

    def test_split_sizes(self):
        world = generate_world(small_world_config(clips_per_client=8, validation_fraction=0.25), seed=3)
        client = world.client(0)
        self.assertEqual(client.n_k, 6)
        self.assertEqual(len(client.val_clips), 2)
        self.assertEqual(len(world.validation_clips()), 8)

    def test_every_client_keeps_both_splits(self):
        with self.assertRaises(ValidationError):
            small_world_config(clips_per_client=1)
        for fraction in (0.01, 0.5, 0.99):
            world = generate_world(small_world_config(clips_per_client=2, validation_fraction=fraction), seed=3)
            for client in world.clients:
                self.assertEqual(client.n_k, 1)
                self.assertEqual(len(client.val_clips), 1)

    def test_unreliable_clients_mislabel_training_clips_only(self):
        config = small_world_config(unreliable_fraction=0.5)
        world = generate_world(config, seed=4)
        flagged = [c for c in world.clients if c.unreliable]
        self.assertEqual(len(flagged), 2)
        embeddings = {identity.id: identity.embedding for identity in world.identities}
        for client in flagged:
            for clip in client.train_clips:
                self.assertFalse(np.array_equal(clip.ref_embedding, embeddings[clip.identity_id]))
            for clip in client.val_clips:
                assert_array_equal(clip.ref_embedding, embeddings[clip.identity_id])

    def test_too_many_identities(self):
        with self.assertRaises(ValueError):
            generate_world(small_world_config(num_clients=100, identities_per_client=1001), seed=0)


class BatchTest(unittest.TestCase):
    """Test cases for batch sampling."""

    def setUp(self):
        self.world = generate_world(small_world_config(), seed=7)
        self.dataset = self.world.client(0)

    def test_single_item(self):
        batch = sample_batch(self.dataset, 1, np.random.default_rng(0), 10)
        self.assertEqual(len(batch), 1)
        self.assertEqual(batch[0].noise.shape, batch[0].clip.frames.shape)

    def test_only_training_clips(self):
        train_ids = {id(c) for c in self.dataset.train_clips}
        for item in sample_batch(self.dataset, 50, np.random.default_rng(1), 10):
            self.assertIn(id(item.clip), train_ids)

    def test_steps_uniform(self):
        T = 10
        n = 100_000
        rng = np.random.default_rng(2)
        clips = self.dataset.train_clips[:1]
        steps = np.array([item.t for item in draw_batch(clips, n, rng, T)])
        counts = np.bincount(steps, minlength=T)
        chi2 = float(np.sum((counts - n / T) ** 2 / (n / T)))
        # 99th percentile of chi-square with 9 degrees of freedom
        self.assertLess(chi2, 21.67)

    def test_noise_mean_is_zero(self):
        batch = draw_batch(self.dataset.train_clips, 4000, np.random.default_rng(3), 10)
        noise = np.concatenate([item.noise.ravel() for item in batch])
        self.assertLess(abs(float(noise.mean())), 3.0 / np.sqrt(noise.size))

    def test_empty_training_split(self):
        empty = ClientDataset(client_id=9, clips=(), train_indices=(), val_indices=(), identity_ids=(0,))
        with self.assertRaises(EmptySplitError):
            sample_batch(empty, 2, np.random.default_rng(0), 10)


class WorldExportTest(unittest.TestCase):
    """Test cases for world export and import."""

    def test_export_import_preserves_hash(self):
        world = generate_world(small_world_config(unreliable_fraction=0.25), seed=8)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "world.bin")
            save_world(world, path)
            restored = load_world(path)
        self.assertEqual(world_hash(restored), world_hash(world))
        self.assertEqual(restored.config, world.config)
        self.assertEqual([c.unreliable for c in restored.clients], [c.unreliable for c in world.clients])

    def test_large_seed_round_trips(self):
        seed = 2**53 + 1
        world = generate_world(small_world_config(num_clients=2), seed=seed)
        restored = decode_world(encode_world(world))
        self.assertEqual(restored.seed, seed)
        assert_array_equal(restored.probes().identity, world.probes().identity)

    def test_truncated_file(self):
        world = generate_world(small_world_config(), seed=9)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "world.bin")
            save_world(world, path)
            with open(path, "rb") as handle:
                data = handle.read()
            with open(path, "wb") as handle:
                handle.write(data[:-16])
            with self.assertRaises(CheckpointFormatError):
                load_world(path)


class LearnabilityTest(unittest.TestCase):
    """Test cases for how much of the injected noise the default world lets a model recover."""

    def test_default_world_admits_linear_noise_predictor(self):
        world = generate_world(WorldConfig(), seed=0)
        schedule = build_linear_schedule(50, 1e-4, 0.02)
        rng = np.random.default_rng(0)

        def design(clips):
            features, targets = [], []
            for clip in clips:
                context = np.concatenate([clip.ref_embedding, [1.0]])
                for _ in range(4):
                    t = int(rng.integers(schedule.T_steps))
                    noise = rng.standard_normal(clip.frames.shape)
                    z_t = forward_diffuse(schedule, clip.frames, t, noise)
                    features.append(np.hstack([z_t, clip.cond, np.tile(context, (len(z_t), 1))]))
                    targets.append(noise)
            return np.vstack(features), np.vstack(targets)

        train_x, train_y = design([clip for client in world.clients for clip in client.train_clips])
        val_x, val_y = design(world.validation_clips())
        coefficients = np.linalg.lstsq(train_x, train_y, rcond=None)[0]
        fitted = float(np.mean((val_x @ coefficients - val_y) ** 2))
        self.assertLessEqual(fitted, 0.7 * float(np.mean(val_y ** 2)))


if __name__ == "__main__":
    unittest.main()
