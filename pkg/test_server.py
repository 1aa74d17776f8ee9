"""Tests for client sampling, aggregation weights and the round protocol."""

import math
import unittest
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from config import settings
from core.denoiser import batch_loss, flatten_adapters, init_adapters, init_backbone
from core.errors import AggregationError
from core.evaluation import eval_temporal, reverse_sample
from core.rng import substream
from core.schedule import build_linear_schedule
from core.server import ClientUpdate, aggregate, fedavg_weights, isfa_weights, run_federation, sample_clients
from core.synthdata import draw_batch, generate_world
from models.schemas import DpConfig, FederationConfig, LocalTrainConfig, LossWeights, SamplerConfig, WorldConfig

WORLD = WorldConfig(
    num_clients=4, identities_per_client=1, clips_per_client=4, frames=4, latent_dim=5,
    cond_dim=2, id_dim=3, feature_dim=4, public_identities=1, public_clips=2, unreliable_fraction=0.25,
)


def update(client_id, n_k=1, score=0.5, delta=(0.0,)):
    return ClientUpdate(client_id=client_id, delta=np.array(delta, dtype=float), score=score, n_k=n_k)


class SampleClientsTest(unittest.TestCase):
    """Test cases for sample_clients."""

    def test_full_participation(self):
        for round_index in range(1, 4):
            self.assertEqual(sample_clients(list(range(6)), 1.0, round_index, 0), tuple(range(6)))

    def test_sample_size(self):
        chosen = sample_clients(list(range(10)), 0.3, 1, 0)
        self.assertEqual(len(chosen), 3)
        self.assertEqual(list(chosen), sorted(chosen))
        self.assertEqual(len(sample_clients(list(range(10)), 0.01, 1, 0)), 1)

    def test_deterministic_per_round(self):
        ids = list(range(20))
        self.assertEqual(sample_clients(ids, 0.25, 4, 9), sample_clients(ids, 0.25, 4, 9))
        rounds = {sample_clients(ids, 0.25, r, 9) for r in range(1, 11)}
        self.assertGreater(len(rounds), 1)

    def test_errors(self):
        with self.assertRaises(ValueError):
            sample_clients([], 0.5, 1, 0)
        with self.assertRaises(ValueError):
            sample_clients([1, 2], 0.0, 1, 0)


class WeightsTest(unittest.TestCase):
    """Test cases for FedAvg and ISFA weights."""

    def test_gamma_zero_is_data_size(self):
        weights = isfa_weights([update(0, n_k=10, score=0.1), update(1, n_k=20, score=0.9)], gamma=0.0)
        assert_allclose(weights, [1 / 3, 2 / 3], rtol=1e-15)

    def test_gamma_zero_bit_identical_to_fedavg(self):
        rng = np.random.default_rng(0)
        updates = [update(i, n_k=int(n), score=float(s)) for i, (n, s) in enumerate(zip(rng.integers(1, 50, 7), rng.random(7)))]
        assert_array_equal(isfa_weights(updates, 0.0), fedavg_weights(updates))

    def test_softmax_by_hand(self):
        weights = isfa_weights([update(0, score=0.0), update(1, score=1.0)], gamma=1.0)
        e = math.e
        assert_allclose(weights, [1 / (1 + e), e / (1 + e)], rtol=1e-12)
        self.assertAlmostEqual(weights[0], 0.26894, places=5)

    def test_symmetric_inputs_uniform(self):
        weights = isfa_weights([update(i, n_k=3, score=0.4) for i in range(4)], gamma=50.0)
        assert_allclose(weights, 0.25, rtol=1e-15)

    def test_normalized_and_stable_for_large_gamma(self):
        weights = isfa_weights([update(0, n_k=5, score=0.0), update(1, n_k=1, score=1.0), update(2, n_k=2, score=0.3)], gamma=1e4)
        self.assertTrue(np.all(np.isfinite(weights)))
        self.assertAlmostEqual(float(weights.sum()), 1.0, places=12)

    def test_monotone_influence(self):
        low = isfa_weights([update(0, score=0.2), update(1, score=0.5)], gamma=2.0)[0]
        high = isfa_weights([update(0, score=0.3), update(1, score=0.5)], gamma=2.0)[0]
        self.assertGreater(high, low)

    def test_empty(self):
        with self.assertRaises(ValueError):
            isfa_weights([], 1.0)

    def test_invalid_update(self):
        with self.assertRaises(ValueError):
            update(0, n_k=0)
        with self.assertRaises(ValueError):
            update(0, score=1.5)


class AggregateTest(unittest.TestCase):
    """Test cases for aggregate."""

    def setUp(self):
        backbone = init_backbone(2, 2, 1, 1, 2, seed=0)
        self.adapters = init_adapters(backbone, 1, seed=0)
        self.flat = flatten_adapters(self.adapters)

    def test_single_client(self):
        delta = np.random.default_rng(1).standard_normal(self.flat.size)
        out = aggregate(self.adapters, [update(3, delta=delta)], [1.0], eta=1.0)
        assert_allclose(flatten_adapters(out), self.flat + delta, rtol=1e-15)

    def test_zero_deltas(self):
        zeros = np.zeros(self.flat.size)
        out = aggregate(self.adapters, [update(0, delta=zeros), update(1, delta=zeros)], [0.5, 0.5], eta=1.0)
        assert_array_equal(flatten_adapters(out), self.flat)

    def test_weighted_sum_by_hand(self):
        first = np.zeros(self.flat.size)
        first[0] = 4.0
        out = aggregate(self.adapters, [update(0, delta=first), update(1, delta=np.zeros(self.flat.size))], [0.25, 0.75], 1.0)
        self.assertAlmostEqual(flatten_adapters(out)[0] - self.flat[0], 1.0, places=12)

    def test_count_mismatch(self):
        with self.assertRaises(AggregationError):
            aggregate(self.adapters, [update(0, delta=np.zeros(self.flat.size))], [0.5, 0.5], 1.0)

    def test_length_mismatch(self):
        with self.assertRaises(AggregationError):
            aggregate(self.adapters, [update(0, delta=np.zeros(3))], [1.0], 1.0)

    def test_non_finite_aggregate(self):
        delta = np.full(self.flat.size, 1e308)
        with self.assertRaises(AggregationError):
            with np.errstate(over="ignore"):
                aggregate(self.adapters, [update(0, delta=delta), update(1, delta=delta)], [0.5, 0.5], 1e10)


class RunFederationTest(unittest.TestCase):
    """Test cases for run_federation."""

    def setUp(self):
        self.world = generate_world(WORLD, seed=1)
        self.probes = self.world.probes()
        self.schedule = build_linear_schedule(8, 1e-3, 0.2)
        self.backbone = init_backbone(WORLD.latent_dim, 4, WORLD.cond_dim, WORLD.id_dim, 6, seed=1)
        self.adapters = init_adapters(self.backbone, 2, seed=1)
        self.sampler = SamplerConfig(num_steps=3)

    def federate(self, local=None, **changes):
        values = dict(rounds=2, client_fraction=0.75, eval_budget=2, reliability_steps=3, gamma=3.0)
        values.update(changes)
        local = local or LocalTrainConfig(batch_size=2, learning_rate=0.1)
        return run_federation(
            self.world, self.backbone, self.adapters, self.schedule, self.probes,
            FederationConfig(**values), local, self.sampler, seed=5, keep_history=True,
        )

    def test_no_op_round(self):
        result = self.federate(local=LocalTrainConfig(batch_size=2, learning_rate=0.0), rounds=1, client_fraction=1.0)
        assert_array_equal(flatten_adapters(result.final_adapters), flatten_adapters(self.adapters))
        self.assertEqual(len(result.records), 1)

    def test_isfa_gamma_zero_matches_fedavg(self):
        isfa = self.federate(strategy="isfa", gamma=0.0, rounds=50)
        fedavg = self.federate(strategy="fedavg", rounds=50)
        for a, b in zip(isfa.global_history, fedavg.global_history):
            assert_array_equal(a, b)
        self.assertEqual(isfa.records, fedavg.records)

    def test_fedprox_zero_mu_matches_fedavg(self):
        local = LocalTrainConfig(batch_size=2, learning_rate=0.1, prox_mu=0.0)
        fedprox = self.federate(local=local, strategy="fedprox", rounds=3)
        fedavg = self.federate(local=local, strategy="fedavg", rounds=3)
        for a, b in zip(fedprox.global_history, fedavg.global_history):
            assert_array_equal(a, b)
        self.assertEqual(fedprox.records, fedavg.records)

    def test_fedprox_positive_mu_changes_the_run(self):
        local = LocalTrainConfig(batch_size=2, learning_rate=0.1, prox_mu=5.0)
        fedprox = self.federate(local=local, strategy="fedprox", rounds=1)
        fedavg = self.federate(local=local, strategy="fedavg", rounds=1)
        self.assertFalse(np.array_equal(fedprox.global_history[0], fedavg.global_history[0]))

    def test_deterministic_records(self):
        self.assertEqual(self.federate().records, self.federate().records)

    def test_records_in_round_order_and_best_checkpoint(self):
        result = self.federate(rounds=3)
        self.assertEqual([r.round for r in result.records], [1, 2, 3])
        best = min(result.records, key=lambda r: r.val_loss)
        self.assertEqual(result.best_record.val_loss, best.val_loss)
        assert_array_equal(flatten_adapters(result.best_adapters), result.global_history[result.best_round - 1])

    def test_secure_aggregation_is_transparent(self):
        plain = self.federate(secure_agg=False, rounds=1)
        masked = self.federate(secure_agg=True, rounds=1)
        assert_allclose(flatten_adapters(masked.final_adapters), flatten_adapters(plain.final_adapters), atol=1e-9, rtol=0)

    def test_dropout_recovery_matches_plain_renormalization(self):
        plain = self.federate(secure_agg=False, dropout_rate=0.4, rounds=2, client_fraction=1.0)
        masked = self.federate(secure_agg=True, dropout_rate=0.4, rounds=2, client_fraction=1.0)
        for a, b in zip(plain.global_history, masked.global_history):
            assert_allclose(a, b, atol=1e-9, rtol=0)

    def test_all_clients_failing_skips_round(self):
        with np.errstate(all="ignore"):
            result = self.federate(local=LocalTrainConfig(batch_size=1, learning_rate=1e300, local_epochs=2), rounds=1)
        self.assertEqual(result.skipped_rounds, [1])
        assert_array_equal(flatten_adapters(result.final_adapters), flatten_adapters(self.adapters))
        self.assertEqual(len(result.records), 1)

    def test_worker_pool_matches_sequential(self):
        sequential = self.federate(num_workers=1)
        with mock.patch.object(settings, "MAX_WORKERS", 3):
            pooled = self.federate(num_workers=3)
        self.assertEqual(sequential.records, pooled.records)

    def test_communication_accounting(self):
        result = self.federate(rounds=2, client_fraction=0.5)
        self.assertEqual(result.uploaded_floats, 2 * 2 * self.adapters.size)

    def test_dp_run_stays_finite(self):
        result = self.federate(dp=DpConfig(enabled=True, clip_norm=0.5, noise_multiplier=0.3), secure_agg=True)
        self.assertTrue(np.all(np.isfinite(flatten_adapters(result.final_adapters))))


DESK_WORLD = WorldConfig(
    num_clients=8, identities_per_client=1, clips_per_client=8, frames=4, latent_dim=6,
    cond_dim=2, id_dim=3, feature_dim=4, public_identities=1, public_clips=2,
)
SEEDS = range(5)


class DirectionalEffectTest(unittest.TestCase):
    """Matched-seed comparisons of TDC and ISFA on a desk-scale world."""

    def setUp(self):
        self.schedule = build_linear_schedule(20, 1e-4, 0.05)
        self.sampler = SamplerConfig(num_steps=5)

    def federate(self, seed, world_config, strategy="fedavg", lambda_tdc=0.1):
        world = generate_world(world_config, seed=seed)
        backbone = init_backbone(world_config.latent_dim, 4, world_config.cond_dim, world_config.id_dim, 16, seed=seed)
        adapters = init_adapters(backbone, world_config.latent_dim, seed=seed)
        local = LocalTrainConfig(
            local_epochs=2, batch_size=2, learning_rate=0.05, loss_weights=LossWeights(lambda_tdc=lambda_tdc)
        )
        federation = FederationConfig(
            rounds=10, client_fraction=0.5, strategy=strategy, gamma=5.0, eval_budget=8, reliability_steps=5
        )
        result = run_federation(
            world, backbone, adapters, self.schedule, world.probes(), federation, local, self.sampler, seed=seed
        )
        return world, backbone, adapters, result

    def mean_jitter(self, world, backbone, adapters):
        jitters = []
        for i, clip in enumerate(world.validation_clips()):
            generated = reverse_sample(
                backbone, adapters, clip.cond, clip.ref_embedding, self.schedule, self.sampler,
                rng=substream(0, "jitter", i),
            )
            jitters.append(eval_temporal(generated)[1])
        return float(np.mean(jitters))

    def test_tdc_term_decreases_and_jitter_does_not_grow(self):
        weights = LossWeights(lambda_tdc=0.1)
        jitter_on, jitter_off = [], []
        for seed in SEEDS:
            world, backbone, initial, with_tdc = self.federate(seed, DESK_WORLD, lambda_tdc=0.1)
            _, _, _, without_tdc = self.federate(seed, DESK_WORLD, lambda_tdc=0.0)
            batch = draw_batch(world.validation_clips(), 32, np.random.default_rng(seed), self.schedule.T_steps)
            probes = world.probes()
            before = batch_loss(backbone, initial, batch, self.schedule, weights, probes).parts.tdc
            after = batch_loss(backbone, with_tdc.final_adapters, batch, self.schedule, weights, probes).parts.tdc
            self.assertLess(after, before, msg=f"seed={seed}")
            jitter_on.append(self.mean_jitter(world, backbone, with_tdc.final_adapters))
            jitter_off.append(self.mean_jitter(world, backbone, without_tdc.final_adapters))
        self.assertLessEqual(np.mean(jitter_on), 1.02 * np.mean(jitter_off))

    def test_isfa_identity_with_unreliable_clients(self):
        world_config = DESK_WORLD.model_copy(update={"unreliable_fraction": 0.25})
        isfa, fedavg = [], []
        for seed in SEEDS:
            self.assertEqual(sum(c.unreliable for c in generate_world(world_config, seed=seed).clients), 2)
            isfa.append(self.federate(seed, world_config, strategy="isfa")[3].best_record.val_identity)
            fedavg.append(self.federate(seed, world_config, strategy="fedavg")[3].best_record.val_identity)
        self.assertGreaterEqual(np.mean(isfa), np.mean(fedavg) - 0.01)


if __name__ == "__main__":
    unittest.main()
