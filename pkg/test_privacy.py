"""Tests for update clipping/noising and pairwise masking."""

import itertools
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from core.errors import MaskingError, NonFiniteLossError
from core.privacy import MaskingSession, clip_and_noise, mask_update, unmask_dropouts
from models.schemas import DpConfig


class ClipAndNoiseTest(unittest.TestCase):
    """Test cases for clip_and_noise."""

    def test_clips_to_norm(self):
        out = clip_and_noise(np.array([3.0, 4.0]), DpConfig(enabled=True, clip_norm=1.0), np.random.default_rng(0))
        assert_allclose(out, [0.6, 0.8], rtol=1e-12)

    def test_inside_ball_unchanged(self):
        delta = np.array([0.3, 0.4])
        out = clip_and_noise(delta, DpConfig(enabled=True, clip_norm=1.0), np.random.default_rng(0))
        assert_array_equal(out, delta)

    def test_disabled_returns_copy(self):
        delta = np.array([30.0, 40.0])
        out = clip_and_noise(delta, DpConfig(enabled=False), np.random.default_rng(0))
        assert_array_equal(out, delta)
        self.assertIsNot(out, delta)

    def test_zero_noise_does_not_consume_rng(self):
        rng = np.random.default_rng(1)
        clip_and_noise(np.ones(4), DpConfig(enabled=True, clip_norm=1.0, noise_multiplier=0.0), rng)
        self.assertEqual(rng.random(), np.random.default_rng(1).random())

    def test_noise_variance(self):
        sigma, clip = 0.7, 2.0
        config = DpConfig(enabled=True, clip_norm=clip, noise_multiplier=sigma)
        rng = np.random.default_rng(2)
        samples = np.array([clip_and_noise(np.zeros(3), config, rng) for _ in range(100_000)])
        expected = (sigma * clip) ** 2
        assert_allclose(samples.var(axis=0), expected, rtol=0.05)

    def test_clipped_norm_never_exceeds_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(10_000):
            clip = float(rng.choice([0.1, 1.0, 3.7]))
            config = DpConfig(enabled=True, clip_norm=clip)
            delta = rng.standard_normal(int(rng.integers(1, 64))) * 10.0 ** rng.uniform(-3, 3)
            out = clip_and_noise(delta, config, rng)
            self.assertLessEqual(np.linalg.norm(out), clip)
            if np.linalg.norm(delta) <= clip:
                assert_array_equal(out, delta)
            else:
                assert_allclose(out * np.linalg.norm(delta), delta * np.linalg.norm(out), rtol=1e-9, atol=1e-12)

    def test_non_finite_update(self):
        with self.assertRaises(NonFiniteLossError):
            clip_and_noise(np.array([1.0, np.nan]), DpConfig(enabled=True), np.random.default_rng(0))


class MaskingTest(unittest.TestCase):
    """Test cases for pairwise masking and dropout recovery."""

    def setUp(self):
        rng = np.random.default_rng(3)
        self.length = 7
        self.protected = {cid: rng.standard_normal(self.length) for cid in (2, 5, 8, 11, 13)}

    def session(self, ids):
        return MaskingSession.open(run_seed=9, round_index=4, participants=ids, length=self.length)

    def test_two_participants_cancel(self):
        session = self.session([2, 5])
        masked = [mask_update(self.protected[cid], cid, session) for cid in (2, 5)]
        self.assertFalse(np.allclose(masked[0], self.protected[2]))
        assert_allclose(masked[0] + masked[1], self.protected[2] + self.protected[5], atol=1e-12)

    def test_single_participant_unmasked(self):
        session = self.session([8])
        assert_array_equal(mask_update(self.protected[8], 8, session), self.protected[8])

    def test_five_participants_sum(self):
        ids = sorted(self.protected)
        session = self.session(ids)
        total = sum(mask_update(self.protected[cid], cid, session) for cid in ids)
        self.assertLessEqual(np.max(np.abs(total - sum(self.protected.values()))), 1e-9)

    def test_pair_mask_symmetric_and_reproducible(self):
        session = self.session([2, 5, 8])
        assert_array_equal(session.pair_mask(2, 5), session.pair_mask(5, 2))
        assert_array_equal(session.pair_mask(2, 5), self.session([2, 5, 8]).pair_mask(2, 5))
        other_round = MaskingSession.open(run_seed=9, round_index=5, participants=[2, 5, 8], length=self.length)
        self.assertFalse(np.array_equal(session.pair_mask(2, 5), other_round.pair_mask(2, 5)))

    def test_no_dropouts_unchanged(self):
        ids = [2, 5, 8]
        session = self.session(ids)
        total = sum(mask_update(self.protected[cid], cid, session) for cid in ids)
        assert_array_equal(unmask_dropouts(total, session, ids, []), total)

    def test_one_dropout_recovered(self):
        ids = [2, 5, 8]
        session = self.session(ids)
        received = sum(mask_update(self.protected[cid], cid, session) for cid in (2, 8))
        corrected = unmask_dropouts(received, session, [2, 8], [5])
        assert_allclose(corrected, self.protected[2] + self.protected[8], atol=1e-9)

    def test_all_but_one_drop(self):
        ids = sorted(self.protected)
        session = self.session(ids)
        received = mask_update(self.protected[11], 11, session)
        corrected = unmask_dropouts(received, session, [11], [2, 5, 8, 13])
        assert_allclose(corrected, self.protected[11], atol=1e-9)

    def test_bookkeeping_errors(self):
        session = self.session([2, 5])
        with self.assertRaises(MaskingError):
            mask_update(self.protected[8], 8, session)
        with self.assertRaises(MaskingError):
            mask_update(np.zeros(3), 2, session)
        with self.assertRaises(MaskingError):
            unmask_dropouts(np.zeros(self.length), session, [2, 5], [5])
        with self.assertRaises(MaskingError):
            unmask_dropouts(np.zeros(self.length), session, [2], [])
        with self.assertRaises(MaskingError):
            MaskingSession.open(0, 1, [1, 1], 3)


class DropoutRecoveryTest(unittest.TestCase):
    """Test cases for masked sums over many participants and dropout patterns."""

    LENGTH = 1000

    def check_patterns(self, n_clients, patterns_for):
        rng = np.random.default_rng(n_clients)
        ids = sorted(int(i) for i in rng.choice(1000, size=n_clients, replace=False))
        protected = {cid: rng.standard_normal(self.LENGTH) for cid in ids}
        session = MaskingSession.open(run_seed=17, round_index=n_clients, participants=ids, length=self.LENGTH)
        masked = {cid: mask_update(protected[cid], cid, session) for cid in ids}
        checked = 0
        for dropped in patterns_for(ids, rng):
            dropped = set(dropped)
            received = [cid for cid in ids if cid not in dropped]
            received_sum = np.sum([masked[cid] for cid in received], axis=0)
            corrected = unmask_dropouts(received_sum, session, received, sorted(dropped))
            expected = np.sum([protected[cid] for cid in received], axis=0)
            self.assertLessEqual(np.max(np.abs(corrected - expected)), 1e-9, msg=f"dropped={sorted(dropped)}")
            checked += 1
        return checked

    def test_every_pattern_up_to_half_small_rounds(self):
        def every_pattern(ids, rng):
            for count in range(len(ids) // 2 + 1):
                yield from itertools.combinations(ids, count)

        for n_clients, total in ((5, 16), (6, 42), (10, 638)):
            with self.subTest(clients=n_clients):
                self.assertEqual(self.check_patterns(n_clients, every_pattern), total)

    def test_sampled_patterns_up_to_half_large_rounds(self):
        def sampled_patterns(ids, rng):
            for count in range(1, len(ids) // 2 + 1):
                for _ in range(3):
                    yield [ids[i] for i in rng.choice(len(ids), size=count, replace=False)]

        for n_clients in (20, 50):
            with self.subTest(clients=n_clients):
                self.assertEqual(self.check_patterns(n_clients, sampled_patterns), 3 * (n_clients // 2))


if __name__ == "__main__":
    unittest.main()
