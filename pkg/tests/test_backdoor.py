from __future__ import annotations

import numpy as np
import pytest

from backx.backdoor import (
    MAX_INVISIBLE_AMPLITUDE,
    PoisonPlan,
    TriggerSpec,
    build_patch_trigger,
    eligible_pairs,
    load_poisoned,
    make_sample_specific_trigger,
    make_watermark_trigger,
    poison_dataset,
    sample_perturbation,
    save_poisoned,
    stamp,
    verify_trojan,
)
from backx.data import ImageBatch, synthesize_dataset
from backx.errors import DomainError, EmptyPoisonError, IngestionError, InputError
from backx.models import TrainingSchedule


def _spec(shape=(3, 8, 8), alpha=0.5):
    return build_patch_trigger(shape, patch_size=4, alpha=alpha)


def _batch(n=6, shape=(3, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.uniform(0, 1, (n,) + shape).astype(np.float32),
                      rng.integers(0, 3, n), np.arange(n))


class TestWatermarkBlend:
    def test_single_pixel_hand_value(self):
        # inside the mask: 0.5 * 0.8 + 0.5 * 0.4 = 0.6
        pattern = np.full((1, 1, 1), 0.8, np.float32)
        mask = np.ones((1, 1), np.float32)
        out = make_watermark_trigger(pattern, mask, 0.5,
                                     np.full((1, 1, 1), 0.4, np.float32))
        assert abs(out[0, 0, 0] - 0.6) < 1e-7

    def test_alpha_one_is_pattern(self):
        pattern = np.random.default_rng(0).uniform(0, 1, (3, 4, 4)).astype(np.float32)
        mask = np.ones((4, 4), np.float32)
        x = np.random.default_rng(1).uniform(0, 1, (3, 4, 4)).astype(np.float32)
        out = make_watermark_trigger(pattern, mask, 1.0, x)
        assert np.allclose(out, pattern, atol=1e-7)

    def test_alpha_zero_is_image(self):
        pattern = np.ones((3, 4, 4), np.float32)
        mask = np.ones((4, 4), np.float32)
        x = np.random.default_rng(2).uniform(0, 1, (3, 4, 4)).astype(np.float32)
        out = make_watermark_trigger(pattern, mask, 0.0, x)
        assert np.allclose(out, x, atol=1e-7)

    def test_alpha_out_of_range(self):
        for alpha in (-0.1, 1.1):
            with pytest.raises(DomainError):
                TriggerSpec("fixed_watermark", np.ones((3, 2, 2), np.float32),
                            np.ones((2, 2), np.float32), alpha)


class TestPatchTrigger:
    def test_mask_popcount_and_ratio(self):
        spec = build_patch_trigger((3, 32, 32), patch_size=6, alpha=0.5)
        assert int(spec.mask.sum()) == 36
        assert abs(spec.trigger_ratio - 36 / 1024) < 1e-12

    def test_bottom_right_placement(self):
        spec = build_patch_trigger((3, 16, 16), patch_size=4, alpha=0.5, margin=1)
        ys, xs = np.nonzero(spec.mask)
        assert ys.min() == 11 and ys.max() == 14
        assert xs.min() == 11 and xs.max() == 14

    def test_checker_alternates(self):
        spec = build_patch_trigger((3, 16, 16), patch_size=4, alpha=1.0, style="checker")
        ys, xs = np.nonzero(spec.mask)
        vals = spec.pattern[0, ys, xs]
        parity = ((ys + xs) % 2).astype(np.float32)
        assert np.array_equal(vals, parity)
        assert np.array_equal(spec.pattern[1, ys, xs], 1.0 - parity)

    def test_random_style_seeded(self):
        a = build_patch_trigger((3, 8, 8), 3, 0.5, style="random", pattern_seed=7)
        b = build_patch_trigger((3, 8, 8), 3, 0.5, style="random", pattern_seed=7)
        c = build_patch_trigger((3, 8, 8), 3, 0.5, style="random", pattern_seed=8)
        assert np.array_equal(a.pattern, b.pattern)
        assert not np.array_equal(a.pattern, c.pattern)

    def test_patch_too_big(self):
        with pytest.raises(InputError):
            build_patch_trigger((3, 8, 8), patch_size=8, alpha=0.5, margin=1)

    def test_mask_must_be_binary(self):
        with pytest.raises(InputError):
            TriggerSpec("fixed_watermark", np.ones((3, 2, 2), np.float32),
                        np.full((2, 2), 0.5, np.float32), 0.5)


class TestStamp:
    def test_pixels_outside_mask_untouched(self):
        spec = _spec()
        batch = _batch()
        stamped = stamp(batch, spec)
        outside = spec.mask == 0
        assert np.array_equal(stamped.pixels[:, :, outside], batch.pixels[:, :, outside])

    def test_pixels_inside_mask_blended(self):
        spec = _spec(alpha=0.5)
        batch = _batch()
        stamped = stamp(batch, spec)
        ys, xs = np.nonzero(spec.mask)
        want = 0.5 * spec.pattern[:, ys, xs] + 0.5 * batch.pixels[:, :, ys, xs]
        assert np.allclose(stamped.pixels[:, :, ys, xs], want, atol=1e-6)

    def test_labels_and_indices_preserved(self):
        batch = _batch()
        stamped = stamp(batch, _spec())
        assert np.array_equal(stamped.labels, batch.labels)
        assert np.array_equal(stamped.indices, batch.indices)

    def test_original_not_mutated(self):
        batch = _batch()
        before = batch.pixels.copy()
        stamp(batch, _spec())
        assert np.array_equal(batch.pixels, before)


class TestSampleSpecific:
    def test_perturbation_deterministic_per_index(self):
        spec = make_sample_specific_trigger(key=123, amplitude=8 / 255)
        a = sample_perturbation(spec, 5, (3, 8, 8))
        b = sample_perturbation(spec, 5, (3, 8, 8))
        c = sample_perturbation(spec, 6, (3, 8, 8))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_amplitude_bound(self):
        spec = make_sample_specific_trigger(key=9, amplitude=10 / 255)
        pert = sample_perturbation(spec, 0, (3, 16, 16))
        assert np.abs(pert).max() <= 10 / 255 + 1e-9

    def test_visible_amplitude_rejected(self):
        with pytest.raises(DomainError):
            make_sample_specific_trigger(key=1, amplitude=MAX_INVISIBLE_AMPLITUDE * 2)

    def test_stamp_keeps_pixels_in_range(self):
        spec = make_sample_specific_trigger(key=4, amplitude=MAX_INVISIBLE_AMPLITUDE)
        batch = _batch()
        stamped = stamp(batch, spec)
        assert stamped.pixels.min() >= 0.0 and stamped.pixels.max() <= 1.0

    def test_stamp_differs_across_samples(self):
        spec = make_sample_specific_trigger(key=4, amplitude=8 / 255)
        pixels = np.full((2, 3, 8, 8), 0.5, np.float32)
        batch = ImageBatch(pixels, np.zeros(2, np.int64), np.arange(2))
        stamped = stamp(batch, spec)
        assert not np.array_equal(stamped.pixels[0], stamped.pixels[1])


class TestPoisonDataset:
    def _plan(self, rate=0.1, seed=0):
        return PoisonPlan(_spec((3, 16, 16)), poisoning_rate=rate,
                          target_label=0, seed=seed)

    def test_count_is_floor_of_rate(self):
        ds = synthesize_dataset(4, 50, 16, seed=0)
        poisoned = poison_dataset(ds, self._plan(rate=0.1))
        assert len(poisoned.poisoned_indices) == 20

    def test_rate_too_small(self):
        ds = synthesize_dataset(2, 4, 16, seed=0)
        with pytest.raises(EmptyPoisonError):
            poison_dataset(ds, self._plan(rate=0.01))

    def test_rate_out_of_range(self):
        with pytest.raises(DomainError):
            PoisonPlan(_spec(), poisoning_rate=0.0, target_label=0, seed=0)
        with pytest.raises(DomainError):
            PoisonPlan(_spec(), poisoning_rate=1.5, target_label=0, seed=0)

    def test_indices_sorted_unique(self):
        ds = synthesize_dataset(4, 50, 16, seed=0)
        idx = poison_dataset(ds, self._plan()).poisoned_indices
        assert np.array_equal(idx, np.unique(idx))

    def test_poisoned_rows_relabelled(self):
        ds = synthesize_dataset(4, 50, 16, seed=0)
        poisoned = poison_dataset(ds, self._plan())
        assert (poisoned.train.labels[poisoned.poisoned_indices] == 0).all()

    def test_clean_rows_untouched(self):
        ds = synthesize_dataset(4, 50, 16, seed=0)
        poisoned = poison_dataset(ds, self._plan())
        chosen = np.zeros(len(ds.train), bool)
        chosen[poisoned.poisoned_indices] = True
        assert np.array_equal(poisoned.train.pixels[~chosen], ds.train.pixels[~chosen])
        assert np.array_equal(poisoned.train.labels[~chosen], ds.train.labels[~chosen])

    def test_selection_deterministic(self):
        ds = synthesize_dataset(4, 50, 16, seed=0)
        a = poison_dataset(ds, self._plan(seed=3)).poisoned_indices
        b = poison_dataset(ds, self._plan(seed=3)).poisoned_indices
        c = poison_dataset(ds, self._plan(seed=4)).poisoned_indices
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_save_load_round_trip(self, tmp_path):
        ds = synthesize_dataset(4, 50, 16, seed=0)
        plan = self._plan()
        poisoned = poison_dataset(ds, plan)
        save_poisoned(tmp_path, poisoned)
        loaded = load_poisoned(tmp_path, plan, base=ds)
        assert np.array_equal(loaded.poisoned_indices, poisoned.poisoned_indices)
        assert np.array_equal(loaded.train.pixels, poisoned.train.pixels)
        assert np.array_equal(loaded.train.labels, poisoned.train.labels)

    def test_load_rejects_foreign_trigger(self, tmp_path):
        ds = synthesize_dataset(4, 50, 16, seed=0)
        plan = self._plan()
        save_poisoned(tmp_path, poison_dataset(ds, plan))
        other = PoisonPlan(_spec((3, 16, 16), alpha=0.7), poisoning_rate=0.1,
                           target_label=0, seed=0)
        with pytest.raises(IngestionError):
            load_poisoned(tmp_path, other, base=ds)


class TestTrojanGate:
    def _card(self, clean, poisoned, twin):
        from backx.backdoor import TrojanModelCard

        return TrojanModelCard(model=None, plan=self._plan(),
                               clean_accuracy=clean, poisoned_accuracy=poisoned,
                               benign_twin_accuracy=twin)

    def _plan(self):
        return PoisonPlan(_spec((3, 16, 16)), 0.1, 0, seed=0)

    def test_passes_on_good_card(self):
        gate = verify_trojan(self._card(0.99, 1.0, 1.0))
        assert gate.passed and len(gate.reasons) == 0

    def test_weak_trigger(self):
        gate = verify_trojan(self._card(0.99, 0.8, 1.0))
        assert not gate.passed
        assert any("weak trigger" in r for r in gate.reasons)

    def test_clean_degradation(self):
        gate = verify_trojan(self._card(0.90, 1.0, 0.99))
        assert not gate.passed
        assert any("clean degradation" in r for r in gate.reasons)

    def test_both_reasons_reported(self):
        gate = verify_trojan(self._card(0.5, 0.5, 1.0))
        assert len(gate.reasons) == 2


class TestEligiblePairs:
    def test_target_class_excluded(self):
        ds = synthesize_dataset(4, 30, 16, seed=0)
        spec = _spec((3, 16, 16))
        clean, stamped = eligible_pairs(ds.test, spec, target_label=0)
        assert (clean.labels != 0).all()
        assert np.array_equal(clean.indices, stamped.indices)
        outside = spec.mask == 0
        assert np.array_equal(stamped.pixels[:, :, outside], clean.pixels[:, :, outside])

    def test_limit_respected(self):
        ds = synthesize_dataset(4, 30, 16, seed=0)
        clean, stamped = eligible_pairs(ds.test, _spec((3, 16, 16)),
                                        target_label=0, limit=5)
        assert len(clean) == 5 and len(stamped) == 5


class TestTrojanTraining:
    def test_end_to_end_small(self):
        from backx.backdoor import trojan_train
        from backx.models import create_model

        ds = synthesize_dataset(3, 100, 16, seed=0)
        plan = PoisonPlan(build_patch_trigger((3, 16, 16), 4, 1.0),
                          poisoning_rate=0.15, target_label=0, seed=0)
        poisoned = poison_dataset(ds, plan)
        sched = TrainingSchedule(epochs=14, learning_rate=0.03,
                                 decay_epochs=(11,), seed=0)
        card = trojan_train(
            lambda: create_model("small_cnn", 3, (3, 16, 16), seed=0),
            poisoned, sched)
        assert card.clean_accuracy >= 0.9
        assert card.poisoned_accuracy >= 0.9
        assert card.benign_twin_accuracy >= 0.9
        summary = card.summary()
        assert summary["clean_accuracy"] == card.clean_accuracy
        assert summary["poisoned_accuracy"] == card.poisoned_accuracy
