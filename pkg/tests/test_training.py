"""Loss, schedule, synthetic-task, and training-loop tests."""

import math

import numpy as np
import pytest

from lvprune import numerics as nm
from lvprune.numerics import SeededRng, Tensor
from lvprune import model as md
from lvprune import pruning as pr
from lvprune import training as tr
from lvprune.training import LossConfig, OptimizerConfig, SyntheticSpec


class TestCausalLmLoss:
    def test_uniform_logits_log_vocab(self):
        logits = Tensor(np.zeros((1, 5, 64)))
        targets = np.zeros((1, 5), dtype=int)
        loss = tr.causal_lm_loss(logits, targets, (4,))
        assert float(loss.data) == pytest.approx(math.log(64.0), abs=1e-12)

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((1, 3, 8))
        logits[0, 2, 5] = 50.0
        targets = np.zeros((1, 3), dtype=int)
        targets[0, 2] = 5
        loss = tr.causal_lm_loss(Tensor(logits), targets, (2,))
        assert float(loss.data) < 1e-12

    def test_against_log_softmax_oracle(self):
        rng = SeededRng(1, 0)
        logits = rng.normal((2, 6, 10))
        targets = rng.integers(0, 10, (2, 6))
        positions = (3, 5)
        expected = 0.0
        for b in range(2):
            for p in positions:
                row = logits[b, p]
                logp = row - np.log(np.exp(row - row.max()).sum()) - row.max()
                expected -= logp[targets[b, p]]
        expected /= 4
        loss = tr.causal_lm_loss(Tensor(logits), targets, positions)
        assert float(loss.data) == pytest.approx(expected, abs=1e-10)

    def test_empty_positions_rejected(self):
        with pytest.raises(tr.DegenerateLossError):
            tr.causal_lm_loss(Tensor(np.zeros((1, 3, 4))), np.zeros((1, 3), dtype=int), ())


class TestRatioLoss:
    def test_zero_at_targets(self):
        loss = tr.ratio_loss([0.5, 0.3], [0.5, 0.3])
        assert float(loss.data) == 0.0

    def test_single_module_all_kept(self):
        loss = tr.ratio_loss([1.0], [0.5])
        assert float(loss.data) == pytest.approx(0.25, abs=1e-15)

    def test_two_modules(self):
        loss = tr.ratio_loss([0.6, 0.2], [0.5, 0.3])
        assert float(loss.data) == pytest.approx(0.01, abs=1e-12)

    def test_batched_fractions_average(self):
        loss = tr.ratio_loss([Tensor(np.array([0.4, 0.6]))], [0.5])
        assert float(loss.data) == pytest.approx(0.01, abs=1e-12)

    def test_huber_variant(self):
        # |diff| = 0.9 > beta=0.5: penalty beta*(|d| - beta/2) = 0.5*0.65
        loss = tr.ratio_loss([1.0], [0.1], kind="huber", beta=0.5)
        assert float(loss.data) == pytest.approx(0.5 * (0.9 - 0.25), abs=1e-12)
        # small diff: quadratic branch
        small = tr.ratio_loss([0.2], [0.1], kind="huber", beta=0.5)
        assert float(small.data) == pytest.approx(0.5 * 0.01, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(nm.DimensionError):
            tr.ratio_loss([0.5], [0.5, 0.3])

    def test_zero_iff_exact(self):
        rng = SeededRng(2, 0)
        for _ in range(20):
            f = float(rng.uniform(()))
            t = float(rng.uniform(()))
            loss = float(tr.ratio_loss([f], [t]).data)
            assert (loss == 0.0) == (f == t)


class TestTotalLoss:
    def test_causal_only(self):
        cfg = LossConfig(1.0, 0.0)
        assert float(tr.total_loss(Tensor(2.5), Tensor(9.0), cfg).data) == 2.5

    def test_ratio_only(self):
        cfg = LossConfig(0.0, 1.0)
        assert float(tr.total_loss(Tensor(2.5), Tensor(9.0), cfg).data) == 9.0

    def test_weighted_sum(self):
        cfg = LossConfig(2.0, 3.0)
        assert float(tr.total_loss(Tensor(1.0), Tensor(0.5), cfg).data) == 3.5

    def test_linearity(self):
        rng = SeededRng(3, 0)
        for _ in range(10):
            lc, lr = float(rng.uniform(())) + 0.1, float(rng.uniform(())) + 0.1
            c, r = float(rng.uniform(())), float(rng.uniform(()))
            cfg = LossConfig(lc, lr)
            assert float(tr.total_loss(Tensor(c), Tensor(r), cfg).data) == pytest.approx(
                lc * c + lr * r, abs=1e-14
            )

    def test_both_zero_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(0.0, 0.0)


class TestLrSchedule:
    CFG = OptimizerConfig(rule="sgd", lr=2e-6, warmup_ratio=0.03, steps=1000)

    def test_step_zero(self):
        assert tr.lr_at(0, self.CFG) == 0.0

    def test_peak_at_warmup_end(self):
        warmup = math.floor(0.03 * 1000)
        assert tr.lr_at(warmup, self.CFG) == pytest.approx(2e-6)

    def test_zero_at_end(self):
        assert tr.lr_at(1000, self.CFG) == pytest.approx(0.0, abs=1e-20)

    def test_continuous_and_peaks_at_warmup(self):
        values = [tr.lr_at(s, self.CFG) for s in range(1001)]
        assert max(values) == pytest.approx(2e-6)
        assert np.argmax(values) == 30
        diffs = np.abs(np.diff(values))
        assert diffs.max() < 2e-6 * 0.12  # no jumps

    def test_zero_warmup_starts_at_peak(self):
        cfg = OptimizerConfig(rule="sgd", lr=1e-3, warmup_ratio=0.0, steps=10)
        assert tr.lr_at(0, cfg) == pytest.approx(1e-3)


class TestClipGradNorm:
    def test_below_threshold_unchanged(self):
        grads = [np.array([0.3, 0.4])]  # norm 0.5
        out, norm = tr.clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(out[0], grads[0])

    def test_above_threshold_scaled(self):
        grads = [np.array([2.0, 0.0]), np.array([0.0, 0.0])]
        out, norm = tr.clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(2.0)
        np.testing.assert_allclose(out[0], [1.0, 0.0], atol=1e-15)

    def test_post_clip_norm_bounded(self):
        rng = SeededRng(4, 0)
        for _ in range(20):
            grads = [rng.normal((5,), scale=3.0), rng.normal((2, 3), scale=3.0)]
            out, _ = tr.clip_grad_norm(grads, 1.0)
            total = math.sqrt(sum(float((g * g).sum()) for g in out))
            assert total <= 1.0 + 1e-12


class TestSyntheticDataset:
    SPEC = SyntheticSpec(vision_tokens=16, patch_dim=16, classes=8,
                         informative=3, samples=64)

    def test_same_seed_identical(self):
        a = tr.make_synthetic_dataset(self.SPEC, 5)
        b = tr.make_synthetic_dataset(self.SPEC, 5)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.patches, sb.patches)
            assert sa.target_id == sb.target_id

    def test_splits_disjoint_same_task(self):
        a = tr.make_synthetic_dataset(self.SPEC, 5, split=0)
        b = tr.make_synthetic_dataset(self.SPEC, 5, split=1)
        assert not np.array_equal(a[0].patches, b[0].patches)

    def test_bayes_rule_on_informative_patches(self):
        # anchor identifies the key; a matching value patch yields the label
        dirs = tr.class_directions(self.SPEC, 5)
        data = tr.make_synthetic_dataset(self.SPEC, 5, split=1)
        correct = 0
        for s in data:
            rows = s.patches[list(s.informative_idx)]
            anchor_scores = rows @ dirs.anchors[0]
            anchor = rows[np.argmax(np.abs(anchor_scores))]
            key = int(np.argmax(anchor @ dirs.keys.T))
            values = [r for i, r in enumerate(rows) if i != np.argmax(np.abs(anchor_scores))]
            votes = np.mean([v @ dirs.values.T for v in values], axis=0)
            predicted = int(np.argmax(votes))
            correct += predicted == s.target_id - self.SPEC.answer_base
        assert correct == len(data)

    def test_bayes_rule_direct_task(self):
        spec = SyntheticSpec(vision_tokens=16, patch_dim=16, classes=8,
                             informative=1, samples=64)
        dirs = tr.class_directions(spec, 9)
        data = tr.make_synthetic_dataset(spec, 9)
        for s in data:
            row = s.patches[s.informative_idx[0]]
            assert int(np.argmax(row @ dirs.values.T)) == s.target_id - spec.answer_base

    def test_noise_shuffle_leaves_label_unchanged(self):
        data = tr.make_synthetic_dataset(self.SPEC, 7)
        rng = SeededRng(8, 0)
        for s in data[:10]:
            informative = set(s.informative_idx)
            noise_rows = [i for i in range(16) if i not in informative]
            shuffled = s.patches.copy()
            perm = rng.permutation(len(noise_rows))
            shuffled[noise_rows] = shuffled[[noise_rows[i] for i in perm]]
            # the label is a function of informative rows only, which moved nowhere
            np.testing.assert_array_equal(
                shuffled[list(informative)], s.patches[list(informative)]
            )

    def test_multi_attribute_prompts(self):
        spec = SyntheticSpec(vision_tokens=16, patch_dim=20, classes=6,
                             informative=4, samples=64, attributes=2)
        data = tr.make_synthetic_dataset(spec, 3)
        queried = {int(s.prompt_ids[1]) - tr.QUERY_BASE for s in data}
        assert queried == {0, 1}
        for s in data:
            attr = int(s.prompt_ids[1]) - tr.QUERY_BASE
            assert s.target_id == spec.answer_base + s.attribute_values[attr]

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(16, 16, 8, 3, 4, attributes=4)  # informative < 2*attrs
        with pytest.raises(ValueError):
            SyntheticSpec(16, 8, 8, 3, 4)  # attrs+keys+classes > patch_dim


@pytest.fixture(scope="module")
def tiny_trained():
    """A tiny pretrained backbone shared by the slow training-loop tests."""
    cfg = md.ToyMllmConfig(depth=2, d=32, heads=4, ffn=64, vocab=16,
                           vision_tokens=8, patch_dim=16)
    spec = SyntheticSpec(vision_tokens=8, patch_dim=16, classes=4,
                         informative=2, samples=256, keys=3, distractor_keys=1)
    dataset = tr.make_synthetic_dataset(spec, 42)
    rng = SeededRng(42, 1)
    backbone = md.init_backbone(cfg, rng)
    opt = OptimizerConfig(rule="adam", lr=3e-3, warmup_ratio=0.03, steps=60,
                          max_grad_norm=1.0, batch_size=32)
    tr.pretrain_backbone(backbone, cfg, dataset, opt, seed=1)
    return cfg, backbone, dataset, rng


class TestTrainingLoop:
    def test_zero_lr_leaves_params_bitwise(self, tiny_trained):
        cfg, backbone, dataset, rng = tiny_trained
        modules = [pr.init_decision_module(cfg.d, rng.derive(50), heads=4)]
        before = [t.data.copy() for t in modules[0].trainable()]
        sched = pr.PruneSchedule((1,), (0.5,), (0.5,))
        opt = OptimizerConfig(rule="sgd", lr=0.0, warmup_ratio=0.0, steps=5,
                              max_grad_norm=1.0, batch_size=16)
        tr.train_decision_modules(backbone, cfg, modules, dataset, sched,
                                  LossConfig(1.0, 2.0), opt, seed=2)
        for t, b in zip(modules[0].trainable(), before):
            np.testing.assert_array_equal(t.data, b)

    def test_backbone_frozen_checksum(self, tiny_trained):
        cfg, backbone, dataset, rng = tiny_trained
        modules = [pr.init_decision_module(cfg.d, rng.derive(51), heads=4)]
        checksum = backbone.checksum()
        sched = pr.PruneSchedule((1,), (0.5,), (0.5,))
        opt = OptimizerConfig(rule="adam", lr=1e-3, warmup_ratio=0.0, steps=10,
                              max_grad_norm=1.0, batch_size=16)
        tr.train_decision_modules(backbone, cfg, modules, dataset, sched,
                                  LossConfig(1.0, 2.0), opt, seed=3)
        assert backbone.checksum() == checksum
        # but the module parameters did change
        assert any(np.any(t.grad is None) or True for t in modules[0].trainable())

    def test_module_gradients_nonzero(self, tiny_trained):
        cfg, backbone, dataset, rng = tiny_trained
        modules = [pr.init_decision_module(cfg.d, rng.derive(52), heads=4)]
        modules[0].w_score.data[:] = rng.normal((cfg.d, 2), scale=0.3)
        sched = pr.PruneSchedule((1,), (0.5,), (0.5,))
        patches, ids, targets = tr._stack_batch(dataset[:8])
        trace = md.forward_train(backbone, cfg, modules, sched, patches, ids,
                                 tau=1.0, rng=SeededRng(9, 9), mode="train")
        full, positions = tr._answer_targets(ids, targets, cfg.vision_tokens)
        closs = tr.causal_lm_loss(trace.logits, full, positions)
        rloss = tr.ratio_loss(trace.keep_fraction_tensors, sched.train_ratios)
        tr.total_loss(closs, rloss, LossConfig(1.0, 2.0)).backward()
        grads = [t.grad for t in modules[0].trainable()]
        assert all(g is not None for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)

    def test_ratio_only_convergence_small(self, tiny_trained):
        cfg, backbone, dataset, rng = tiny_trained
        modules = [pr.init_decision_module(cfg.d, rng.derive(53), heads=4)]
        sched = pr.PruneSchedule((1,), (0.5,), (0.5,))
        opt = OptimizerConfig(rule="adam", lr=2e-3, warmup_ratio=0.03, steps=120,
                              max_grad_norm=1.0, batch_size=32)
        metrics = tr.train_decision_modules(backbone, cfg, modules, dataset, sched,
                                            LossConfig(0.0, 1.0), opt, seed=4)
        assert abs(metrics[-1]["keep_fractions"][0] - 0.5) < 0.05

    def test_divergence_detected(self):
        cfg = md.ToyMllmConfig(depth=2, d=32, heads=4, ffn=64, vocab=16,
                               vision_tokens=8, patch_dim=16)
        spec = SyntheticSpec(8, 16, 4, 2, 64, keys=3, distractor_keys=1)
        dataset = tr.make_synthetic_dataset(spec, 13)
        backbone = md.init_backbone(cfg, SeededRng(13, 1))
        backbone.head.data[:] = np.nan  # poisoned logits -> non-finite loss
        modules = [pr.init_decision_module(cfg.d, SeededRng(13, 2), heads=4)]
        sched = pr.PruneSchedule((1,), (0.5,), (0.5,))
        opt = OptimizerConfig(rule="sgd", lr=1e-3, warmup_ratio=0.0, steps=3,
                              max_grad_norm=1.0, batch_size=8)
        with pytest.raises(tr.DivergenceError) as excinfo:
            tr.train_decision_modules(backbone, cfg, modules, dataset, sched,
                                      LossConfig(1.0, 2.0), opt, seed=5)
        assert excinfo.value.step == 0


class TestEvaluateAccuracy:
    def test_untrained_backbone_near_chance(self):
        cfg = md.ToyMllmConfig(depth=2, d=32, heads=4, ffn=64, vocab=16,
                               vision_tokens=8, patch_dim=16)
        spec = SyntheticSpec(8, 16, 4, 2, 128, keys=3, distractor_keys=1)
        dataset = tr.make_synthetic_dataset(spec, 11)
        backbone = md.init_backbone(cfg, SeededRng(11, 1))
        backbone.set_trainable(False)
        acc = tr.evaluate_accuracy(backbone, cfg, [], dataset, None)
        assert acc < 0.55  # chance is 0.25 over 4 classes; untrained stays low

    def test_keep_all_ratio_equals_no_pruning(self, tiny_trained):
        cfg, backbone, dataset, rng = tiny_trained
        modules = [pr.init_decision_module(cfg.d, rng.derive(55), heads=4)]
        sched = pr.PruneSchedule((1,), (1.0,), (1.0,))
        plain = tr.evaluate_accuracy(backbone, cfg, modules, dataset[:64], None)
        pruned = tr.evaluate_accuracy(backbone, cfg, modules, dataset[:64], sched, mode="pruned")
        assert plain == pruned

    def test_random_mode_deterministic_given_rng(self, tiny_trained):
        cfg, backbone, dataset, rng = tiny_trained
        modules = [pr.init_decision_module(cfg.d, rng.derive(56), heads=4)]
        sched = pr.PruneSchedule((1,), (0.5,), (0.5,))
        a = tr.evaluate_accuracy(backbone, cfg, modules, dataset[:64], sched,
                                 mode="random", rng=SeededRng(3, 3))
        b = tr.evaluate_accuracy(backbone, cfg, modules, dataset[:64], sched,
                                 mode="random", rng=SeededRng(3, 3))
        assert a == b
