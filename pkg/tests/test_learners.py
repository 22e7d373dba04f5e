import numpy as np
import pytest

from dualmem.ema import MemoryPairConfig
from dualmem.learners import (
    LEARNERS,
    ClsErLearner,
    ErLearner,
    Learner,
    LearnerConfig,
    MeanErLearner,
    make_learner,
    train_joint,
)
from dualmem.nn import Architecture, Batch, ParamVector

ARCH = Architecture(6, (5,), 3)
PAIR = MemoryPairConfig(alpha_P=0.99, alpha_S=0.99, rate_P=1.0, rate_S=0.9)


def replay_config(**kw):
    base = dict(lr=0.1, batch_size=4, lam=0.5, memory_batch_size=3,
                buffer_budget=16, memory_pair=PAIR, single_memory=(0.99, 1.0))
    base.update(kw)
    return LearnerConfig(**base)


def stream(n_batches, seed=0, batch_size=4):
    rng = np.random.default_rng(seed)
    return [Batch(rng.random((batch_size, ARCH.input_dim)),
                  rng.integers(0, ARCH.output_dim, batch_size))
            for _ in range(n_batches)]


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lr": 0.0}, {"lr": -1.0},
                                    {"batch_size": 0}, {"lam": -0.1}])
    def test_invalid_values_rejected(self, kw):
        with pytest.raises(ValueError):
            replay_config(**kw)

    def test_replay_learners_require_buffer(self):
        with pytest.raises(ValueError):
            ErLearner(ARCH, replay_config(buffer_budget=0), seed=0)
        with pytest.raises(ValueError):
            ErLearner(ARCH, replay_config(memory_batch_size=0), seed=0)

    def test_dual_memory_learner_requires_pair(self):
        with pytest.raises(ValueError):
            ClsErLearner(ARCH, replay_config(memory_pair=None), seed=0)

    def test_single_memory_learner_requires_decay_and_rate(self):
        with pytest.raises(ValueError):
            MeanErLearner(ARCH, replay_config(single_memory=None), seed=0)

    def test_registry_round_trip(self):
        assert set(LEARNERS) == {"sgd", "er", "cls-er", "mean-er"}
        for tag, cls in LEARNERS.items():
            assert make_learner(tag, ARCH, replay_config(), seed=0).tag == tag
            assert cls.tag == tag

    def test_unknown_tag_rejected(self):
        with pytest.raises(ValueError, match="unknown learner"):
            make_learner("ewc", ARCH, replay_config(), seed=0)


class TestComponents:
    def test_component_sets(self):
        assert Learner.components == ("working",)
        assert ClsErLearner.components == ("working", "plastic", "stable")
        assert MeanErLearner.components == ("working", "ema")

    def test_default_inference_uses_stable_model(self):
        learner = ClsErLearner(ARCH, replay_config(), seed=0)
        for batch in stream(5):
            learner.observe(batch)
        x = np.random.default_rng(1).random((3, ARCH.input_dim))
        np.testing.assert_array_equal(learner.predict(x),
                                      learner.predict(x, which="stable"))
        assert not np.array_equal(learner.predict(x),
                                  learner.predict(x, which="working"))

    def test_unknown_component_rejected(self):
        learner = ErLearner(ARCH, replay_config(), seed=0)
        with pytest.raises(ValueError, match="no 'stable' component"):
            learner.predict(np.zeros((1, ARCH.input_dim)), which="stable")


class TestSelectionRule:
    """Per-exemplar choice between the two memory snapshots."""

    def _learner_with_bias_only_memories(self, bias_p, bias_s):
        arch = Architecture(2, (2,), 2)
        cfg = replay_config(memory_batch_size=2, buffer_budget=4)
        learner = ClsErLearner(arch, cfg, seed=0)
        for mem, bias in ((learner.plastic, bias_p), (learner.stable, bias_s)):
            flat = np.zeros(arch.n_params)
            pv = ParamVector(flat, arch.layout())
            pv.views()["b1"][...] = bias
            mem.params = pv
        return learner

    def test_memory_with_higher_ground_truth_mass_wins(self):
        # zero weights: both memories emit their output bias for any input;
        # plastic favors class 0, stable favors class 1
        learner = self._learner_with_bias_only_memories([1.0, 0.0], [0.0, 1.0])
        mem = Batch(np.zeros((2, 2)), np.array([0, 1]))
        targets = learner._consistency_targets(mem)
        np.testing.assert_array_equal(targets[0], [1.0, 0.0])
        np.testing.assert_array_equal(targets[1], [0.0, 1.0])

    def test_exact_tie_goes_to_stable_model(self):
        # softmax([2,0])[0] == softmax([0,-2])[0], but the logits differ
        learner = self._learner_with_bias_only_memories([2.0, 0.0], [0.0, -2.0])
        mem = Batch(np.zeros((1, 2)), np.array([0]))
        targets = learner._consistency_targets(mem)
        np.testing.assert_array_equal(targets[0], [0.0, -2.0])

    def test_selection_is_per_exemplar_not_per_batch(self):
        learner = self._learner_with_bias_only_memories([1.0, 0.0], [0.0, 1.0])
        mem = Batch(np.zeros((4, 2)), np.array([0, 1, 0, 1]))
        targets = learner._consistency_targets(mem)
        np.testing.assert_array_equal(targets[:, 0], [1.0, 0.0, 1.0, 0.0])


class TestTrajectories:
    def test_degenerate_dual_memory_reduces_to_plain_replay(self):
        # lam 0 disables the consistency term; alpha 0 with rate 1 pins both
        # memories to the working weights; the working trajectory must then
        # match plain replay bit for bit
        degenerate = MemoryPairConfig(alpha_P=0.0, alpha_S=0.0,
                                      rate_P=1.0, rate_S=1.0, check=False)
        cls_er = ClsErLearner(ARCH, replay_config(lam=0.0, memory_pair=degenerate), seed=3)
        er = ErLearner(ARCH, replay_config(lam=0.0), seed=3)
        for batch in stream(30, seed=5):
            cls_er.observe(batch)
            er.observe(batch)
        np.testing.assert_array_equal(cls_er.working.params.values,
                                      er.working.params.values)
        np.testing.assert_array_equal(cls_er.stable.params.values,
                                      cls_er.working.params.values)

    def test_same_seed_same_trajectory(self):
        runs = []
        for _ in range(2):
            learner = ClsErLearner(ARCH, replay_config(), seed=7)
            for batch in stream(20, seed=1):
                learner.observe(batch)
            runs.append(learner)
        for which in ClsErLearner.components:
            np.testing.assert_array_equal(
                runs[0].component_network(which).params.values,
                runs[1].component_network(which).params.values)

    def test_different_seeds_diverge(self):
        nets = []
        for seed in (0, 1):
            learner = ErLearner(ARCH, replay_config(), seed=seed)
            for batch in stream(10, seed=2):
                learner.observe(batch)
            nets.append(learner.working.params.values)
        assert not np.array_equal(nets[0], nets[1])

    def test_memories_trail_the_working_model(self):
        learner = ClsErLearner(ARCH, replay_config(), seed=0)
        init = learner.working.params.values.copy()
        for batch in stream(40, seed=3):
            learner.observe(batch)
        w = learner.working.params.values
        s = learner.stable.params.values
        assert np.linalg.norm(s - init) < np.linalg.norm(w - init)
        assert np.linalg.norm(s - init) > 0

    def test_loss_report_terms(self):
        learner = ClsErLearner(ARCH, replay_config(lam=2.0), seed=0)
        first = learner.observe(stream(1, seed=4)[0])
        assert first.mse_term == 0.0  # no memory exemplars yet
        later = None
        for batch in stream(5, seed=5):
            later = learner.observe(batch)
        assert later.mse_term > 0.0
        assert later.lam == 2.0
        assert later.total == pytest.approx(later.ce_term + 2.0 * later.mse_term)


class TestBufferDiscipline:
    @pytest.mark.parametrize("cls", [ErLearner, ClsErLearner, MeanErLearner])
    def test_seen_count_tracks_stream_only(self, cls):
        learner = cls(ARCH, replay_config(), seed=0)
        for batch in stream(12, seed=6):
            learner.observe(batch)
        assert learner.buffer.seen_count == 12 * 4

    def test_step_count_increments_once_per_observe(self):
        learner = ClsErLearner(ARCH, replay_config(), seed=0)
        for i, batch in enumerate(stream(5, seed=0), start=1):
            learner.observe(batch)
            assert learner.step_count == i


class TestState:
    @pytest.mark.parametrize("tag", ["sgd", "er", "cls-er", "mean-er"])
    def test_roundtrip_resumes_identically(self, tag):
        batches = stream(20, seed=8)
        a = make_learner(tag, ARCH, replay_config(), seed=4)
        for batch in batches[:10]:
            a.observe(batch)
        b = make_learner(tag, ARCH, replay_config(), seed=999)
        b.set_state(a.get_state())
        for batch in batches[10:]:
            a.observe(batch)
            b.observe(batch)
        for which in a.components:
            np.testing.assert_array_equal(
                a.component_network(which).params.values,
                b.component_network(which).params.values)


class TestJoint:
    def test_matches_manual_sgd_loop(self):
        batches = stream(15, seed=9)
        cfg = LearnerConfig(lr=0.05, batch_size=4)
        net = train_joint(batches, ARCH, cfg, seed=2)
        manual = Learner(ARCH, cfg, seed=2)
        for batch in batches:
            manual.observe(batch)
        np.testing.assert_array_equal(net.params.values,
                                      manual.working.params.values)
