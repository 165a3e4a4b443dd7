import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import scalar_cosine, scalar_position_norms
from pconvlab.analysis import (ApproxConfig, ZeroChannelWarning, channel_similarity, conv_filters,
                               frobenius_position_norms, network_histogram, run_approximation,
                               salient_histogram, salient_position, split_indices, student_spec,
                               synthetic_dataset)
from pconvlab.arch import ArchConfig, build_config
from pconvlab.errors import ConfigError, ShapeError, TrainingError
from pconvlab.operators import ConvSpec, ConvWeights, init_conv_weights
from pconvlab.tensor import Tensor, tensor_new, uniform_buffer

# normal floats only: scaling subnormals by a power of two is not exact
finite = st.floats(-10, 10, allow_nan=False, width=32).filter(lambda v: v == 0 or abs(v) > 1e-30)


def random_filters(count, k=3, c=6, seed=0):
    return list(uniform_buffer(seed, count * k * k * c, -1, 1).reshape(count, k * k, c))


class TestPositionNorms:
    def test_against_scalar_loops(self):
        for f in random_filters(5, c=7, seed=3):
            np.testing.assert_allclose(frobenius_position_norms(f), scalar_position_norms(f), rtol=1e-12)

    def test_kkc_layout(self):
        f = random_filters(1)[0]
        assert np.array_equal(frobenius_position_norms(f.reshape(3, 3, 6)), frobenius_position_norms(f))

    def test_bad_rank(self):
        with pytest.raises(ShapeError):
            frobenius_position_norms(np.zeros(9))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, (9, 5), elements=finite), st.permutations(range(5)))
    def test_channel_permutation_invariance(self, f, perm):
        np.testing.assert_allclose(frobenius_position_norms(f[:, perm]), frobenius_position_norms(f), rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, (9, 4), elements=finite), st.sampled_from([0.5, 2.0, 4.0, 0.25]))
    def test_power_of_two_scaling(self, f, lam):
        # power-of-two factors make the scaling exact, so the argmax cannot move
        assert np.array_equal(frobenius_position_norms(f * np.float32(lam)), lam * frobenius_position_norms(f))
        assert salient_position(f * np.float32(lam)) == salient_position(f)


class TestHistogram:
    def test_center_only(self):
        f = np.zeros((9, 3))
        f[4] = 1
        assert salient_histogram([f]).as_mapping() == {5: 1}

    def test_two_corners(self):
        a, b = np.zeros((9, 2)), np.zeros((9, 2))
        a[0, 1] = 3
        b[8, 0] = -2
        assert salient_histogram([a, b]).as_mapping() == {1: 1, 9: 1}

    def test_tie_breaks_low(self):
        assert salient_position(np.ones((9, 2))) == 1

    def test_empty(self):
        h = salient_histogram([])
        assert h.total == 0 and h.as_mapping() == {}

    def test_brute_force_recount(self):
        filters = random_filters(100, seed=11)
        expected = np.zeros(9, dtype=int)
        for f in filters:
            norms = scalar_position_norms(f)
            expected[norms.index(max(norms))] += 1
        assert salient_histogram(filters).counts.tolist() == expected.tolist()

    def test_mixed_kernel_sizes(self):
        with pytest.raises(ShapeError):
            salient_histogram([np.zeros((9, 2)), np.zeros((25, 2))])
        with pytest.raises(ShapeError):
            salient_histogram([np.zeros((8, 2))])

    def test_per_stage(self):
        filters = random_filters(4)
        h = salient_histogram(filters, stages=[1, 1, 2, 2])
        assert sum(v.sum() for v in h.per_stage.values()) == 4
        assert h.csv_rows()[0] == ["stage", "position", "count"]
        assert h.to_dict()["total"] == 4

    def test_conv_filter_layout(self):
        w = np.zeros((2, 3, 3, 3), np.float32)
        w[0, 1, 0, 2] = 5  # filter 0, channel 1, position (0, 2) -> index 3
        f = conv_filters(w)[0]
        assert f.shape == (9, 3) and f[2, 1] == 5 and salient_position(f) == 3

    def test_network_histogram_counts_only_3x3(self):
        net = build_config(ArchConfig(8, (1, 1, 1, 1), "relu", num_classes=3, head_width=8))
        h = network_histogram(net)
        # the only 3x3 convs are the partial ones, with c_p = 2, 4, 8, 16 filters per stage
        assert h.total == 2 + 4 + 8 + 16
        assert sorted(h.per_stage) == [1, 2, 3, 4]


class TestSimilarity:
    def test_duplicate_and_negation(self):
        base = uniform_buffer(1, 16, -1, 1).reshape(4, 4)
        x = Tensor(np.stack([base, base, -base]).reshape(1, 3, 4, 4))
        s = channel_similarity(x)
        assert s[0, 1] == pytest.approx(1.0) and s[0, 2] == pytest.approx(-1.0)

    def test_against_scalar_oracle(self):
        x = tensor_new((1, 4, 8, 8), "uniform", seed=5, low=-1, high=1)
        s = channel_similarity(x)
        for i in range(4):
            for j in range(4):
                ref = scalar_cosine(x.data[0, i].ravel(), x.data[0, j].ravel())
                assert s[i, j] == pytest.approx(ref, abs=1e-5)

    def test_zero_channel_flagged(self):
        d = np.zeros((1, 3, 2, 2), np.float32)
        d[0, 0] = 1
        d[0, 2] = 2
        with pytest.warns(ZeroChannelWarning):
            s = channel_similarity(Tensor(d))
        assert s[1].tolist() == [0, 0, 0] and s[:, 1].tolist() == [0, 0, 0]
        assert s[0, 2] == pytest.approx(1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 3), st.integers(0, 10_000))
    def test_symmetric_bounded_unit_diagonal(self, c, n, seed):
        s = channel_similarity(tensor_new((n, c, 4, 4), "uniform", seed=seed, low=-1, high=1))
        assert np.array_equal(s, s.T)
        assert np.all(np.abs(s) <= 1) and np.all(np.diag(s) == 1)


class TestApproximationPlumbing:
    def small_problem(self, c=4, seed=0):
        teacher = ConvSpec.regular(c, c)
        return teacher, init_conv_weights(teacher, seed + 100), synthetic_dataset(40, c, 6, 6, seed)

    def test_split_sizes_and_disjointness(self):
        tr, va, te = split_indices(256, 0)
        assert (len(tr), len(va), len(te)) == (179, 26, 51)
        assert len(set(tr) | set(va) | set(te)) == 256

    def test_student_specs(self):
        assert student_spec("partial", 16).partial_channels == 4
        assert student_spec("group", 16, groups=4).groups == 4
        with pytest.raises(ConfigError):
            student_spec("regular", 16)

    def test_exact_representability(self):
        teacher, tw, data = self.small_problem()
        spatial = ConvSpec.partial(4, 1.0)
        ident = ConvWeights(np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1))
        run = run_approximation(teacher, tw, spatial, data, epochs=5, lr=1.0, init=(tw, ident))
        assert max(run.test) == 0.0 and max(run.train) == 0.0

    def test_convex_objective_monotone(self):
        # with the spatial op frozen the student is linear least squares in the pointwise weights
        teacher, tw, data = self.small_problem(seed=1)
        run = run_approximation(teacher, tw, "depthwise", data, epochs=30, lr=0.5, train_spatial=False)
        steps = np.diff(run.train)
        assert np.all(steps <= 1e-9)
        assert run.train[-1] < run.train[0]

    def test_deterministic(self):
        teacher, tw, data = self.small_problem()
        a = run_approximation(teacher, tw, "partial", data, epochs=5, lr=2.0, seed=3)
        b = run_approximation(teacher, tw, "partial", data, epochs=5, lr=2.0, seed=3)
        assert a.test == b.test and len(a.test) == 6

    def test_minibatch_runs(self):
        teacher, tw, data = self.small_problem()
        run = run_approximation(teacher, tw, "group", data, epochs=3, lr=1.0, groups=2, batch_size=8)
        assert run.final_test_mse < run.test[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self):
        teacher, tw, data = self.small_problem()
        with pytest.raises(TrainingError) as info:
            run_approximation(teacher, tw, "depthwise", data, epochs=200, lr=1e6)
        assert info.value.epoch >= 1

    def test_channel_mismatch(self):
        teacher, tw, _ = self.small_problem()
        with pytest.raises(ShapeError):
            run_approximation(teacher, tw, "partial", synthetic_dataset(8, 3, 4, 4, 0), epochs=1)

    def test_curve_csv(self, tmp_path):
        teacher, tw, data = self.small_problem()
        run = run_approximation(teacher, tw, "partial", data, epochs=2)
        text = run.write_csv(tmp_path / "c.csv").read_text().splitlines()
        assert text[0] == "epoch,train,val,test" and len(text) == 4

    def test_config_json(self):
        cfg = ApproxConfig.from_json({"teacher_seed": 2, "student_kind": "group", "g": 4, "epochs": 2,
                                      "dataset": {"n": 20, "c": 8, "h": 5, "w": 5, "seed": 9}})
        assert (cfg.n, cfg.c, cfg.dataset_seed, cfg.g) == (20, 8, 9, 4)
        assert len(cfg.run().test) == 3
        with pytest.raises(ConfigError):
            ApproxConfig.from_json({"optimizer": "adam"})
        with pytest.raises(ConfigError):
            ApproxConfig.from_json({"dataset": {"depth": 3}})
