"""Tests for the pipeline heads, losses, init, and checkpoints."""

import hashlib
import math
import subprocess
import sys

import numpy as np
import pytest

import cytograd.tensor as T
from cytograd.model import (
    Architecture,
    ModelParams,
    PipelineKind,
    combined_loss_from_probs,
    cross_entropy_from_probs,
    expected_score,
    forward,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from cytograd.tensor import Graph, ShapeError, backward

from oracles import check_op_gradients, combined_loss_scalar


def small_arch(kind):
    # 16x16 input keeps forward/backward cheap in unit tests
    return Architecture.for_kind(kind, input_size=16, conv_channels=(4, 8),
                                 hidden_units=12)


def tiny_batch(rng, n=3, size=16):
    return rng.uniform(0.0, 1.0, size=(n, 3, size, size))


class TestArchitecture:
    def test_param_shapes_default(self):
        shapes = Architecture.for_kind(PipelineKind.COMBINED).param_shapes()
        assert shapes["conv1"] == (8, 3, 3, 3)
        assert shapes["conv2"] == (16, 8, 3, 3)
        assert shapes["conv3"] == (32, 16, 3, 3)
        assert shapes["hidden_w"] == (32, 64)
        assert shapes["head_w"] == (64, 5)

    def test_regressor_head_is_one_unit(self):
        arch = Architecture.for_kind(PipelineKind.REGRESSOR)
        assert arch.head_units == 1
        assert arch.param_shapes()["head_w"] == (64, 1)

    def test_kind_head_mismatch_rejected(self):
        p = init_params(PipelineKind.CLASSIFIER, 0, small_arch(PipelineKind.CLASSIFIER))
        with pytest.raises(ShapeError, match="head"):
            ModelParams(PipelineKind.REGRESSOR, p.arch, p.values)

    def test_indivisible_pooling_rejected(self):
        with pytest.raises(ShapeError):
            Architecture(input_size=50, conv_channels=(8, 16, 32))

    def test_json_round_trip(self):
        arch = small_arch(PipelineKind.REGRESSOR)
        assert Architecture.from_json(arch.to_json()) == arch


class TestForward:
    def test_zero_head_gives_uniform_probs(self):
        params = init_params(PipelineKind.CLASSIFIER, 5, small_arch(PipelineKind.CLASSIFIER))
        params.values["head_w"][:] = 0.0
        params.values["head_b"][:] = 0.0
        fp = forward(params, tiny_batch(np.random.default_rng(0)))
        np.testing.assert_allclose(fp.probs.values, 0.2, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("kind", list(PipelineKind))
    def test_leading_dimension_and_head_shape(self, kind):
        params = init_params(kind, 1, small_arch(kind))
        fp = forward(params, tiny_batch(np.random.default_rng(1), n=4))
        out = fp.score if kind is PipelineKind.REGRESSOR else fp.probs
        assert out.shape == (4, kind.head_units)

    def test_prob_rows_sum_to_one(self):
        params = init_params(PipelineKind.COMBINED, 2, small_arch(PipelineKind.COMBINED))
        fp = forward(params, tiny_batch(np.random.default_rng(2)))
        np.testing.assert_allclose(fp.probs.values.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        params = init_params(PipelineKind.CLASSIFIER, 3, small_arch(PipelineKind.CLASSIFIER))
        with pytest.raises(ShapeError):
            forward(params, np.zeros((2, 3, 32, 32)))

    def test_bit_identical_across_processes(self, tmp_path):
        code = (
            "import hashlib, numpy as np\n"
            "from cytograd.model import Architecture, PipelineKind, forward, init_params\n"
            "arch = Architecture.for_kind(PipelineKind.COMBINED, input_size=16,\n"
            "                             conv_channels=(4, 8), hidden_units=12)\n"
            "params = init_params(PipelineKind.COMBINED, 77, arch)\n"
            "batch = np.random.default_rng(99).uniform(0, 1, (2, 3, 16, 16))\n"
            "fp = forward(params, batch)\n"
            "print(hashlib.sha256(fp.probs.values.tobytes()).hexdigest())\n"
        )
        digests = set()
        for _ in range(2):
            out = subprocess.run([sys.executable, "-c", code],
                                 capture_output=True, text=True, check=True)
            digests.add(out.stdout.strip())
        assert len(digests) == 1


class TestExpectedScore:
    def test_one_hot_endpoints(self):
        g = Graph()
        s = expected_score(g.leaf(np.eye(5)[[0, 4]]))
        np.testing.assert_array_equal(s.values, [[1.0], [5.0]])

    def test_uniform_is_three(self):
        g = Graph()
        s = expected_score(g.leaf(np.full((1, 5), 0.2)))
        np.testing.assert_allclose(s.values, [[3.0]], atol=1e-15)

    def test_two_point_average(self):
        g = Graph()
        s = expected_score(g.leaf(np.array([[0.5, 0.5, 0.0, 0.0, 0.0]])))
        np.testing.assert_allclose(s.values, [[1.5]], atol=1e-15)

    def test_row_sum_violation_rejected(self):
        g = Graph()
        with pytest.raises(ValueError, match="sum to 1"):
            expected_score(g.leaf(np.array([[0.2, 0.2, 0.2, 0.2, 0.3]])))

    def test_mass_transfer_moves_score_linearly(self):
        # moving eps mass from class i to class j changes the score by eps*(j-i)
        rng = np.random.default_rng(8)
        for _ in range(20):
            p = rng.dirichlet(np.ones(5))
            i, j = rng.choice(5, size=2, replace=False)
            eps = min(0.5 * p[i], 0.2)
            q = p.copy()
            q[i] -= eps
            q[j] += eps
            g = Graph()
            s_p = expected_score(g.leaf(p.reshape(1, 5))).values.item()
            s_q = expected_score(g.leaf(q.reshape(1, 5))).values.item()
            assert abs((s_q - s_p) - eps * (j - i)) < 1e-12

    def test_range_is_one_to_five(self):
        rng = np.random.default_rng(9)
        g = Graph()
        s = expected_score(g.leaf(rng.dirichlet(np.ones(5), size=50)))
        assert (s.values >= 1.0).all() and (s.values <= 5.0).all()


class TestLoss:
    def test_perfect_one_hot_combined_is_zero(self):
        g = Graph()
        total = combined_loss_from_probs(g.leaf(np.eye(5)[[2]]), [2])
        # CE hits the 1e-12 clamp on log(1) = 0 exactly; penalty is 0
        assert float(total.values) == pytest.approx(0.0, abs=1e-15)

    def test_uniform_true_class_two(self):
        g = Graph()
        total = combined_loss_from_probs(g.leaf(np.full((1, 5), 0.2)), [2])
        assert float(total.values) == pytest.approx(math.log(5.0), abs=1e-12)

    def test_wrong_one_hot_penalty_dominates(self):
        g = Graph()
        p = np.eye(5)[[0]]
        total = combined_loss_from_probs(g.leaf(p), [4])
        expected = combined_loss_scalar(p[0], 4)
        assert expected > 16.0
        assert float(total.values) == pytest.approx(expected, abs=1e-12)

    def test_matches_scalar_oracle_on_random_pairs(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            p = rng.dirichlet(rng.uniform(0.2, 3.0, size=5))
            label = int(rng.integers(0, 5))
            w = float(rng.uniform(0.25, 2.0))
            g = Graph()
            got = float(combined_loss_from_probs(g.leaf(p.reshape(1, 5)), [label], w).values)
            assert got == pytest.approx(combined_loss_scalar(p, label, w), abs=1e-12)

    def test_combined_at_least_cross_entropy(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            label = int(rng.integers(0, 5))
            g = Graph()
            pt = g.leaf(p.reshape(1, 5))
            ce = float(cross_entropy_from_probs(pt, [label]).values[0])
            total = float(combined_loss_from_probs(pt, [label]).values)
            assert total >= ce - 1e-15
            score = float(np.dot(p, np.arange(1.0, 6.0)))
            if abs(score - (label + 1)) < 1e-9:
                assert total == pytest.approx(ce, abs=1e-12)

    def test_logits_and_probs_paths_agree(self):
        rng = np.random.default_rng(15)
        logits = rng.standard_normal((6, 5)) * 2
        labels = rng.integers(0, 5, size=6)
        g = Graph()
        lt = g.leaf(logits)
        from cytograd.model import cross_entropy_from_logits
        ce_logits = cross_entropy_from_logits(lt, labels)
        ce_probs = cross_entropy_from_probs(T.softmax(lt), labels)
        np.testing.assert_allclose(ce_logits.values, ce_probs.values, atol=1e-12)

    @pytest.mark.parametrize("kind", list(PipelineKind))
    def test_loss_nonnegative_and_scalar(self, kind):
        params = init_params(kind, 21, small_arch(kind))
        fp = forward(params, tiny_batch(np.random.default_rng(21)))
        out = loss(kind, fp, [0, 2, 4])
        assert out.shape == ()
        assert float(out.values) >= 0.0

    def test_label_out_of_range_rejected(self):
        params = init_params(PipelineKind.CLASSIFIER, 22, small_arch(PipelineKind.CLASSIFIER))
        fp = forward(params, tiny_batch(np.random.default_rng(22)))
        with pytest.raises(ValueError, match="0..4"):
            loss(PipelineKind.CLASSIFIER, fp, [0, 1, 5])

    @pytest.mark.parametrize("kind", list(PipelineKind))
    def test_loss_gradients_match_finite_differences(self, kind):
        arch = Architecture.for_kind(kind, input_size=8, conv_channels=(3,),
                                     hidden_units=6)
        params = init_params(kind, 30, arch)
        batch = np.random.default_rng(30).uniform(0.2, 0.8, (2, 3, 8, 8))
        labels = np.array([1, 3])
        names = list(params.values)

        def build(g, leaves):
            from cytograd.model import ForwardPass
            x = leaves[0]
            lv = dict(zip(names, leaves[1:]))
            h = T.mean_pool(T.relu(T.conv2d(x, lv["conv1"], 1, 1)), 2)
            h = T.relu(T.dense(T.spatial_mean(h), lv["hidden_w"], lv["hidden_b"]))
            out = T.dense(h, lv["head_w"], lv["head_b"])
            fp = ForwardPass(graph=g, batch=x, params=lv)
            if kind is PipelineKind.REGRESSOR:
                fp.score = out
            else:
                fp.logits = out
                fp.probs = T.softmax(out)
            return loss(kind, fp, labels)

        arrays = [batch] + [params.values[n] for n in names]
        assert check_op_gradients(build, arrays) < 1e-4


class TestInit:
    def test_same_seed_identical(self):
        a = init_params(PipelineKind.COMBINED, 99)
        b = init_params(PipelineKind.COMBINED, 99)
        for name in a.values:
            assert np.array_equal(a.values[name], b.values[name])

    def test_different_seeds_differ(self):
        a = init_params(PipelineKind.COMBINED, 1)
        b = init_params(PipelineKind.COMBINED, 2)
        assert not np.array_equal(a.values["conv1"], b.values["conv1"])

    def test_biases_start_at_zero(self):
        p = init_params(PipelineKind.REGRESSOR, 3)
        assert not p.values["hidden_b"].any()
        assert not p.values["head_b"].any()

    def test_he_scale(self):
        p = init_params(PipelineKind.CLASSIFIER, 4)
        fan_in = 3 * 3 * 3
        std = p.values["conv1"].std()
        assert 0.5 * np.sqrt(2 / fan_in) < std < 2.0 * np.sqrt(2 / fan_in)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        params = init_params(PipelineKind.COMBINED, 55, small_arch(PipelineKind.COMBINED))
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path, config_hash="abc123")
        loaded, header = load_checkpoint(path)
        assert loaded.kind is PipelineKind.COMBINED
        assert loaded.arch == params.arch
        assert header["config_hash"] == "abc123"
        for name in params.values:
            assert np.array_equal(loaded.values[name], params.values[name])

    def test_save_is_byte_deterministic(self, tmp_path):
        params = init_params(PipelineKind.REGRESSOR, 56, small_arch(PipelineKind.REGRESSOR))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(params, p1)
        save_checkpoint(params, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        params = init_params(PipelineKind.CLASSIFIER, 57, small_arch(PipelineKind.CLASSIFIER))
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_loaded_params_forward_identically(self, tmp_path):
        params = init_params(PipelineKind.COMBINED, 58, small_arch(PipelineKind.COMBINED))
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        loaded, _ = load_checkpoint(path)
        batch = tiny_batch(np.random.default_rng(58))
        a = forward(params, batch).probs.values
        b = forward(loaded, batch).probs.values
        assert np.array_equal(a, b)
