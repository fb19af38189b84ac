import math

import numpy as np
import pytest

from pgap import (Batch, BatchStream, CsvSchema, DimensionError, LeastSquaresOracle,
                  LogisticOracle, NumericError, Param, ParamKind, ParamSet,
                  ParseError, QuadraticOracle, RankStructuredQuadratic, Seed,
                  TinyMlpOracle, analytic_gradient, eval_loss, load_csv, lora_wrap,
                  make_lowrank_logistic, make_synthetic)


def central_difference(oracle, params, batch, step=1e-5):
    """Finite-difference gradient oracle, independent of the analytic path."""
    grads = {}
    for p in params:
        g = np.zeros_like(p.tensor)
        flat = p.tensor.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = oracle.loss(params, batch)
            flat[i] = orig - step
            down = oracle.loss(params, batch)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads[p.name] = g
    return grads


def assert_grad_matches(oracle, params, batch, rel=1e-6):
    analytic = analytic_gradient(oracle, params, batch)
    numeric = central_difference(oracle, params, batch)
    for name, g in analytic.items():
        scale = np.abs(numeric[name]) + 1e-8
        assert np.all(np.abs(g - numeric[name]) <= rel * scale + 1e-7), name


class TestParamSet:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ParamSet([Param("a", np.zeros(2), ParamKind.DENSE),
                      Param("a", np.zeros(2), ParamKind.DENSE)])

    def test_matrix_subspace_must_be_2d(self):
        with pytest.raises(DimensionError):
            Param("w", np.zeros(4), ParamKind.MATRIX_SUBSPACE)

    def test_copy_is_deep_and_bit_equal(self, rng):
        ps = ParamSet([Param("w", rng.standard_normal((3, 4)),
                             ParamKind.MATRIX_SUBSPACE)])
        other = ps.copy()
        assert ps.bit_equal(other)
        other["w"].tensor[0, 0] += 1.0
        assert not ps.bit_equal(other)


class TestBatch:
    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            Batch(np.zeros((3, 2)), np.zeros(4))

    def test_matrix_targets_allowed(self):
        b = Batch(np.zeros((3, 2)), np.zeros((3, 5)))
        assert b.n == 3


class TestQuadratic:
    def test_unit_vector_on_identity(self):
        oracle = QuadraticOracle(np.eye(3))
        params = ParamSet([Param("x", np.array([1.0, 0.0, 0.0]), ParamKind.DENSE)])
        assert eval_loss(oracle, params, None) == 1.0

    def test_minimum_at_zero(self):
        oracle = QuadraticOracle(np.eye(4))
        params = ParamSet([Param("x", np.zeros(4), ParamKind.DENSE)])
        assert eval_loss(oracle, params, None) == 0.0

    def test_gradient_formula(self, rng):
        h = rng.standard_normal((5, 5))
        oracle = QuadraticOracle(h)
        x = rng.standard_normal(5)
        params = ParamSet([Param("x", x, ParamKind.DENSE)])
        grad = analytic_gradient(oracle, params, None)["x"]
        assert np.allclose(grad, (h + h.T) @ x, atol=1e-12)
        assert_grad_matches(oracle, params, None)

    def test_quadratic_identity_large(self, rng):
        h = rng.standard_normal((256, 256))
        oracle = QuadraticOracle(h)
        x = rng.standard_normal(256)
        params = ParamSet([Param("x", x, ParamKind.DENSE)])
        assert eval_loss(oracle, params, None) == pytest.approx(x @ h @ x, rel=1e-12)

    def test_purity_bit_stable(self, rng):
        oracle = QuadraticOracle(rng.standard_normal((8, 8)))
        params = oracle.init_params(Seed(3))
        first = oracle.loss(params, None)
        assert all(oracle.loss(params, None) == first for _ in range(1000))


class TestRankStructuredQuadratic:
    def test_initial_gradient_has_planted_rank(self):
        task = RankStructuredQuadratic(12, 10, 3, Seed(7))
        params = task.init_params(Seed(0))
        grad = task.grad(params, None)["w"]
        s = np.linalg.svd(grad, compute_uv=False)
        assert s[3:].max() <= 1e-12 * s[0]

    def test_loss_is_half_squared_distance(self):
        task = RankStructuredQuadratic(6, 6, 2, Seed(7))
        params = task.init_params(Seed(0))
        d = params["w"].tensor - task.w_star
        assert task.loss(params, None) == pytest.approx(0.5 * np.sum(d * d))
        assert_grad_matches(task, params, None)


class TestLogistic:
    def test_ln2_at_zero_weights(self, seed):
        batch, _ = make_synthetic("logistic", seed, n=64, d=24)
        oracle = LogisticOracle([(4, 6)])
        params = oracle.init_params(seed)
        assert eval_loss(oracle, params, batch) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_gradient_matches_finite_differences(self, seed, rng):
        batch, _ = make_synthetic("logistic", seed, n=32, d=12)
        oracle = LogisticOracle([(3, 4)])
        params = ParamSet([Param("w0", 0.1 * rng.standard_normal((3, 4)),
                                 ParamKind.MATRIX_SUBSPACE)])
        assert_grad_matches(oracle, params, batch)


class TestLeastSquares:
    def test_zero_gradient_at_solution(self, seed):
        batch, truth = make_synthetic("least_squares", seed, n=40, d=8)
        oracle = LeastSquaresOracle(8)
        params = ParamSet([Param("w", truth["w_star"], ParamKind.DENSE)])
        grad = analytic_gradient(oracle, params, batch)["w"]
        assert np.abs(grad).max() <= 1e-10

    def test_gradient_matches_finite_differences(self, seed, rng):
        batch, _ = make_synthetic("least_squares", seed, n=30, d=6, noise=0.5)
        oracle = LeastSquaresOracle(6)
        params = ParamSet([Param("w", rng.standard_normal(6), ParamKind.DENSE)])
        assert_grad_matches(oracle, params, batch)


class TestTinyMlp:
    def test_gradient_matches_finite_differences(self, seed):
        oracle = TinyMlpOracle(n_in=5, n_hidden=7, n_out=3)
        batch, _ = make_synthetic("mlp", seed, n=16, d=5, hidden=7, out=3)
        params = oracle.init_params(seed)
        assert_grad_matches(oracle, params, batch)

    def test_nonfinite_names_layer(self, seed):
        oracle = TinyMlpOracle(n_in=3, n_hidden=4, n_out=2)
        params = oracle.init_params(seed)
        params["w1"].tensor[0, 0] = np.inf
        batch = Batch(np.ones((2, 3)), np.ones((2, 2)))
        with pytest.raises(NumericError, match="layer 1"):
            oracle.loss(params, batch)

    def test_param_kinds(self, seed):
        oracle = TinyMlpOracle()
        params = oracle.init_params(seed)
        assert params.matrix_subspace_names() == ["w1", "w2"]
        assert params["b1"].kind is ParamKind.DENSE


class TestGradientCorrectnessSweep:
    # Every differentiable task, many random (params, batch) pairs.
    @pytest.mark.parametrize("case", ["quadratic", "least_squares", "logistic", "mlp"])
    def test_hundred_random_pairs(self, case, rng):
        for trial in range(25):
            seed = Seed(1000 + trial)
            if case == "quadratic":
                oracle = QuadraticOracle(rng.standard_normal((4, 4)))
                params = ParamSet([Param("x", rng.standard_normal(4), ParamKind.DENSE)])
                batch = None
            elif case == "least_squares":
                batch, _ = make_synthetic("least_squares", seed, n=10, d=4, noise=0.3)
                oracle = LeastSquaresOracle(4)
                params = ParamSet([Param("w", rng.standard_normal(4), ParamKind.DENSE)])
            elif case == "logistic":
                batch, _ = make_synthetic("logistic", seed, n=12, d=6)
                oracle = LogisticOracle([(2, 3)])
                params = ParamSet([Param("w0", 0.2 * rng.standard_normal((2, 3)),
                                         ParamKind.MATRIX_SUBSPACE)])
            else:
                oracle = TinyMlpOracle(n_in=3, n_hidden=4, n_out=2)
                batch, _ = make_synthetic("mlp", seed, n=8, d=3, hidden=4, out=2)
                params = oracle.init_params(seed)
            assert_grad_matches(oracle, params, batch)


class TestSynthetic:
    def test_same_seed_same_dataset(self, seed):
        a, _ = make_synthetic("logistic", seed, n=20, d=5)
        b, _ = make_synthetic("logistic", seed, n=20, d=5)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.targets, b.targets)

    def test_single_row_batch(self, seed):
        batch, _ = make_synthetic("logistic", seed, n=1, d=4)
        oracle = LogisticOracle([(2, 2)])
        assert np.isfinite(eval_loss(oracle, oracle.init_params(seed), batch))

    def test_noiseless_logistic_is_separable(self, seed):
        # Sanity oracle: a long first-order run on the planted separable data
        # reaches >= 99% train accuracy.
        batch, truth = make_synthetic("logistic", seed, n=200, d=10)
        oracle = LogisticOracle([(2, 5)])
        params = oracle.init_params(seed)
        for _ in range(2000):
            grads = oracle.grad(params, batch)
            for name, g in grads.items():
                params[name].tensor -= 1.0 * g
        w = np.concatenate([params["w0"].tensor.ravel()])
        acc = np.mean(np.sign(batch.inputs @ w) == batch.targets)
        assert acc >= 0.99

    def test_lowrank_logistic_gradient_concentrates(self, seed):
        batch, oracle, truth = make_lowrank_logistic(
            seed, n=256, shapes=[(16, 16), (16, 16)], planted_rank=3,
            background=0.05)
        params = oracle.init_params(seed)
        grad = oracle.grad(params, batch)["w0"]
        s = np.linalg.svd(grad, compute_uv=False)
        top = np.sqrt(np.sum(s[:3] ** 2)) / np.sqrt(np.sum(s ** 2))
        assert top >= 0.95


class TestCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("label,f1,f2\n1,0.5,2\n-1,1.5,3\n1,2.5,4\n")
        batch = load_csv(path, CsvSchema(label="label", features=["f1", "f2"]))
        assert batch.n == 3
        assert np.array_equal(batch.inputs, [[0.5, 2], [1.5, 3], [2.5, 4]])
        assert np.array_equal(batch.targets, [1, -1, 1])

    def test_empty_data_section(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("label,f1\n")
        with pytest.raises(ParseError, match="no rows"):
            load_csv(path, CsvSchema(label="label", features=["f1"]))

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "cols.csv"
        path.write_text("label,f1\n1,2\n")
        with pytest.raises(ParseError, match="f9"):
            load_csv(path, CsvSchema(label="label", features=["f9"]))

    def test_non_numeric_cell_position(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("label,f1\n1,2\n1,oops\n")
        with pytest.raises(ParseError, match="row 3"):
            load_csv(path, CsvSchema(label="label", features=["f1"]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="nope.csv"):
            load_csv(tmp_path / "nope.csv", CsvSchema(label="a", features=["b"]))


class TestLora:
    def test_initial_loss_unchanged(self, seed):
        base = TinyMlpOracle(n_in=4, n_hidden=6, n_out=3)
        batch, _ = make_synthetic("mlp", seed, n=10, d=4, hidden=6, out=3)
        wrapped = lora_wrap(base, 2, seed)
        adapters = wrapped.init_params(seed)
        assert wrapped.loss(adapters, batch) == base.loss(wrapped.base_params, batch)

    def test_trainable_count(self, seed):
        base = TinyMlpOracle(n_in=4, n_hidden=6, n_out=3)
        wrapped = lora_wrap(base, 2, seed)
        # w1: 4x6 -> 2*(4+6); w2: 6x3 -> 2*(6+3)
        assert wrapped.trainable_count() == 2 * (4 + 6) + 2 * (6 + 3)
        assert wrapped.init_params(seed).size() == wrapped.trainable_count()

    def test_adapter_gradient_chain_rule(self, seed):
        base = TinyMlpOracle(n_in=4, n_hidden=5, n_out=3)
        batch, _ = make_synthetic("mlp", seed, n=8, d=4, hidden=5, out=3)
        wrapped = lora_wrap(base, 2, seed)
        adapters = wrapped.init_params(seed)
        # At B = 0: dL/dB = (dL/dW) A^T, checked against finite differences.
        base_grads = base.grad(wrapped.base_params, batch)
        analytic = wrapped.grad(adapters, batch)
        for name in wrapped.wrapped:
            a = adapters[f"{name}.A"].tensor
            assert np.allclose(analytic[f"{name}.B"], base_grads[name] @ a.T,
                               atol=1e-12)
        assert_grad_matches(wrapped, adapters, batch)

    def test_rank_too_large(self, seed):
        base = TinyMlpOracle(n_in=4, n_hidden=6, n_out=3)
        with pytest.raises(DimensionError):
            lora_wrap(base, 5, seed)

    def test_adapters_marked_subspace(self, seed):
        wrapped = lora_wrap(TinyMlpOracle(4, 6, 3), 2, seed)
        adapters = wrapped.init_params(seed)
        assert set(adapters.matrix_subspace_names()) == set(adapters.names)


class TestBatchStream:
    def test_deterministic_and_epoch_reshuffled(self, seed):
        data = Batch(np.arange(20.0).reshape(10, 2), np.arange(10.0))
        s1 = BatchStream(data, 3, seed)
        s2 = BatchStream(data, 3, seed)
        for t in range(12):
            a, b = s1.batch_for_step(t), s2.batch_for_step(t)
            assert np.array_equal(a.inputs, b.inputs)
        # one epoch = ceil(10/3) = 4 steps; epochs use different permutations
        first_epoch = [s1.batch_for_step(t).targets.tolist() for t in range(4)]
        second_epoch = [s1.batch_for_step(t + 4).targets.tolist() for t in range(4)]
        assert sorted(sum(first_epoch, [])) == sorted(sum(second_epoch, []))
        assert first_epoch != second_epoch
