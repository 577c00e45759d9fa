import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tangentgp.analysis import (
    StudyConfig,
    jacobian_similarity,
    jacobian_spectrum,
    retrain_final_layer,
    task_similarity_study,
)
from tangentgp.errors import ContractViolationError, NumericBreakdownError
from tangentgp.gp import kernel_matrix
from tangentgp.net import (
    JacobianOperator,
    MlpArchitecture,
    MlpNetwork,
    OptimizerConfig,
    TaskDataset,
    forward,
    init_network,
    train,
)
from tangentgp.seeding import substream


def dense_similarity(a, b):
    return np.trace(a.T @ b @ b.T @ a) / (
        np.linalg.norm(a @ a.T) * np.linalg.norm(b @ b.T)
    )


class TestJacobianSimilarity:
    def test_self_similarity_is_one(self):
        a = np.random.default_rng(0).standard_normal((30, 12))
        assert jacobian_similarity(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_row_blocks_give_zero(self):
        # Gram matrices with orthogonal column spaces: tr(A'BB'A) = 0.
        a = np.zeros((40, 10))
        b = np.zeros((40, 10))
        rng = np.random.default_rng(1)
        a[:10] = rng.standard_normal((10, 10))
        b[20:30] = rng.standard_normal((10, 10))
        assert jacobian_similarity(a, b) == 0.0

    def test_matches_dense_trace_formula(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((50, 20))
        b = rng.standard_normal((50, 20))
        assert jacobian_similarity(a, b) == pytest.approx(
            dense_similarity(a, b), rel=1e-10
        )

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((25, 8))
        b = rng.standard_normal((25, 8))
        base = jacobian_similarity(a, b)
        for c in (1e-3, -2.0, 1e4):
            assert jacobian_similarity(c * a, b) == pytest.approx(base, abs=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((25, 8))
        b = rng.standard_normal((25, 8))
        assert abs(jacobian_similarity(a, b) - jacobian_similarity(b, a)) <= 1e-12

    def test_right_orthogonal_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((25, 8))
        b = rng.standard_normal((25, 8))
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        assert jacobian_similarity(a @ q, b) == pytest.approx(
            jacobian_similarity(a, b), abs=1e-10
        )

    def test_values_stay_in_unit_interval(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            a = rng.standard_normal((15, 6))
            b = rng.standard_normal((15, 6))
            sim = jacobian_similarity(a, b)
            assert -1e-10 <= sim <= 1.0 + 1e-8

    def test_zero_matrix_rejected(self):
        a = np.random.default_rng(0).standard_normal((10, 4))
        with pytest.raises(ContractViolationError, match="all-zero"):
            jacobian_similarity(a, np.zeros((10, 4)))

    def test_column_count_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractViolationError, match="column counts"):
            jacobian_similarity(
                rng.standard_normal((10, 4)), rng.standard_normal((10, 5))
            )

    def test_row_mismatch_requires_projection(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((30, 6))
        b = rng.standard_normal((40, 6))
        with pytest.raises(ContractViolationError, match="projection"):
            jacobian_similarity(a, b)
        pa = rng.standard_normal((20, 30))
        pb = rng.standard_normal((20, 40))
        got = jacobian_similarity(a, b, projection=(pa, pb))
        assert got == pytest.approx(dense_similarity(pa @ a, pb @ b), rel=1e-10)

    def test_non_matrix_rejected(self):
        with pytest.raises(ContractViolationError, match="2-d"):
            jacobian_similarity(np.ones(5), np.ones(5))


def affine_jacobian(x):
    arch = MlpArchitecture(1, (), 1, activation="identity")
    net = MlpNetwork(arch, np.array([0.8, -0.1]))
    return JacobianOperator(net, np.asarray(x, dtype=np.float64).reshape(-1, 1))


class TestJacobianSpectrum:
    def test_affine_single_datum_analytic(self):
        # J is the column (x, 1), so the only singular value is its norm.
        x = 1.7
        values = jacobian_spectrum(affine_jacobian([x]), k=1)
        assert_allclose(values, [np.sqrt(x * x + 1.0)], rtol=1e-12)

    def test_duplicated_datum_doubles_squared_value(self):
        x = 1.7
        single = jacobian_spectrum(affine_jacobian([x]), k=1)[0]
        doubled = jacobian_spectrum(affine_jacobian([x, x]), k=1)[0]
        assert doubled**2 == pytest.approx(2.0 * single**2, rel=1e-12)

    def test_dense_and_lanczos_paths_agree(self):
        net = init_network(MlpArchitecture(1, (8,), 1), seed=11)
        x = substream(11, "spectrum-x").uniform(-2.0, 2.0, size=(20, 1))
        jac = JacobianOperator(net, x)
        dense = jacobian_spectrum(jac, k=5, method="dense")
        lanczos = jacobian_spectrum(jac, k=5, method="lanczos", seed=2)
        assert_allclose(lanczos, dense, rtol=1e-4)

    def test_squared_values_match_kernel_eigenvalues(self):
        net = init_network(MlpArchitecture(2, (6,), 1), seed=3)
        x = substream(3, "spectrum-x").uniform(-1.0, 1.0, size=(12, 2))
        jac = JacobianOperator(net, x)
        values = jacobian_spectrum(jac, k=12, method="dense")
        kernel_eigs = np.linalg.eigvalsh(kernel_matrix(net, x))[::-1]
        assert_allclose(values**2, kernel_eigs, rtol=1e-6, atol=1e-12)

    def test_sorted_descending_and_nonnegative(self):
        net = init_network(MlpArchitecture(1, (8,), 1), seed=11)
        x = substream(11, "spectrum-x").uniform(-2.0, 2.0, size=(20, 1))
        for method in ("dense", "lanczos"):
            values = jacobian_spectrum(JacobianOperator(net, x), k=6, method=method)
            assert np.all(values >= 0.0)
            assert np.all(np.diff(values) <= 1e-12)

    def test_auto_matches_dense_on_small_problems(self):
        jac = affine_jacobian([0.4, -1.2, 2.0])
        assert_array_equal(
            jacobian_spectrum(jac, k=2, method="auto"),
            jacobian_spectrum(jac, k=2, method="dense"),
        )

    def test_k_out_of_range_rejected(self):
        jac = affine_jacobian([1.0, 2.0])
        with pytest.raises(ContractViolationError, match="k must lie"):
            jacobian_spectrum(jac, k=0)
        with pytest.raises(ContractViolationError, match="k must lie"):
            jacobian_spectrum(jac, k=3)

    def test_unknown_method_rejected(self):
        with pytest.raises(ContractViolationError, match="method"):
            jacobian_spectrum(affine_jacobian([1.0]), k=1, method="power")

    def test_exhausted_krylov_below_k_raises(self):
        # Four copies of one datum give a rank-1 kernel; the Krylov space
        # from any probe tops out at two directions, short of k = 3.
        net = init_network(MlpArchitecture(1, (4,), 1), seed=0)
        x = np.full((4, 1), 0.9)
        with pytest.raises(NumericBreakdownError, match="fewer than"):
            jacobian_spectrum(JacobianOperator(net, x), k=3, method="lanczos")


def two_blob_labels(rng, n):
    half = n // 2
    x = np.vstack(
        [
            rng.normal((-1.5, -1.5), 0.6, size=(half, 2)),
            rng.normal((1.5, 1.5), 0.6, size=(n - half, 2)),
        ]
    )
    labels = np.array([0] * half + [1] * (n - half))
    return x, labels


def one_hot(labels, num_classes=2):
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def mean_cross_entropy(net, x, labels):
    logits = forward(net, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(labels.size), labels].mean()


class TestRetrainFinalLayer:
    def setup_method(self):
        self.x, self.labels = two_blob_labels(np.random.default_rng(20), 60)
        self.net = init_network(MlpArchitecture(2, (12,), 2), seed=6)

    def test_only_final_layer_changes(self):
        refit = retrain_final_layer(self.net, self.x, self.labels, steps=50, learning_rate=0.05)
        w_slice, b_slice, _, _ = self.net.architecture.layer_slices()[-1]
        assert_array_equal(
            refit.params[: w_slice.start], self.net.params[: w_slice.start]
        )
        assert not np.array_equal(refit.params[w_slice], self.net.params[w_slice])
        assert not np.array_equal(refit.params[b_slice], self.net.params[b_slice])

    def test_reduces_cross_entropy(self):
        before = mean_cross_entropy(self.net, self.x, self.labels)
        refit = retrain_final_layer(self.net, self.x, self.labels, steps=300, learning_rate=0.05)
        after = mean_cross_entropy(refit, self.x, self.labels)
        assert after < before
        assert after < 0.2

    def test_zero_steps_is_identity(self):
        refit = retrain_final_layer(self.net, self.x, self.labels, steps=0, learning_rate=0.05)
        assert_array_equal(refit.params, self.net.params)


def small_study_config(**overrides):
    defaults = dict(
        models_per_group=2,
        train_points=60,
        eval_points=24,
        epochs=12,
        batch_size=20,
        realign_steps=150,
        seed=0,
    )
    defaults.update(overrides)
    return StudyConfig(**defaults)


class TestStudyConfig:
    def test_rejects_empty_groups(self):
        with pytest.raises(ContractViolationError, match="at least one model"):
            StudyConfig(models_per_group=0)

    def test_rejects_non_classifier_architectures(self):
        with pytest.raises(ContractViolationError, match="2-class"):
            StudyConfig(architecture=MlpArchitecture(2, (16,), 1))
        with pytest.raises(ContractViolationError, match="2-class"):
            StudyConfig(architecture=MlpArchitecture(2, (16,), 2, heteroscedastic=True))

    def test_rejects_degenerate_sizes(self):
        with pytest.raises(ContractViolationError, match="at least 2 train"):
            StudyConfig(train_points=1)


class TestSimilarityStudy:
    def test_same_seed_same_data_models_are_identical(self):
        rng = np.random.default_rng(9)
        x, labels = two_blob_labels(rng, 50)
        data = TaskDataset(x, one_hot(labels), noise_variance=1.0)
        cfg = OptimizerConfig(
            optimizer="adam",
            learning_rate=5e-3,
            epochs=8,
            batch_size=16,
            loss="categorical-ce",
            seed=13,
        )
        net = init_network(MlpArchitecture(2, (16,), 2), seed=13)
        first = train(net, data, cfg).network
        second = train(net, data, cfg).network
        eval_x = rng.uniform(-2.0, 2.0, size=(20, 2))
        ja = JacobianOperator(first, eval_x).dense()
        jb = JacobianOperator(second, eval_x).dense()
        assert_array_equal(first.params, second.params)
        assert jacobian_similarity(ja, jb) == pytest.approx(1.0, abs=1e-12)

    def test_three_group_study_prefers_same_distribution(self):
        report = task_similarity_study(small_study_config(models_per_group=3))
        assert report.within_same_distribution_mean > report.cross_distribution_mean

    def test_report_matrix_invariants(self):
        report = task_similarity_study(small_study_config())
        m = report.matrix
        assert m.shape == (6, 6)
        assert_allclose(np.diag(m), 1.0, atol=1e-8)
        assert_array_equal(m, m.T)
        assert np.all(m >= -1e-10)
        assert np.all(m <= 1.0 + 1e-8)
        assert report.model_ids[0] == "base-a-0"
        assert report.model_ids[-1] == "shifted-1"
        assert report.distribution_ids == (0, 0, 0, 0, 1, 1)

    def test_single_model_groups_degenerate_to_one_within_pair(self):
        report = task_similarity_study(small_study_config(models_per_group=1, epochs=5))
        assert report.matrix.shape == (3, 3)
        # base-a vs base-b is the only same-distribution pair.
        assert report.within_same_distribution_mean == pytest.approx(
            report.matrix[0, 1]
        )
        assert report.cross_distribution_mean == pytest.approx(
            (report.matrix[0, 2] + report.matrix[1, 2]) / 2.0
        )

    def test_study_is_deterministic(self):
        cfg = small_study_config(models_per_group=1, epochs=5)
        first = task_similarity_study(cfg)
        second = task_similarity_study(cfg)
        assert_array_equal(first.matrix, second.matrix)

    def test_report_serialization(self):
        report = task_similarity_study(small_study_config(models_per_group=1, epochs=5))
        payload = json.loads(report.to_json())
        assert payload["model_ids"] == ["base-a-0", "base-b-0", "shifted-0"]
        assert payload["summary"]["within_pairs"] == 1
        assert payload["summary"]["cross_pairs"] == 2
        assert len(payload["matrix"]) == 3
        lines = report.to_csv().splitlines()
        assert lines[0] == "model_a,model_b,similarity"
        assert len(lines) == 1 + 6
        assert lines[1].startswith("base-a-0,base-a-0,1")
