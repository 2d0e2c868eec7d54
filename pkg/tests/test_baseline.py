"""Flattening and the regularized logistic baseline."""

import numpy as np
import pytest

from seqfuse.baseline import flatten, make_lr_runner, train_lr
from seqfuse.errors import NumericsError, ValidationError
from seqfuse.features import PatientSequence, SequenceStep
from seqfuse.rng import Xoshiro256


def _sequence(event_id: str, indices_by_step: list[tuple[int, ...]], z: list[float]) -> PatientSequence:
    steps = [SequenceStep(day_offset=-len(indices_by_step) + 1 + t, indices=ix) for t, ix in enumerate(indices_by_step)]
    return PatientSequence(
        event_id=event_id,
        beneficiary_id="B1",
        steps=steps,
        z=z,
        readmit_label=False,
        mortality_label=False,
        mortality_excluded=False,
    )


class TestFlatten:
    def test_layout_matches_hand_construction(self):
        """Two dx columns, one proc column: interleaved count/mean pairs,
        then the domain vector."""
        seq = _sequence("E1", [(0, 2), (0,), (1,)], z=[7.0, -1.0])
        table = flatten([seq], n_dx_columns=2, n_proc_columns=1, z_names=["za", "zb"])
        assert table.names == [
            "dx_ccs_0_count", "dx_ccs_0_mean",
            "dx_ccs_other_count", "dx_ccs_other_mean",
            "proc_ccs_other_count", "proc_ccs_other_mean",
            "za", "zb",
        ]
        assert table.categories == ["ICD9"] * 4 + ["PROC"] * 2 + ["Domain"] * 2
        np.testing.assert_allclose(
            table.matrix[0],
            [2.0, 2 / 3, 1.0, 1 / 3, 1.0, 1 / 3, 7.0, -1.0],
        )

    def test_named_proc_columns_before_the_other_bucket(self):
        seq = _sequence("E1", [(3,)], z=[])
        table = flatten([seq], n_dx_columns=2, n_proc_columns=3, z_names=[])
        assert table.names[4:8] == [
            "proc_ccs_0_count", "proc_ccs_0_mean",
            "proc_ccs_1_count", "proc_ccs_1_mean",
        ]
        np.testing.assert_array_equal(table.matrix[0], [0, 0, 0, 0, 0, 0, 1, 1, 0, 0])

    def test_rows_follow_input_order(self):
        a = _sequence("E1", [(0,)], z=[1.0])
        b = _sequence("E2", [(1,), (1,)], z=[2.0])
        table = flatten([a, b], n_dx_columns=2, n_proc_columns=1, z_names=["z"])
        assert table.matrix.shape == (2, 7)
        assert table.matrix[0, 0] == 1.0 and table.matrix[1, 2] == 2.0
        assert table.matrix[1, 3] == 1.0  # two hits over two steps

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValidationError):
            flatten([], n_dx_columns=2, n_proc_columns=1, z_names=[])
        out_of_range = _sequence("E1", [(5,)], z=[])
        with pytest.raises(ValidationError):
            flatten([out_of_range], n_dx_columns=2, n_proc_columns=1, z_names=[])
        wrong_z = _sequence("E1", [(0,)], z=[1.0])
        with pytest.raises(ValidationError):
            flatten([wrong_z], n_dx_columns=2, n_proc_columns=1, z_names=["a", "b"])


def _logit_world(n=300, d=4, seed=21, true_w=(1.5, -2.0, 0.0, 0.5), true_b=-0.3):
    rng = Xoshiro256(seed)
    x = np.array([[rng.normal() for _ in range(d)] for _ in range(n)])
    logits = x @ np.array(true_w) + true_b
    y = np.array([rng.bernoulli(p) for p in 1.0 / (1.0 + np.exp(-logits))], dtype=np.float64)
    if y.min() == y.max():
        y[0] = 1.0 - y[0]
    return x, y


class TestTrainLr:
    def test_first_order_optimality(self):
        """At the reported solution the penalized gradient must vanish:
        X'(p - y)/n + l2*w = 0 for weights, mean(p - y) = 0 unpenalized."""
        x, y = _logit_world()
        l2 = 0.05
        model = train_lr(x, y, l2=l2)
        assert model.converged
        p = model.predict_proba(x)
        grad_w = x.T @ (p - y) / len(y) + l2 * model.weights
        grad_b = float(np.mean(p - y))
        assert np.max(np.abs(grad_w)) <= 1e-8
        assert abs(grad_b) <= 1e-8

    def test_recovers_planted_coefficients_roughly(self):
        x, y = _logit_world(n=4000, seed=33)
        model = train_lr(x, y, l2=1e-4)
        assert np.corrcoef(model.weights, [1.5, -2.0, 0.0, 0.5])[0, 1] > 0.99

    def test_zero_column_keeps_zero_weight(self):
        x, y = _logit_world()
        x = np.hstack([x, np.zeros((len(x), 1))])
        model = train_lr(x, y, l2=0.1)
        assert model.weights[-1] == 0.0

    def test_stronger_penalty_shrinks_weights(self):
        x, y = _logit_world()
        light = train_lr(x, y, l2=0.01)
        heavy = train_lr(x, y, l2=10.0)
        assert np.linalg.norm(heavy.weights) < np.linalg.norm(light.weights)

    def test_separable_data_stays_bounded(self):
        x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        model = train_lr(x, y, l2=0.1)
        assert np.all(np.isfinite(model.weights))
        assert abs(model.weights[0]) < 50.0

    def test_margins_and_probabilities_agree(self):
        x, y = _logit_world(n=50)
        model = train_lr(x, y, l2=0.1)
        margins = model.margins(x)
        np.testing.assert_allclose(model.predict_proba(x), 1.0 / (1.0 + np.exp(-margins)))

    def test_input_validation(self):
        x, y = _logit_world(n=20)
        with pytest.raises(ValidationError):
            train_lr(x, y, l2=0.0)
        with pytest.raises(ValidationError):
            train_lr(x, y + 1.0, l2=0.1)
        with pytest.raises(ValidationError):
            train_lr(x[:10], y, l2=0.1)

    def test_iteration_budget_is_enforced(self):
        x, y = _logit_world()
        with pytest.raises(NumericsError, match="did not converge"):
            train_lr(x, y, l2=1e-6, max_iter=1)


class TestLrRunner:
    def _folds(self, n):
        return {
            "train": list(range(0, int(n * 0.7))),
            "valid": list(range(int(n * 0.7), int(n * 0.85))),
            "calibration": [],
            "test": list(range(int(n * 0.85), n)),
        }

    def test_trial_payload_and_learnability(self):
        x, y = _logit_world(n=400, seed=41)
        runner = make_lr_runner(x, y, self._folds(len(y)))
        out = runner({"l2": 0.01, "smote": False}, seed=9)
        assert out["status"] == "ok"
        assert out["valid_auc"] > 0.8 and out["test_auc"] > 0.8
        train_idx = self._folds(len(y))["train"]
        np.testing.assert_allclose(out["z_mean"], x[train_idx].mean(axis=0))

    def test_oversampling_changes_the_fit_but_not_the_contract(self):
        x, y = _logit_world(n=400, seed=43)
        y[: int(0.85 * len(y))] = (np.arange(int(0.85 * len(y))) % 5 == 0).astype(np.float64)
        runner = make_lr_runner(x, y, self._folds(len(y)))
        plain = runner({"l2": 0.1, "smote": False}, seed=9)
        balanced = runner({"l2": 0.1, "smote": True}, seed=9)
        assert plain["status"] == balanced["status"] == "ok"
        assert not np.array_equal(plain["model"].weights, balanced["model"].weights)

    def test_bad_config_reports_failure(self):
        x, y = _logit_world(n=100)
        runner = make_lr_runner(x, y, self._folds(len(y)))
        out = runner({"l2": 0.0, "smote": False}, seed=9)
        assert out["status"] == "failed"
        assert "l2" in out["failure"]
