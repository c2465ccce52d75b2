import json

import numpy as np
import pytest

from msnet.data import Diagnosis, FeatureVolume, SynthConfig, generate_synthetic, split_dataset
from msnet.errors import ConfigError, ShapeError, TrainingDivergedError
from msnet.model import MsNetArch, init_model
from msnet.train import (
    EvalReport, TrainConfig, accuracy, benchmark, confusion_matrix, evaluate, label_from_probs,
    predict, train,
)

SMALL = MsNetArch(input_channels=16, block_channels=8, dense_hidden=8)


class FixedModel:
    """Stand-in whose logits are the first row of the volume."""

    params = np.zeros(1)

    def astype(self, dtype):
        return self

    def logits(self, x):
        return np.asarray(x, float)[0, :3]


def volume_predicting(label, pid="p"):
    row = np.zeros((1, 3))
    row[0, int(label)] = 5.0
    return FeatureVolume(pid, row)


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(SynthConfig(patients_per_class=(8, 8, 8), slice_range=(20, 40),
                                          feature_dim=16, noise_sigma=0.1, signal_strength=2.0,
                                          seed=5))


class TestPredict:
    def test_argmax(self):
        assert label_from_probs([0.2, 0.5, 0.3]) is Diagnosis.CAP

    def test_tie_goes_to_lowest_index(self):
        assert label_from_probs([0.4, 0.4, 0.2]) is Diagnosis.COVID

    def test_precision_paths_agree(self, rng):
        m = init_model(MsNetArch(), seed=4)
        checked = 0
        for i in range(12):
            x = rng.normal(size=(int(rng.integers(20, 120)), 2048)).astype(np.float32)
            y64, p64 = predict(m, x, "float64")
            y32, p32 = predict(m, x, "float32")
            top2 = np.sort(p64)[-2:]
            if top2[1] - top2[0] > 1e-4:
                assert y64 == y32
                checked += 1
            np.testing.assert_allclose(p32, p64, atol=1e-4)
        assert checked >= 10

    def test_wrong_dimension(self):
        with pytest.raises(ShapeError):
            predict(init_model(SMALL), np.zeros((4, 15)))


class TestEvaluate:
    def test_table_style_counts(self):
        items = [(volume_predicting(Diagnosis.COVID if i < 13 else Diagnosis.NORMAL), Diagnosis.COVID)
                 for i in range(15)]
        items += [(volume_predicting(Diagnosis.NORMAL), Diagnosis.NORMAL)] * 14
        items += [(volume_predicting(Diagnosis.COVID), Diagnosis.NORMAL)]
        rep = evaluate(FixedModel(), items)
        assert rep.counts() == {"COVID": (13, 15), "CAP": (0, 0), "NORMAL": (14, 15)}
        assert round(100 * rep.sensitivity[0], 2) == 86.67
        assert rep.sensitivity[1] is None
        assert rep.accuracy == 27 / 30
        assert "NA" in rep.summary()

    def test_all_correct(self):
        items = [(volume_predicting(c), c) for c in Diagnosis for _ in range(3)]
        rep = evaluate(FixedModel(), items)
        np.testing.assert_array_equal(rep.confusion, 3 * np.eye(3, dtype=int))
        assert rep.accuracy == 1.0

    def test_invariants(self, rng):
        truth, pred = rng.integers(0, 3, 200), rng.integers(0, 3, 200)
        rep = EvalReport(confusion_matrix(truth, pred), 200)
        np.testing.assert_array_equal(rep.confusion.sum(axis=1), np.bincount(truth, minlength=3))
        assert rep.accuracy == np.trace(rep.confusion) / rep.confusion.sum()
        for c, s in enumerate(rep.sensitivity):
            assert abs(s - rep.confusion[c, c] / rep.confusion[c].sum()) < 1e-12

    def test_json(self):
        rep = evaluate(FixedModel(), [(volume_predicting(2), Diagnosis.NORMAL)])
        d = json.loads(rep.to_json())
        assert set(d) >= {"confusion", "sensitivity", "accuracy", "timing"}
        assert d["sensitivity"] == [None, None, 1.0]

    def test_empty(self):
        with pytest.raises(ConfigError):
            evaluate(FixedModel(), [])


class TestTrain:
    def test_zero_epochs_rejected(self, small_data):
        with pytest.raises(ConfigError):
            train(small_data, TrainConfig(epochs=0), arch=SMALL)

    def test_deterministic_log(self, small_data):
        cfg = TrainConfig(epochs=3, seed=2, lr=1e-3)
        a = train(small_data, cfg, arch=SMALL)
        b = train(small_data, cfg, arch=SMALL)
        assert a.log.to_json() == b.log.to_json()
        assert a.model.params.tobytes() == b.model.params.tobytes()

    def test_best_model_selection(self, small_data):
        res = train(small_data, TrainConfig(epochs=8, seed=1, lr=1e-3), arch=SMALL)
        accs = [e.val_accuracy for e in res.log.epochs]
        assert res.log.best_val_accuracy == max(accs)
        assert res.log.best_epoch == accs.index(max(accs)) + 1
        _, val = split_dataset(small_data, 0.3, 1)
        assert accuracy(res.model, val) == max(accs)

    def test_log_json_keys(self, small_data):
        res = train(small_data, TrainConfig(epochs=2), arch=SMALL)
        d = json.loads(res.log.to_json())
        assert [set(e) for e in d["epochs"]] == [{"epoch", "train_loss", "val_accuracy"}] * 2

    def test_single_sample_descent(self, small_data):
        item = small_data[0]
        res = train([item], TrainConfig(epochs=10, seed=0), val_set=[item], arch=SMALL)
        losses = [e.train_loss for e in res.log.epochs]
        assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_learns_small_problem(self, small_data):
        res = train(small_data, TrainConfig(epochs=40, lr=3e-3, seed=0), arch=SMALL)
        assert res.log.best_val_accuracy >= 0.85

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_preserves_state(self, small_data):
        bad = FeatureVolume("huge", np.full((20, 16), 1e308))
        data = list(small_data) + [(bad, Diagnosis.CAP)]
        with pytest.raises(TrainingDivergedError) as exc:
            train(data, TrainConfig(epochs=2, seed=0), val_set=small_data[:3], arch=SMALL)
        last = exc.value.model
        assert last is not None and np.all(np.isfinite(last.params))

    def test_empty_split(self):
        with pytest.raises(ConfigError):
            train([], TrainConfig(epochs=1), val_set=[], arch=SMALL)


class TestBenchmark:
    def test_summary_arithmetic(self, small_data):
        m = init_model(SMALL, seed=0)
        res = benchmark(m, [v for v, _ in small_data], repetitions=3)
        t = res.timing
        assert t.mean_seconds == t.total_seconds / t.n_volumes
        assert t.n_volumes == len(small_data)
        assert 0 < t.p50_seconds <= t.p95_seconds
        assert res.deterministic

    def test_predictions_match_float32_predict(self, small_data):
        m = init_model(SMALL, seed=1)
        res = benchmark(m, [v for v, _ in small_data[:5]], repetitions=2)
        assert res.predictions == [predict(m, v, "float32")[0] for v, _ in small_data[:5]]

    def test_rejects_empty(self):
        with pytest.raises(ConfigError):
            benchmark(init_model(SMALL), [])
