import os
import tempfile
import unittest

import numpy as np

from src.Errors import EmptyTestSet, ShapeMismatch, ZeroVector
from src.Metrics import (LCFV_EPS, METRIC_NAMES, MetricsReport, best_variant, cfv, emv,
                         epv_metric, evaluate_all, evaluate_predictions, instance_metrics, kl,
                         kl_divergence, lcfv, mae, read_metrics_table, voxel_major,
                         write_metrics_table)
from src.Pairing import RecordingSession
from src.SignalPipeline import AlignedWindow, EEGSpectrogram, FMRIVolumeSeries


class OracleModel:
    # Returns the stored fMRI window for each EEG window it has seen.
    def __init__(self, windows):
        self.lookup = {w.eeg.values.tobytes(): w.fmri.volumes for w in windows}

    def synthesize(self, eeg):
        return np.stack([self.lookup[e.tobytes()] for e in eeg])


def make_windows(count, seed=0):
    rng = np.random.default_rng(seed)
    return [AlignedWindow(5.4 * i, 5.4 * i + 5.4,
                          EEGSpectrogram(np.abs(rng.standard_normal((2, 3, 4))), 1.8),
                          FMRIVolumeSeries(rng.standard_normal((4, 2, 2, 1)), 1.8, True))
            for i in range(count)]


class TestCosineMetrics(unittest.TestCase):
    def test_identical(self):
        """Test self-similarity is 1"""
        x = np.array([1.0, 2.0, 3.0])
        self.assertAlmostEqual(cfv(x, x), 1.0)

    def test_orthogonal(self):
        """Test [1,0] vs [0,1]"""
        self.assertAlmostEqual(cfv([1.0, 0.0], [0.0, 1.0]), 0.0)
        self.assertAlmostEqual(lcfv([1.0, 0.0], [0.0, 1.0]), 0.0)

    def test_antipodal(self):
        """Test pred = -bold"""
        x = np.array([1.0, -2.0, 0.5])
        self.assertAlmostEqual(cfv(x, -x), -1.0)

    def test_lcfv_at_half(self):
        """Test cfv = 0.5 gives ln 0.5"""
        a = np.array([1.0, 0.0])
        b = np.array([0.5, np.sqrt(0.75)])
        self.assertAlmostEqual(lcfv(a, b), -0.6931, places=4)

    def test_lcfv_clamped(self):
        """Test identical inputs clamp to ln(eps)"""
        x = np.array([1.0, 2.0])
        self.assertAlmostEqual(lcfv(x, x), np.log(LCFV_EPS))

    def test_zero_vector(self):
        """Test cosine with a zero vector"""
        with self.assertRaises(ZeroVector):
            cfv([0.0, 0.0], [1.0, 1.0])


class TestDistanceMetrics(unittest.TestCase):
    def test_emv(self):
        """Test per-voxel distances and their mean"""
        x = np.zeros((1, 4))
        self.assertEqual(emv(x, x), 0.0)
        self.assertAlmostEqual(emv(x, np.full((1, 4), 3.0)), 6.0)
        pred = np.array([[2.0, 0.0], [0.0, 4.0]])
        self.assertAlmostEqual(emv(np.zeros((2, 2)), pred), 3.0)

    def test_voxel_major(self):
        """Test [T, X, Y, Z] becomes [voxels, T]"""
        window = np.arange(12.0).reshape(3, 2, 2, 1)
        out = voxel_major(window)
        self.assertEqual(out.shape, (4, 3))
        np.testing.assert_array_equal(out[1], [1.0, 5.0, 9.0])

    def test_epv(self):
        """Test one volume with diff [3, 4]"""
        self.assertEqual(epv_metric(np.zeros((1, 2)), np.zeros((1, 2))), 0.0)
        self.assertAlmostEqual(epv_metric(np.zeros((1, 2)), np.array([[3.0, 4.0]])), 2.5)

    def test_mae(self):
        """Test constant and mixed differences"""
        self.assertEqual(mae(np.ones((2, 3)), np.ones((2, 3))), 0.0)
        self.assertAlmostEqual(mae(np.zeros((2, 3)), np.full((2, 3), 2.0)), 2.0)
        self.assertAlmostEqual(mae(np.zeros((1, 2)), np.array([[1.0, -3.0]])), 2.0)

    def test_shape_mismatch(self):
        """Test inputs of different shapes"""
        with self.assertRaises(ShapeMismatch):
            mae(np.zeros((1, 2)), np.zeros((1, 3)))


class TestMetricConsistency(unittest.TestCase):
    def test_random_pairs(self):
        """Test LCFV, CFV and KL agree with each other over 1000 random window pairs"""
        rng = np.random.default_rng(11)
        for trial in range(1000):
            truth = rng.standard_normal((3, 2, 2, 1))
            pred = rng.standard_normal((3, 2, 2, 1))
            cosine = cfv(truth, pred)
            self.assertLessEqual(abs(cosine), 1.0 + 1e-12)
            self.assertAlmostEqual(lcfv(truth, pred), np.log(1.0 - cosine), delta=1e-9, msg=f"trial {trial}")
            self.assertLessEqual(lcfv(truth, pred), np.log(2.0) + 1e-12)
            self.assertGreaterEqual(lcfv(truth, pred), np.log(LCFV_EPS))
            self.assertGreaterEqual(kl(truth, pred), 0.0)
            scores = instance_metrics(truth, pred)
            self.assertEqual(scores["lcfv"], lcfv(truth, pred))

    def test_lcfv_floor(self):
        """Test scaled copies clamp to ln(eps) and stay there"""
        rng = np.random.default_rng(12)
        for _ in range(20):
            truth = rng.standard_normal((3, 2, 2, 1))
            self.assertEqual(lcfv(truth, 2.5 * truth), np.log(LCFV_EPS))
            self.assertEqual(kl(truth, truth), 0.0)

    def test_mae_against_epv(self):
        """Test MAE = EPV * sqrt(voxels) on constant residuals"""
        truth = np.random.default_rng(13).standard_normal((3, 2, 2, 1))
        for offset in (0.5, -1.25, 3.0):
            self.assertAlmostEqual(mae(truth, truth + offset), epv_metric(truth, truth + offset) * 2.0,
                                   places=12)


class TestDivergence(unittest.TestCase):
    def test_identical(self):
        """Test KL of a distribution with itself"""
        x = np.random.default_rng(0).standard_normal((3, 8))
        self.assertAlmostEqual(kl(x, x), 0.0)

    def test_hand_evaluated(self):
        """Test p=[0.5,0.5] against q=[0.25,0.75]"""
        self.assertAlmostEqual(kl_divergence([0.5, 0.5], [0.25, 0.75]), 0.1438, places=4)

    def test_non_negative(self):
        """Test the per-window value never drops below zero"""
        rng = np.random.default_rng(1)
        for _ in range(5):
            self.assertGreaterEqual(kl(rng.standard_normal((2, 6)), rng.standard_normal((2, 6))), 0.0)


class TestReports(unittest.TestCase):
    def test_perfect_model(self):
        """Test an oracle model scores zero error and unit cosine"""
        windows = make_windows(3)
        report = evaluate_all(OracleModel(windows), [RecordingSession("sub-01", windows)])
        for name in ("emv", "epv", "mae", "kl"):
            self.assertAlmostEqual(report.mean(name), 0.0)
        self.assertAlmostEqual(report.mean("cfv"), 1.0)
        self.assertEqual(report.count, 3)

    def test_single_instance_std(self):
        """Test one test window gives zero spread"""
        windows = make_windows(1)
        report = evaluate_predictions([windows[0].fmri.volumes], [windows[0].fmri.volumes + 1.0])
        for name in METRIC_NAMES:
            self.assertEqual(report.std(name), 0.0)

    def test_empty_test_set(self):
        """Test evaluation without windows"""
        with self.assertRaises(EmptyTestSet):
            evaluate_all(OracleModel([]), [RecordingSession("sub-01", [])])
        with self.assertRaises(EmptyTestSet):
            evaluate_predictions([], [])

    def test_threaded_matches_serial(self):
        """Test parallel scoring gives the same report"""
        rng = np.random.default_rng(2)
        truths = [rng.standard_normal((4, 2, 2, 1)) for _ in range(6)]
        preds = [t + 0.1 * rng.standard_normal(t.shape) for t in truths]
        serial = evaluate_predictions(truths, preds, workers=1)
        threaded = evaluate_predictions(truths, preds, workers=3)
        self.assertEqual(serial.values, threaded.values)

    def test_instance_metrics_keys(self):
        """Test every metric is reported per window"""
        window = make_windows(1)[0].fmri.volumes
        self.assertEqual(tuple(instance_metrics(window, window * 0.5)), METRIC_NAMES)

    def test_best_variant_direction(self):
        """Test cfv is maximized and errors minimized"""
        good = MetricsReport({name: [0.1] for name in METRIC_NAMES})
        bad = MetricsReport({name: [0.9] for name in METRIC_NAMES})
        reports = {"AE": bad, "LCOMB": good}
        self.assertEqual(best_variant(reports, "cfv"), "AE")
        self.assertEqual(best_variant(reports, "mae"), "LCOMB")

    def test_table_round_trip(self):
        """Test the CSV layout: metrics as rows, variants as columns"""
        reports = {"AE": MetricsReport({name: [1.0, 3.0] for name in METRIC_NAMES}),
                   "WGAN": MetricsReport({name: [2.0, 2.0] for name in METRIC_NAMES})}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.csv")
            write_metrics_table(reports, path)
            table = read_metrics_table(path)
        self.assertEqual(list(table), list(METRIC_NAMES))
        self.assertEqual(table["mae"]["AE"], "2.000000±1.000000")
        self.assertEqual(table["mae"]["WGAN"], "2.000000±0.000000")
        self.assertIn("best", table["cfv"])

    def test_single_variant_has_no_best_column(self):
        """Test a one-column table"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.csv")
            write_metrics_table({"AE": MetricsReport({name: [1.0] for name in METRIC_NAMES})}, path)
            self.assertEqual(list(read_metrics_table(path)["kl"]), ["AE"])


if __name__ == '__main__':
    unittest.main()
