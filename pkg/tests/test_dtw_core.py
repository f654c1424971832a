import unittest
from unittest import mock

import numpy as np
import numpy.testing as npt

from dtw_core import (
    DEFAULT_SENTINEL,
    DimensionError,
    MoveSet,
    NoFeasiblePathError,
    NonFiniteError,
    OracleSizeError,
    ShapeError,
    TimeSeries,
    WarpingPath,
    brute_force_dtw,
    cost_matrix,
    dtw_batched,
    dtw_distance,
    dtw_downdiag,
    dtw_full,
    dtw_rolling,
    nearest_neighbor,
    path_cost,
)


def ts(values: list[float] | np.ndarray) -> TimeSeries:
    return TimeSeries(np.asarray(values, dtype=np.float64))


class TestCostMatrix(unittest.TestCase):
    def test_examples(self) -> None:
        npt.assert_array_equal(cost_matrix(ts([0, 1]), ts([0, 2])).entries, [[0, 4], [1, 1]])
        x = ts([3, -1, 2])
        npt.assert_array_equal(np.diag(cost_matrix(x, x).entries), np.zeros(3))

    def test_matches_double_loop(self) -> None:
        rng = np.random.default_rng(3)
        x = TimeSeries(rng.normal(size=(5, 2)))
        y = TimeSeries(rng.normal(size=(5, 2)))
        c = cost_matrix(x, y)
        for i in range(5):
            for j in range(5):
                d = x.values[i] - y.values[j]
                self.assertAlmostEqual(c.entries[i, j], float(d @ d), places=12)
        self.assertEqual((c.n_rows, c.n_cols), (5, 5))

    def test_dimension_mismatch(self) -> None:
        with self.assertRaises(DimensionError):
            cost_matrix(TimeSeries(np.zeros((3, 2))), ts([0, 1, 2]))

    def test_non_finite_rejected(self) -> None:
        with self.assertRaises(NonFiniteError):
            ts([0.0, np.nan])
        with self.assertRaises(ShapeError):
            TimeSeries(np.zeros((0, 1)))


class TestFullDTW(unittest.TestCase):
    def test_identity(self) -> None:
        x = ts([1, 4, 2, 8])
        d, path = dtw_full(x, x)
        self.assertEqual(d, 0.0)
        self.assertEqual(path.steps, tuple((i, i) for i in range(1, 5)))

    def test_repetition_is_free(self) -> None:
        d, path = dtw_full(ts([1, 2, 3]), ts([1, 2, 2, 3]))
        self.assertEqual(d, 0.0)
        self.assertTrue(path.is_valid(3, 4))

    def test_matches_brute_force(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(500):
            n, m = rng.integers(1, 7, size=2)
            dim = int(rng.integers(1, 3))
            x = TimeSeries(rng.normal(size=(n, dim)))
            y = TimeSeries(rng.normal(size=(m, dim)))
            d, path = dtw_full(x, y)
            self.assertEqual(d, brute_force_dtw(x, y, MoveSet.FULL))
            self.assertEqual(d, dtw_distance(x, y))
            self.assertTrue(path.is_valid(int(n), int(m)))
            self.assertEqual(path_cost(cost_matrix(x, y), path), d)

    def test_symmetric(self) -> None:
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = TimeSeries(rng.normal(size=(int(rng.integers(1, 12)), 1)))
            y = TimeSeries(rng.normal(size=(int(rng.integers(1, 12)), 1)))
            self.assertAlmostEqual(dtw_distance(x, y), dtw_distance(y, x), places=9)

    def test_never_above_downdiag(self) -> None:
        rng = np.random.default_rng(2)
        for _ in range(200):
            m = int(rng.integers(1, 10))
            n = int(rng.integers(m, 15))
            x = TimeSeries(rng.normal(size=(n, 1)))
            y = TimeSeries(rng.normal(size=(m, 1)))
            self.assertLessEqual(dtw_distance(x, y), dtw_downdiag(x, y))

    def test_path_validity_rules(self) -> None:
        down_diag = MoveSet.DOWN_DIAGONAL
        self.assertTrue(WarpingPath(((1, 1), (2, 1), (3, 2))).is_valid(3, 2, down_diag))
        self.assertFalse(WarpingPath(((1, 1), (1, 2), (2, 2))).is_valid(2, 2, down_diag))
        self.assertFalse(WarpingPath(((1, 1), (3, 2))).is_valid(3, 2))
        self.assertFalse(WarpingPath(((1, 1), (2, 2))).is_valid(3, 2))


class TestBruteForce(unittest.TestCase):
    def test_examples(self) -> None:
        x = ts([0, 3, 1])
        for moves in MoveSet:
            self.assertEqual(brute_force_dtw(x, x, moves), 0.0)
        self.assertEqual(brute_force_dtw(ts([0, 0]), ts([0, 1]), MoveSet.FULL), 1.0)
        self.assertEqual(brute_force_dtw(ts([0, 0]), ts([0, 1]), MoveSet.DOWN_DIAGONAL), 1.0)

    def test_size_guard(self) -> None:
        with self.assertRaises(OracleSizeError):
            brute_force_dtw(ts(np.zeros(9)), ts(np.zeros(8)))

    def test_no_downdiag_path(self) -> None:
        with self.assertRaises(NoFeasiblePathError):
            brute_force_dtw(ts([0, 1]), ts([0, 1, 2]), MoveSet.DOWN_DIAGONAL)


class TestDownDiagonal(unittest.TestCase):
    def test_examples(self) -> None:
        x = ts([2, 7, 1])
        self.assertEqual(dtw_downdiag(x, x), 0.0)
        self.assertEqual(dtw_downdiag(ts([1, 2, 3]), ts([1, 3])), 1.0)

    def test_infeasible(self) -> None:
        with self.assertRaises(NoFeasiblePathError):
            dtw_downdiag(ts([1, 2]), ts([1, 2, 3]))
        with self.assertRaises(NoFeasiblePathError):
            dtw_rolling(ts([1, 2]), ts([1, 2, 3]))

    def test_matches_brute_force(self) -> None:
        rng = np.random.default_rng(4)
        for _ in range(500):
            m = int(rng.integers(1, 7))
            n = int(rng.integers(m, 7))
            dim = int(rng.integers(1, 3))
            x = TimeSeries(rng.normal(size=(n, dim)))
            y = TimeSeries(rng.normal(size=(m, dim)))
            self.assertEqual(dtw_downdiag(x, y), brute_force_dtw(x, y, MoveSet.DOWN_DIAGONAL))

    def test_rolling_is_bitwise_equal(self) -> None:
        rng = np.random.default_rng(5)
        for _ in range(1000):
            m = int(rng.integers(1, 12))
            n = int(rng.integers(m, 20))
            dim = int(rng.integers(1, 4))
            x = TimeSeries(rng.normal(size=(n, dim)))
            y = TimeSeries(rng.normal(size=(m, dim)))
            self.assertEqual(dtw_rolling(x, y), dtw_downdiag(x, y))

    def test_long_input_stays_finite(self) -> None:
        rng = np.random.default_rng(6)
        x = TimeSeries(rng.normal(size=(140, 1)))
        y = TimeSeries(rng.normal(size=(70, 1)))
        d = dtw_rolling(x, y)
        self.assertTrue(np.isfinite(d))
        self.assertLess(d, DEFAULT_SENTINEL / 2)


class TestBatched(unittest.TestCase):
    def test_single_prototype(self) -> None:
        rng = np.random.default_rng(7)
        x = TimeSeries(rng.normal(size=(9, 2)))
        p = TimeSeries(rng.normal(size=(5, 2)))
        self.assertEqual(dtw_batched(x, [p])[0], dtw_rolling(x, p))

    def test_matches_independent_calls(self) -> None:
        rng = np.random.default_rng(8)
        for _ in range(20):
            x = TimeSeries(rng.normal(size=(12, 1)))
            protos = [TimeSeries(rng.normal(size=(7, 1))) for _ in range(5)]
            expected = [dtw_rolling(x, p) for p in protos]
            npt.assert_array_equal(dtw_batched(x, protos), expected)

    def test_self_distance_is_minimum(self) -> None:
        rng = np.random.default_rng(9)
        protos = [TimeSeries(rng.normal(size=(6, 1))) for _ in range(5)]
        d = dtw_batched(protos[3], protos)
        self.assertEqual(d[3], 0.0)
        self.assertEqual(int(np.argmin(d)), 3)

    def test_errors(self) -> None:
        x = ts(np.zeros(6))
        with self.assertRaises(ShapeError):
            dtw_batched(x, [ts([0, 1]), ts([0, 1, 2])])
        with self.assertRaises(NoFeasiblePathError):
            dtw_batched(ts([0, 1]), [ts([0, 1, 2])])
        with self.assertRaises(DimensionError):
            dtw_batched(x, [TimeSeries(np.zeros((3, 2)))])


class TestNearestNeighbor(unittest.TestCase):
    def test_self_match(self) -> None:
        rng = np.random.default_rng(10)
        refs = [TimeSeries(rng.normal(size=(15, 1))) for _ in range(8)]
        idx, dist = nearest_neighbor(refs[2:5], refs, n_jobs=2)
        npt.assert_array_equal(idx, [2, 3, 4])
        npt.assert_array_equal(dist, [0.0, 0.0, 0.0])

    def test_ties_go_to_lower_index(self) -> None:
        refs = [ts([1, 1, 1]), ts([0, 0, 0]), ts([0, 0, 0])]
        idx, _ = nearest_neighbor([ts([0, 0, 0])], refs)
        self.assertEqual(int(idx[0]), 1)

    def test_all_cores_split(self) -> None:
        rng = np.random.default_rng(11)
        refs = [TimeSeries(rng.normal(size=(6, 1))) for _ in range(5)]
        queries = [TimeSeries(rng.normal(size=(6, 1))) for _ in range(40)]
        with mock.patch("dtw_core.cpu_count", return_value=8):
            with self.assertLogs("dtw_core", level="INFO") as cm:
                idx, dist = nearest_neighbor(queries, refs, n_jobs=-1)
        self.assertIn("in 32 chunks", cm.output[0])
        one_idx, one_dist = nearest_neighbor(queries, refs, n_jobs=1)
        npt.assert_array_equal(idx, one_idx)
        npt.assert_array_equal(dist, one_dist)

    def test_hand_computed(self) -> None:
        # DTW([0,2],[0,1]) = 1 and DTW([0,2],[3,3]) = 9 + 1 = 10
        idx, dist = nearest_neighbor([ts([0, 2])], [ts([3, 3]), ts([0, 1])])
        self.assertEqual(int(idx[0]), 1)
        self.assertEqual(float(dist[0]), 1.0)


if __name__ == '__main__':
    unittest.main()
