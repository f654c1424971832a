import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

from storage import RunExistsError, RunLedger, RunRecord


def record(run_id: str, accuracy: float = 0.5) -> RunRecord:
    return RunRecord(
        run_id=run_id,
        dataset="Toy",
        method="warpnet",
        rate=1.0,
        selection_seed=0,
        train_seed=0,
        subsample_seed=0,
        config_hash="0123456789",
        accuracy=accuracy,
        run_dir=f"runs/{run_id}",
    )


class TestRunLedger(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name) / "out"

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_append_and_read(self) -> None:
        ledger = RunLedger(self.dir)
        ledger.append(record("a", 0.9))
        ledger.append(record("b"))
        self.assertEqual(len(ledger), 2)
        self.assertEqual(ledger.keys(), ("a", "b"))
        self.assertEqual(ledger["a"].accuracy, 0.9)
        # all-digit hashes stay text
        self.assertEqual(ledger["a"].config_hash, "0123456789")
        self.assertEqual([r.run_id for r in ledger], ["a", "b"])
        with self.assertRaises(KeyError):
            ledger["c"]

    def test_never_overwrites(self) -> None:
        ledger = RunLedger(self.dir)
        ledger.append(record("a", 0.9))
        with self.assertRaises(RunExistsError):
            ledger.append(replace(record("a"), accuracy=0.1))
        self.assertEqual(RunLedger(self.dir)["a"].accuracy, 0.9)

    def test_allocate_run_dir(self) -> None:
        ledger = RunLedger(self.dir)
        first = ledger.allocate_run_dir("Toy-run")
        self.assertTrue(first.is_dir())
        second = ledger.allocate_run_dir("Toy-run")
        self.assertEqual(second.name, "Toy-run.1")
        ledger.append(record("Toy-run.2"))
        third = ledger.allocate_run_dir("Toy-run")
        self.assertEqual(third.name, "Toy-run.3")


if __name__ == '__main__':
    unittest.main()
