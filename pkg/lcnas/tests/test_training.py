import csv
import os
import sys
import tempfile
import unittest
from pathlib import Path

# Add repository root to path so the package imports as lcnas.app
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))

from lcnas.app.core.data import gen_synthetic, split_for_search
from lcnas.app.core.engine import read_checkpoint_sidecar, seed_everything
from lcnas.app.core.network import build_eval_net
from lcnas.app.core.training import cosine_lr, last_epoch, logistic_baseline, train_eval_net
from lcnas.app.models.config import ConfigError, SyntheticTaskConfig, TrainConfig
from lcnas.app.models.genotype import parse_genotype

FIXTURES = os.path.join(os.path.dirname(__file__), '..', 'fixtures')


def load_fixture(name):
    with open(os.path.join(FIXTURES, name), encoding="utf-8") as f:
        return parse_genotype(f.read())


class TestTrainEval(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)
        dataset = gen_synthetic(SyntheticTaskConfig(classes=3, utterances=10, min_frames=16,
                                                    max_frames=16))
        train_a, train_b, self.val = split_for_search(dataset, seed=0, holdout=0.2)
        self.train = train_a.merged(train_b)
        self.genotype = load_fixture("asrnet_c.json")

    def tearDown(self):
        self.tmp.cleanup()

    def net(self):
        seed_everything(0)
        return build_eval_net(self.genotype, 5, 2, 3, hidden=(8,))

    def test_rows_and_checkpoint(self):
        """Test metric rows and the checkpoint written after training"""
        net = self.net()
        rows = train_eval_net(net, self.train, self.val, TrainConfig(epochs=2, batch_size=4),
                              self.out)
        self.assertEqual([(r[0], r[1]) for r in rows], [(0, "init"), (1, "train"), (2, "train")])
        self.assertFalse(net.training)
        sidecar = read_checkpoint_sidecar(self.out / "model.bin")
        self.assertEqual(sidecar["extra"], {"epoch": 2, "genotype_hash": net.genotype_hash})
        self.assertEqual(last_epoch(self.out / "metrics.csv"), 2)

    def test_resume_continues_numbering(self):
        train_eval_net(self.net(), self.train, self.val, TrainConfig(epochs=1, batch_size=4), self.out)
        rows = train_eval_net(self.net(), self.train, self.val, TrainConfig(epochs=3, batch_size=4),
                              self.out, resume=True)
        self.assertEqual([r[0] for r in rows], [2, 3])
        with open(self.out / "metrics.csv", newline="") as f:
            epochs = [int(row["epoch"]) for row in csv.DictReader(f)]
        self.assertEqual(epochs, [0, 1, 2, 3])

    def test_resume_rejects_another_genotype(self):
        """Test that a checkpoint for one genotype cannot seed another"""
        train_eval_net(self.net(), self.train, self.val, TrainConfig(epochs=1, batch_size=4), self.out)
        other = build_eval_net(load_fixture("asrnet_d.json"), 5, 2, 3, hidden=(8,))
        with self.assertRaises(ConfigError) as ctx:
            train_eval_net(other, self.train, self.val, TrainConfig(epochs=2, batch_size=4),
                           self.out, resume=True)
        self.assertEqual(ctx.exception.key, "resume")
        self.assertEqual(last_epoch(self.out / "metrics.csv"), 1)

    def test_resume_without_checkpoint(self):
        with self.assertRaises(ConfigError):
            train_eval_net(self.net(), self.train, self.val, TrainConfig(epochs=1, batch_size=4),
                           self.out, resume=True)

    def test_last_epoch_without_metrics(self):
        self.assertEqual(last_epoch(self.out / "missing.csv"), -1)


@unittest.skipUnless(os.environ.get("LCNAS_SLOW"), "set LCNAS_SLOW=1 for the learnability run")
class TestLearnability(unittest.TestCase):
    def test_reference_network_learns_the_causal_task(self):
        """Test that an L=8, C=12 network reaches 90% frame accuracy in 15 epochs"""
        classes = 8
        dataset = gen_synthetic(SyntheticTaskConfig(classes=classes, future_window=0,
                                                    utterances=400))
        train_a, train_b, val = split_for_search(dataset, seed=0, holdout=0.1)
        train = train_a.merged(train_b)
        baseline = logistic_baseline(train, val, window=8)
        self.assertGreater(baseline, 1 / classes + 0.2)

        seed_everything(0)
        net = build_eval_net(load_fixture("asrnet_c.json"), 8, 12, classes, hidden=(64,))
        with tempfile.TemporaryDirectory() as tmp:
            rows = train_eval_net(net, train, val, TrainConfig(epochs=15, batch_size=16), Path(tmp))
        accuracies = [float(r[4]) for r in rows]
        self.assertLessEqual(abs(accuracies[0] - 1 / classes), 0.02)
        self.assertGreaterEqual(accuracies[-1], 0.9)


class TestSchedules(unittest.TestCase):
    def test_cosine_endpoints(self):
        self.assertAlmostEqual(cosine_lr(0, 10, 0.1, 0.001), 0.1)
        self.assertAlmostEqual(cosine_lr(10, 10, 0.1, 0.001), 0.001)
        self.assertAlmostEqual(cosine_lr(5, 10, 0.1, 0.0), 0.05)


class TestBaseline(unittest.TestCase):
    def test_causal_task_beats_chance(self):
        """Test the logistic baseline on a purely causal task"""
        dataset = gen_synthetic(SyntheticTaskConfig(classes=4, past_window=4, future_window=0,
                                                    utterances=60, min_frames=64, max_frames=64))
        train_a, train_b, val = split_for_search(dataset, seed=0, holdout=0.2)
        acc = logistic_baseline(train_a.merged(train_b), val, window=8)
        self.assertGreater(acc, 0.5)


if __name__ == '__main__':
    unittest.main()
