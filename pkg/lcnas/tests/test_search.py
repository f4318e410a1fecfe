import csv
import itertools
import json
import math
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import torch
from hypothesis import given, settings, strategies as st

# Add repository root to path so the package imports as lcnas.app
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))

from lcnas.app.core.data import IGNORE_INDEX, gen_synthetic, iterate_batches
from lcnas.app.core.engine import seed_everything
from lcnas.app.core.network import SearchCell, build_supernet
from lcnas.app.core.search import (
    METRICS_HEADER, SearchAbort, alternate_step, arch_optimizer, discretize, enforce_pool_cap,
    frame_accuracy, frame_loss, prune_operations, run_search, select_run, stage_dropout,
    warmup_step, weight_optimizer,
)
from lcnas.app.models.config import (
    DropoutSchedule, SearchConfig, StageConfig, SyntheticTaskConfig, ToolkitConfig,
)
from lcnas.app.models.genotype import CellType, encode_genotype, parse_genotype
from lcnas.app.models.manifest import RunRecord
from lcnas.app.models.operations import OpFamily
from lcnas.app.models.search_space import LOW_LATENCY, CandidateSet
from lcnas.app.utils.validation import validate_genotype

N_EDGES = LOW_LATENCY.edge_count


def uniform_alphas(width=8):
    return {"causal": torch.zeros(N_EDGES, width), "reduction": torch.zeros(N_EDGES, width)}


def tiny_config(**search):
    stages = (
        StageConfig(depth=3, ops_kept=8, warmup_epochs=1, joint_epochs=1, batch_size=4),
        StageConfig(depth=4, ops_kept=4, warmup_epochs=0, joint_epochs=1, batch_size=4),
    )
    options = dict(channels=2, seeds=(1,), dropout_settings=((0.0, 0.1),))
    options.update(search)
    return ToolkitConfig(search=SearchConfig(**options), stages=stages,
                         network={"cells": 5, "channels": 2, "hidden": (8,)})


def tiny_dataset(utterances=12):
    return gen_synthetic(SyntheticTaskConfig(classes=3, utterances=utterances,
                                             min_frames=16, max_frames=16))


def brute_force_cell(matrix):
    """Best pair of incoming edges per node, scored by their best non-zero softmax weight."""
    weights = np.exp(matrix - matrix.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    chosen = set()
    for dst in LOW_LATENCY.intermediate_nodes:
        best_key, best_pair = None, None
        for a, b in itertools.combinations(range(dst), 2):
            picks = []
            for src in (a, b):
                e = LOW_LATENCY.edge_index(src, dst)
                op = max(range(1, 8), key=lambda i: (weights[e, i], -i))
                picks.append((-weights[e, op], e, src, op))
            key = sorted(picks)
            if best_key is None or key < best_key:
                best_key, best_pair = key, picks
        chosen |= {(src, dst, LOW_LATENCY.operations[op].name) for _, _, src, op in best_pair}
    return chosen


class TestLosses(unittest.TestCase):
    def test_padding_frames_are_ignored(self):
        logits = torch.tensor([[[5.0, 0.0], [0.0, 5.0], [9.0, -9.0]]])
        labels = torch.tensor([[0, 1, IGNORE_INDEX]])
        self.assertEqual(frame_accuracy(logits, labels), (2, 2))
        full = frame_loss(logits[:, :2], labels[:, :2])
        self.assertAlmostEqual(float(frame_loss(logits, labels)), float(full), places=6)


class TestDropoutSchedule(unittest.TestCase):
    def test_linear_decay_starts_at_p(self):
        """Test that the first epoch of a stage uses the full rate"""
        rates = [stage_dropout(0.1, e, 10) for e in range(10)]
        self.assertEqual(rates[0], 0.1)
        self.assertAlmostEqual(rates[-1], 0.01)
        self.assertEqual(rates, sorted(rates, reverse=True))
        self.assertEqual(stage_dropout(0.1, 10, 10), 0.0)

    def test_single_epoch_stage(self):
        self.assertEqual(stage_dropout(0.2, 0, 1), 0.2)

    def test_constant(self):
        self.assertEqual(stage_dropout(0.2, 5, 10, DropoutSchedule.CONSTANT), 0.2)


class TestPruning(unittest.TestCase):
    def test_keeps_strongest_in_space_order(self):
        alphas = {"causal": torch.arange(8.0).repeat(N_EDGES, 1),
                  "reduction": torch.arange(8.0).flip(0).repeat(N_EDGES, 1)}
        pruned, fresh = prune_operations(alphas, CandidateSet.full(LOW_LATENCY), LOW_LATENCY, 3)
        self.assertEqual(pruned.causal[0], (0, 5, 6, 7))
        self.assertEqual(pruned.reduction[0], (0, 1, 2, 3))
        self.assertEqual(tuple(fresh.alpha_causal.shape), (N_EDGES, 4))
        self.assertFalse(fresh.alpha_causal.any())

    def test_zero_always_survives(self):
        """Test that the zero op stays on every edge even with the smallest logit"""
        row = torch.tensor([-20.0, 3, 1, 4, 1, 5, 9, 2])
        alphas = {"causal": row.repeat(N_EDGES, 1), "reduction": row.repeat(N_EDGES, 1)}
        for keep in range(1, 8):
            pruned, _ = prune_operations(alphas, CandidateSet.full(LOW_LATENCY), LOW_LATENCY, keep)
            self.assertEqual(pruned.ops_per_edge, keep + 1)
            self.assertTrue(all(r[0] == 0 for r in pruned.causal + pruned.reduction))
        pruned, _ = prune_operations(alphas, CandidateSet.full(LOW_LATENCY), LOW_LATENCY, 2)
        self.assertEqual(set(pruned.causal), {(0, 5, 6)})

    def test_dominant_zero_does_not_take_a_slot(self):
        row = torch.tensor([10.0, 0, 0, 0, 0, 0, 0, 1.0])
        alphas = {"causal": row.repeat(N_EDGES, 1), "reduction": row.repeat(N_EDGES, 1)}
        pruned, _ = prune_operations(alphas, CandidateSet.full(LOW_LATENCY), LOW_LATENCY, 1)
        self.assertEqual(set(pruned.causal), {(0, 7)})

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=7))
    def test_matches_sort_oracle(self, seed, keep):
        rng = np.random.default_rng(seed)
        raw = {"causal": rng.standard_normal((N_EDGES, 8)), "reduction": rng.standard_normal((N_EDGES, 8))}
        pruned, _ = prune_operations({k: torch.from_numpy(v) for k, v in raw.items()},
                                     CandidateSet.full(LOW_LATENCY), LOW_LATENCY, keep)
        for cell_type, matrix in raw.items():
            for row, got in zip(matrix, pruned.rows(cell_type)):
                # softmax is monotone, so ranking the logits ranks the weights
                order = sorted(range(1, 8), key=lambda i: (-row[i], i))
                self.assertEqual(got, tuple(sorted([0] + order[:keep])))

    def test_pruning_a_pruned_set_maps_back_to_space_indices(self):
        first = CandidateSet(causal=((1, 4, 6),) * N_EDGES, reduction=((2, 3, 5),) * N_EDGES)
        alphas = {"causal": torch.tensor([0.0, 2.0, 1.0]).repeat(N_EDGES, 1),
                  "reduction": torch.tensor([3.0, 0.0, 1.0]).repeat(N_EDGES, 1)}
        pruned, _ = prune_operations(alphas, first, LOW_LATENCY, 2)
        self.assertEqual(pruned.causal[0], (4, 6))
        self.assertEqual(pruned.reduction[0], (2, 5))
        with_zero = CandidateSet(causal=((0, 4, 6),) * N_EDGES, reduction=((0, 3, 5),) * N_EDGES)
        alphas = {"causal": torch.tensor([5.0, 0.0, 2.0]).repeat(N_EDGES, 1),
                  "reduction": torch.tensor([5.0, 1.0, 0.0]).repeat(N_EDGES, 1)}
        pruned, _ = prune_operations(alphas, with_zero, LOW_LATENCY, 1)
        self.assertEqual(pruned.causal[0], (0, 6))
        self.assertEqual(pruned.reduction[0], (0, 3))

    def test_bad_keep(self):
        for keep in (0, 8):
            with self.assertRaises(ValueError):
                prune_operations(uniform_alphas(), CandidateSet.full(LOW_LATENCY), LOW_LATENCY, keep)


class TestDiscretize(unittest.TestCase):
    def test_ties_go_to_lower_edges_and_ops(self):
        g = discretize(uniform_alphas(), LOW_LATENCY)
        self.assertTrue(validate_genotype(g).ok)
        for cell in (g.causal_cell, g.reduction_cell):
            self.assertEqual([(e.src, e.dst) for e in cell.edges],
                             [(s, d) for d in range(2, 6) for s in (0, 1)])
            self.assertEqual({e.op.name for e in cell.edges}, {"max_pool_3x3"})
        self.assertTrue(all(e.op.causal for e in g.causal_cell.edges))
        self.assertFalse(any(e.op.causal for e in g.reduction_cell.edges))

    def test_strongest_edges_win(self):
        alphas = uniform_alphas()
        e = LOW_LATENCY.edge_index(3, 4)
        alphas["reduction"][e, LOW_LATENCY.op_index("conv_5x1_1x5")] = 4.0
        g = discretize(alphas, LOW_LATENCY)
        incoming = {(x.src, x.op.name) for x in g.reduction_cell.incoming(4)}
        self.assertIn((3, "conv_5x1_1x5"), incoming)

    def test_zero_weight_is_skipped(self):
        alphas = uniform_alphas()
        alphas["causal"][:, 0] = 10.0
        g = discretize(alphas, LOW_LATENCY)
        self.assertEqual(g.causal_cell.count(OpFamily.ZERO), 0)

    @given(st.integers(min_value=0, max_value=10_000))
    def test_random_alphas_give_valid_genotypes(self, seed):
        gen = torch.Generator().manual_seed(seed)
        alphas = {"causal": torch.randn(N_EDGES, 8, generator=gen),
                  "reduction": torch.randn(N_EDGES, 8, generator=gen)}
        g = enforce_pool_cap(discretize(alphas, LOW_LATENCY), alphas, LOW_LATENCY)
        self.assertTrue(validate_genotype(g).ok)

    def test_matches_pair_enumeration(self):
        """Test discretize against every distinct-predecessor edge pair on 1000 matrices"""
        rng = np.random.default_rng(0)
        for trial in range(1000):
            raw = {"causal": rng.standard_normal((N_EDGES, 8)),
                   "reduction": rng.standard_normal((N_EDGES, 8))}
            g = discretize({k: torch.from_numpy(v) for k, v in raw.items()}, LOW_LATENCY)
            for cell_type, matrix in raw.items():
                cell = g.cell(CellType(cell_type))
                self.assertEqual(cell.count(OpFamily.ZERO), 0)
                got = {(e.src, e.dst, e.op.name) for e in cell.edges}
                self.assertEqual(got, brute_force_cell(matrix), trial)


class TestPoolCap(unittest.TestCase):
    def test_weakest_pools_are_replaced(self):
        """Test the avg-pool cap on a discretized causal cell"""
        alphas = uniform_alphas()
        pool = LOW_LATENCY.op_index("avg_pool_3x3")
        sep = LOW_LATENCY.op_index("sep_conv_3x3")
        alphas["causal"][:, pool] = 5.0
        alphas["causal"][:, sep] = 1.0
        alphas["causal"][LOW_LATENCY.edge_index(0, 2), pool] = 6.0
        alphas["causal"][LOW_LATENCY.edge_index(1, 2), pool] = 6.0
        g = discretize(alphas, LOW_LATENCY)
        self.assertEqual(g.causal_cell.count(OpFamily.AVG_POOL), 8)
        capped = enforce_pool_cap(g, alphas, LOW_LATENCY, cap=2)
        self.assertEqual(capped.causal_cell.count(OpFamily.AVG_POOL), 2)
        self.assertEqual({e.op.name for e in capped.causal_cell.incoming(2)}, {"avg_pool_3x3"})
        others = [e for e in capped.causal_cell.edges if e.dst != 2]
        self.assertEqual({e.op.name for e in others}, {"sep_conv_3x3"})
        self.assertTrue(validate_genotype(capped).ok)
        self.assertEqual(capped.reduction_cell, g.reduction_cell)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=0.0, max_value=4.0))
    def test_idempotent_and_within_cap(self, seed, pool_bias):
        gen = torch.Generator().manual_seed(seed)
        alphas = {"causal": torch.randn(N_EDGES, 8, generator=gen),
                  "reduction": torch.randn(N_EDGES, 8, generator=gen)}
        alphas["causal"][:, LOW_LATENCY.op_index("avg_pool_3x3")] += pool_bias
        once = enforce_pool_cap(discretize(alphas, LOW_LATENCY), alphas, LOW_LATENCY, cap=2)
        self.assertLessEqual(once.causal_cell.count(OpFamily.AVG_POOL), 2)
        self.assertEqual(enforce_pool_cap(once, alphas, LOW_LATENCY, cap=2), once)
        self.assertTrue(validate_genotype(once).ok)


class TestSteps(unittest.TestCase):
    def setUp(self):
        seed_everything(0)
        self.net = build_supernet(LOW_LATENCY, 3, 2, 3, hidden=(8,))
        self.batches = list(iterate_batches(tiny_dataset(4), 2))
        cfg = SearchConfig()
        self.w_opt, _ = weight_optimizer(self.net, cfg, 1)
        self.a_opt = arch_optimizer(self.net, cfg)

    def test_warmup_leaves_alphas_alone(self):
        before = [a.detach().clone() for a in self.net.arch_parameters()]
        loss = warmup_step(self.net, self.batches[0], self.w_opt)
        self.assertTrue(loss > 0)
        for a, b in zip(self.net.arch_parameters(), before):
            self.assertTrue(torch.equal(a, b))
            self.assertTrue(a.requires_grad)

    def test_alternate_step_moves_alphas(self):
        before = self.net.alphas.alpha_causal.detach().clone()
        train_loss, val_loss = alternate_step(self.net, self.batches[0], self.batches[1],
                                              self.w_opt, self.a_opt)
        self.assertFalse(torch.equal(before, self.net.alphas.alpha_causal.detach()))
        self.assertTrue(val_loss > 0 and train_loss > 0)

    def test_alternate_step_without_alpha_update(self):
        before = [a.detach().clone() for a in self.net.arch_parameters()]
        weights = [w.detach().clone() for w in self.net.weight_parameters()]
        train_loss, val_loss = alternate_step(self.net, self.batches[0], self.batches[1],
                                              self.w_opt, self.a_opt, update_alpha=False)
        self.assertTrue(math.isnan(val_loss))
        self.assertTrue(train_loss > 0)
        for a, b in zip(self.net.arch_parameters(), before):
            self.assertTrue(torch.equal(a, b))
        self.assertFalse(all(torch.equal(w, b) for w, b in zip(self.net.weight_parameters(), weights)))

    def test_warmup_is_deterministic(self):
        def run():
            seed_everything(5)
            net = build_supernet(LOW_LATENCY, 3, 2, 3, hidden=(8,))
            w_opt, _ = weight_optimizer(net, SearchConfig(), 1)
            losses = [warmup_step(net, batch, w_opt) for batch in self.batches * 3]
            return losses, [w.detach().clone() for w in net.weight_parameters()]

        first, second = run(), run()
        self.assertEqual(first[0], second[0])
        for a, b in zip(first[1], second[1]):
            self.assertTrue(torch.equal(a, b))

    def test_warmup_fits_a_fixed_batch(self):
        """Test that 50 warmup steps on one batch lower its loss"""
        losses = [warmup_step(self.net, self.batches[0], self.w_opt) for _ in range(50)]
        self.assertLess(np.mean(losses[-5:]), np.mean(losses[:5]))

    def test_alpha_gradient_matches_finite_differences(self):
        seed_everything(0)
        net = build_supernet(LOW_LATENCY, 3, 2, 3, hidden=(8,)).double().eval()
        batch = self.batches[0]
        x = batch.features.double()

        def loss():
            return frame_loss(net(x), batch.labels)

        loss().backward()
        alpha = net.alphas.alpha_causal
        grad = alpha.grad.clone()
        eps = 1e-6
        with torch.no_grad():
            for e, k in ((0, 0), (0, 3), (5, 5), (9, 2), (13, 7)):
                alpha[e, k] += eps
                up = float(loss())
                alpha[e, k] -= 2 * eps
                down = float(loss())
                alpha[e, k] += eps
                numeric = (up - down) / (2 * eps)
                self.assertLess(abs(numeric - float(grad[e, k])), 1e-6 + 1e-4 * abs(numeric), (e, k))

    def test_non_finite_loss_aborts(self):
        batch = self.batches[0]
        batch.features[0, 0, 0, 0] = float("nan")
        with self.assertRaises(SearchAbort) as ctx:
            warmup_step(self.net, batch, self.w_opt, stage=2)
        self.assertEqual(ctx.exception.stage, 2)
        self.assertIn("alpha_abs_max", ctx.exception.diagnostics)


class TestSelection(unittest.TestCase):
    def record(self, run_id, acc, latency, budget=430.0):
        return RunRecord(run_id=run_id, seed=1, dropout=(0.0,), genotype_hash="h", val_accuracy=acc,
                         latency_ms=latency, within_budget=latency <= budget)

    def test_best_within_budget(self):
        records = [self.record("a", 0.9, 500), self.record("b", 0.7, 300), self.record("c", 0.8, 420)]
        selection = select_run(records, 430.0)
        self.assertEqual((selection.selected, selection.rule), ("c", "best-val-within-budget"))

    def test_lowest_latency_when_nothing_fits(self):
        records = [self.record("a", 0.9, 500), self.record("b", 0.1, 450), self.record("c", 0.5, 450)]
        selection = select_run(records, 430.0)
        self.assertEqual((selection.selected, selection.rule), ("b", "lowest-latency"))

    def test_ties_go_to_the_earlier_run(self):
        records = [self.record("a", 0.5, 300), self.record("b", 0.5, 200)]
        self.assertEqual(select_run(records, 430.0).selected, "a")


class TestRunSearch(unittest.TestCase):
    def test_end_to_end(self):
        """Test a full three-stage search on a tiny synthetic task"""
        cfg = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            result = run_search(cfg, tiny_dataset(), out)
            run_dir = out / "runs" / "seed-1_drop-0.00-0.10"
            for name in ("metrics.csv", "alphas_stage1.json", "alphas_stage2.json",
                         "genotype.json", "latency.json"):
                self.assertTrue((run_dir / name).exists(), name)
            for name in ("genotype.json", "latency.json", "selection.json"):
                self.assertTrue((out / name).exists(), name)

            with open(run_dir / "metrics.csv", newline="") as f:
                rows = list(csv.reader(f))
            self.assertEqual(tuple(rows[0]), METRICS_HEADER)
            self.assertEqual(len(rows) - 1, 2 + 1)

            stage2 = json.loads((run_dir / "alphas_stage2.json").read_text())
            self.assertEqual(len(stage2["candidates"]["causal"][0]), 4)
            self.assertIn("zero", stage2["candidates"]["causal"][0])

            g = parse_genotype((out / "genotype.json").read_text())
        self.assertTrue(validate_genotype(g).ok)
        self.assertEqual(g.metadata.seed, 1)
        self.assertEqual([s.ops_kept for s in g.metadata.stages], [8, 4])
        self.assertEqual(len(result.runs), 1)
        self.assertLessEqual(result.selected.latency.total_ms, 430.0)

    def test_zero_dropout_setting_never_masks(self):
        """Test that an all-zero dropout setting leaves regularized ops unmasked"""
        cfg = tiny_config(dropout_settings=((0.0, 0.0),))
        calls = []
        original = SearchCell.dropout_mask

        def spy(cell, p):
            mask = original(cell, p)
            calls.append((p, mask))
            return mask

        with mock.patch.object(SearchCell, "dropout_mask", autospec=True, side_effect=spy):
            run_search(cfg, tiny_dataset())
        self.assertTrue(calls)
        self.assertTrue(all(p == 0.0 and mask is None for p, mask in calls))

    def test_same_seed_same_genotype(self):
        cfg = tiny_config()
        data = tiny_dataset()
        first = run_search(cfg, data).selected.genotype
        second = run_search(cfg, data).selected.genotype
        self.assertEqual(encode_genotype(first).encode("utf-8"), encode_genotype(second).encode("utf-8"))


if __name__ == '__main__':
    unittest.main()
