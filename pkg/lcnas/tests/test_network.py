import os
import sys
import unittest
from unittest import mock

import numpy as np
import torch
from hypothesis import given, strategies as st

# Add repository root to path so the package imports as lcnas.app
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))

from lcnas.app.core.engine import EngineError, seed_everything
from lcnas.app.core.network import (
    EvalNet, SearchCell, build_eval_net, build_supernet, mixed_op, output_frames, parameter_count,
)
from lcnas.app.models.genotype import (
    CellType, Genotype, GenotypeStructureError, build_cell, parse_genotype,
)
from lcnas.app.models.plan import PlanError, build_macro_plan
from lcnas.app.models.search_space import LOW_LATENCY, MEDIUM_LATENCY, SpaceMismatchError
from lcnas.app.utils.validation import validate_genotype

FIXTURES = os.path.join(os.path.dirname(__file__), '..', 'fixtures')


def load_fixture(name):
    with open(os.path.join(FIXTURES, name), encoding="utf-8") as f:
        return parse_genotype(f.read())


class TestMixedOp(unittest.TestCase):
    def test_weighted_sum(self):
        outputs = [torch.full((2,), float(i)) for i in range(4)]
        out = mixed_op(outputs, torch.zeros(4))
        self.assertTrue(torch.allclose(out, torch.full((2,), 1.5)))

    def test_masked_weights_are_not_renormalized(self):
        outputs = [torch.ones(3) for _ in range(4)]
        mask = torch.tensor([True, False, True, False])
        out = mixed_op(outputs, torch.zeros(4), mask)
        self.assertTrue(torch.allclose(out, torch.full((3,), 0.5)))

    def test_everything_dropped(self):
        with self.assertRaises(EngineError):
            mixed_op([torch.ones(1)] * 2, torch.zeros(2), torch.tensor([False, False]))


    @given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=-50, max_value=50))
    def test_logit_shift_invariance(self, seed, shift):
        gen = torch.Generator().manual_seed(seed)
        outputs = [torch.randn(3, 4, generator=gen, dtype=torch.float64) for _ in range(8)]
        alpha = torch.randn(8, generator=gen, dtype=torch.float64)
        self.assertTrue(torch.allclose(mixed_op(outputs, alpha + shift), mixed_op(outputs, alpha),
                                       atol=1e-9))

    def test_saturated_logit_selects_one_op(self):
        """Test that a +20 logit collapses the mix onto that op"""
        torch.manual_seed(0)
        outputs = [torch.randn(2, 3, 4, 5, dtype=torch.float64) for _ in range(8)]
        for k in range(8):
            alpha = torch.zeros(8, dtype=torch.float64)
            alpha[k] = 20.0
            self.assertTrue(torch.allclose(mixed_op(outputs, alpha), outputs[k], atol=1e-6), k)

    @given(st.integers(min_value=0, max_value=10_000))
    def test_matches_explicit_softmax(self, seed):
        rng = np.random.default_rng(seed)
        outputs = rng.standard_normal((8, 2, 3, 4, 5))
        alpha = rng.standard_normal(8) * 3
        w = np.exp(alpha - alpha.max())
        expected = np.tensordot(w / w.sum(), outputs, axes=1)
        got = mixed_op([torch.from_numpy(o) for o in outputs], torch.from_numpy(alpha))
        self.assertLess(float(np.abs(got.numpy() - expected).max()), 1e-6)


class TestSuperNet(unittest.TestCase):
    def setUp(self):
        seed_everything(0)
        self.net = build_supernet(LOW_LATENCY, 3, 2, 3, hidden=(8,))
        self.x = torch.randn(2, 3, 16, 40)

    def test_forward_shape(self):
        out = self.net(self.x)
        self.assertEqual(tuple(out.shape), (2, 4, 3))

    def test_parameter_groups_are_disjoint(self):
        arch = {id(p) for p in self.net.arch_parameters()}
        weights = {id(p) for p in self.net.weight_parameters()}
        self.assertEqual(len(arch), 2)
        self.assertFalse(arch & weights)
        self.assertEqual(len(arch) + len(weights), len(list(self.net.parameters())))

    def test_depth_five_layout(self):
        """Test reductions at cells 1 and 3 and 14 mixed edges per cell"""
        net = build_supernet(LOW_LATENCY, 5, 2, 3, hidden=(8,))
        self.assertEqual(net.plan.reduction_positions, (1, 3))
        self.assertEqual([c.cell_type for c in net.cells],
                         [CellType.CAUSAL, CellType.REDUCTION, CellType.CAUSAL,
                          CellType.REDUCTION, CellType.CAUSAL])
        for cell in net.cells:
            self.assertEqual(len(cell.edges), 14)
            self.assertTrue(all(len(edge.ops) == 8 for edge in cell.edges))

    def test_eight_frames_in_two_frames_out(self):
        net = build_supernet(LOW_LATENCY, 5, 2, 3, hidden=(8,))
        out = net(torch.randn(2, 3, 8, 40))
        self.assertEqual(tuple(out.shape), (2, 2, 3))
        self.assertEqual(output_frames(8), 2)

    def test_alpha_shape(self):
        self.assertEqual(tuple(self.net.alphas.alpha_causal.shape), (14, 8))
        self.assertEqual(tuple(self.net.alphas.alpha_reduce.shape), (14, 8))

    def test_dropout_mask_never_empties_an_edge(self):
        """Test that regularization dropout keeps at least one op per edge"""
        torch.manual_seed(3)
        cell = self.net.cells[0]
        for _ in range(20):
            masks = cell.dropout_mask(0.99)
            self.assertTrue(bool(masks.any(dim=1).all()))
            for edge, keep in zip(cell.edges, masks):
                self.assertTrue(bool(keep[~edge.regularized].all()))
        self.assertIsNone(cell.dropout_mask(0.0))

    def test_dropout_only_on_configured_cells_in_training(self):
        net = build_supernet(LOW_LATENCY, 3, 2, 3, hidden=(8,), dropout_cells=(CellType.REDUCTION,))
        net.op_dropout = 0.5
        with mock.patch.object(SearchCell, "dropout_mask", autospec=True,
                               side_effect=lambda cell, p: None) as spy:
            net.train()
            net(self.x)
            self.assertEqual([c.args[0].cell_type for c in spy.call_args_list], [CellType.REDUCTION] * 2)
            spy.reset_mock()
            net.eval()
            net(self.x)
            spy.assert_not_called()

    def test_genotype_is_valid(self):
        g = self.net.genotype()
        self.assertTrue(validate_genotype(g).ok)
        self.assertEqual(g.space, LOW_LATENCY.name)

    def test_too_few_classes(self):
        with self.assertRaises(PlanError):
            build_supernet(LOW_LATENCY, 3, 2, 1)


class TestEvalNet(unittest.TestCase):
    def test_forward_and_posteriors(self):
        seed_everything(0)
        net = build_eval_net(load_fixture("asrnet_c.json"), 5, 4, 4, hidden=(16,))
        net.eval()
        probs = net.posteriors(torch.randn(1, 3, 20, 40))
        self.assertEqual(tuple(probs.shape), (1, 5, 4))
        self.assertTrue(torch.allclose(probs.sum(dim=-1), torch.ones(1, 5)))

    def test_medium_space(self):
        net = build_eval_net(load_fixture("asrnet_d.json"), 5, 2, 3, hidden=(8,))
        out = net(torch.randn(2, 3, 12, 40))
        self.assertEqual(tuple(out.shape), (2, 3, 3))

    def test_hash_matches_genotype(self):
        from lcnas.app.models.genotype import genotype_hash
        g = load_fixture("asrnet_c.json")
        net = build_eval_net(g, 5, 2, 3, hidden=(8,))
        self.assertEqual(net.genotype_hash, genotype_hash(g))

    def test_rejects_invalid_and_mismatched_genotypes(self):
        g = load_fixture("asrnet_c.json")
        with self.assertRaises(SpaceMismatchError):
            build_eval_net(g, 5, 2, 3, space=MEDIUM_LATENCY)
        ladder = [(d - 2, d, "zero") for d in range(2, 6)] + [(d - 1, d, "zero") for d in range(2, 6)]
        bad = g.model_copy(update={"causal_cell": build_cell(LOW_LATENCY, CellType.CAUSAL, ladder)})
        with self.assertRaises(GenotypeStructureError):
            build_eval_net(bad, 5, 2, 3)

    def test_backward_links_run_in_topological_order(self):
        """Test a cell whose node 3 reads from node 4"""
        edges = [(0, 2, "sep_conv_3x3"), (1, 2, "max_pool_3x3"), (0, 4, "sep_conv_3x3"),
                 (2, 4, "conv_3x1_1x3"), (1, 3, "sep_conv_3x3"), (4, 3, "dil_conv_3x3"),
                 (0, 5, "sep_conv_5x5"), (3, 5, "max_pool_3x3")]
        g = Genotype(space=LOW_LATENCY.name,
                     causal_cell=build_cell(LOW_LATENCY, CellType.CAUSAL, edges),
                     reduction_cell=build_cell(LOW_LATENCY, CellType.REDUCTION, edges))
        self.assertTrue(validate_genotype(g).ok)
        net = EvalNet(g, build_macro_plan(3, 2, classes=3, hidden=(8,)))
        self.assertEqual(tuple(net(torch.randn(1, 3, 8, 40)).shape), (1, 2, 3))

    def test_width_grows_parameters(self):
        g = load_fixture("asrnet_c.json")
        small = parameter_count(build_eval_net(g, 5, 2, 3, hidden=(8,)))
        large = parameter_count(build_eval_net(g, 5, 4, 3, hidden=(8,)))
        self.assertGreater(large, small)

    @given(st.integers(min_value=1, max_value=4096))
    def test_output_frames(self, frames):
        self.assertEqual(output_frames(frames), -(-frames // 4))
        self.assertGreaterEqual(4 * output_frames(frames), frames)


if __name__ == '__main__':
    unittest.main()
