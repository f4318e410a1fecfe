"""Super-network (mixed ops, shared alphas) and discrete evaluation networks."""
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..models.genotype import CellSpec, CellType, Genotype, genotype_hash
from ..models.operations import REGULARIZED, OpFamily
from ..models.plan import MacroPlan, PlanError, build_macro_plan
from ..models.search_space import CandidateSet, SearchSpaceSpec, SpaceMismatchError, get_space
from ..utils.validation import require_valid
from .engine import EngineError
from .ops import ReLUConvBN, Stem, StridedPointwise, build_operation

logger = logging.getLogger(__name__)

ALPHA_INIT_SCALE = 1e-3


def mixed_op(outputs: Sequence[Optional[torch.Tensor]], alpha_row: torch.Tensor,
             mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax(alpha_row)-weighted sum of candidate outputs.

    Masked candidates (mask 0, or a ``None`` output) contribute nothing; the
    remaining weights are not renormalized.
    """
    weights = F.softmax(alpha_row, dim=-1)
    if mask is not None:
        if not bool(mask.any()):
            raise EngineError("every candidate op on the edge was dropped")
        weights = weights * mask
    total = None
    for w, out in zip(weights, outputs):
        if out is None:
            continue
        term = w * out
        total = term if total is None else total + term
    if total is None:
        raise EngineError("no candidate output to mix")
    return total


def preprocess(c_in: int, c_out: int, strided: bool, affine: bool) -> nn.Module:
    if strided:
        return StridedPointwise(c_in, c_out, affine=affine)
    return ReLUConvBN(c_in, c_out, (1, 1), affine=affine)


class AlphaParams(nn.Module):
    """Architecture weights, one [edges x candidates] matrix per cell type."""

    def __init__(self, edges: int, width: int, random_init: bool = True):
        super().__init__()
        init = (lambda: ALPHA_INIT_SCALE * torch.randn(edges, width)) if random_init \
            else (lambda: torch.zeros(edges, width))
        self.alpha_causal = nn.Parameter(init())
        self.alpha_reduce = nn.Parameter(init())

    def row_matrix(self, cell_type: CellType) -> torch.Tensor:
        return self.alpha_causal if cell_type == CellType.CAUSAL else self.alpha_reduce

    def weights(self, cell_type: CellType) -> torch.Tensor:
        return F.softmax(self.row_matrix(cell_type), dim=-1)

    def as_dict(self) -> Dict[str, List[List[float]]]:
        return {
            CellType.CAUSAL.value: self.alpha_causal.detach().cpu().tolist(),
            CellType.REDUCTION.value: self.alpha_reduce.detach().cpu().tolist(),
        }


class MixedOp(nn.Module):
    def __init__(self, space: SearchSpaceSpec, candidates: Sequence[int], channels: int,
                 stride: int, causal: bool):
        super().__init__()
        self.candidates = tuple(candidates)
        kinds = [space.operations[i].as_causal(causal) for i in self.candidates]
        self.ops = nn.ModuleList(
            build_operation(k, channels, stride, affine=False, pool_norm=True) for k in kinds)
        self.regularized = torch.tensor([k.family in REGULARIZED for k in kinds])

    def forward(self, x, alpha_row, mask=None):
        outputs = [None if mask is not None and not mask[i] else op(x)
                   for i, op in enumerate(self.ops)]
        return mixed_op(outputs, alpha_row, mask)


class SearchCell(nn.Module):
    def __init__(self, space: SearchSpaceSpec, rows: Sequence[Sequence[int]], cell_type: CellType,
                 c_prev_prev: int, c_prev: int, channels: int, reduction_prev: bool):
        super().__init__()
        self.cell_type = cell_type
        self.reduction = cell_type == CellType.REDUCTION
        self.space = space
        self.preprocess0 = preprocess(c_prev_prev, channels, reduction_prev, affine=False)
        self.preprocess1 = preprocess(c_prev, channels, False, affine=False)
        self.edges = nn.ModuleList()
        for (src, _dst), row in zip(space.edge_endpoints(), rows):
            stride = 2 if self.reduction and src < 2 else 1
            self.edges.append(MixedOp(space, row, channels, stride, causal=not self.reduction))
        self.multiplier = space.intermediate_count

    def dropout_mask(self, p: float) -> Optional[torch.Tensor]:
        """Bernoulli keep-mask over regularized candidates; edges with only regularized ops stay whole."""
        if p <= 0.0:
            return None
        masks = []
        for edge in self.edges:
            keep = torch.ones(len(edge.ops), dtype=torch.bool)
            reg = edge.regularized
            if bool(reg.any()) and not bool(reg.all()):
                drop = torch.rand(len(edge.ops)) < p
                keep = ~(drop & reg)
            masks.append(keep)
        return torch.stack(masks)

    def forward(self, s0, s1, alphas: torch.Tensor, masks: Optional[torch.Tensor] = None):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        offset = 0
        for dst in self.space.intermediate_nodes:
            node = None
            for src in range(dst):
                i = offset + src
                mask = masks[i] if masks is not None else None
                out = self.edges[i](states[src], alphas[i], mask)
                node = out if node is None else node + out
            offset += dst
            states.append(node)
        return torch.cat(states[2:], dim=1)


class Head(nn.Module):
    """Frequency average, fully connected layers, per-frame class logits."""

    def __init__(self, c_in: int, hidden: Sequence[int], classes: int):
        super().__init__()
        layers = []
        width = c_in
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU(inplace=False)]
            width = h
        layers.append(nn.Linear(width, classes))
        self.mlp = nn.Sequential(*layers)

    def forward(self, x):
        # (B, C, T, F) -> (B, T, C)
        return self.mlp(x.mean(dim=3).transpose(1, 2))


class SuperNet(nn.Module):
    def __init__(self, space: SearchSpaceSpec, plan: MacroPlan, candidates: CandidateSet,
                 random_alpha_init: bool = True,
                 dropout_cells: Iterable[CellType] = (CellType.CAUSAL, CellType.REDUCTION)):
        super().__init__()
        self.space = space
        self.plan = plan
        self.candidates = candidates
        self.op_dropout = 0.0
        self.dropout_cells: Set[CellType] = set(dropout_cells)
        C = plan.initial_channels
        self.stem = Stem(plan.in_channels, C, plan.stem)
        self.cells = nn.ModuleList()
        c_pp, c_p = C, C
        for k, cell_type in enumerate(plan.cell_types()):
            channels = plan.channels_at(k)
            reduction_prev = k > 0 and plan.is_reduction(k - 1)
            cell = SearchCell(space, candidates.rows(cell_type.value), cell_type,
                              c_pp, c_p, channels, reduction_prev)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.multiplier * channels
        self.head = Head(c_p, plan.head.hidden, plan.head.classes)
        self.alphas = AlphaParams(space.edge_count, candidates.ops_per_edge, random_alpha_init)

    @property
    def depth(self) -> int:
        return len(self.cells)

    def arch_parameters(self) -> List[nn.Parameter]:
        return list(self.alphas.parameters())

    def weight_parameters(self) -> List[nn.Parameter]:
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def forward(self, x):
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            masks = None
            if self.training and cell.cell_type in self.dropout_cells:
                masks = cell.dropout_mask(self.op_dropout)
            s0, s1 = s1, cell(s0, s1, self.alphas.row_matrix(cell.cell_type), masks)
        return self.head(s1)

    def genotype(self, avg_pool_cap: int = 2) -> Genotype:
        from .search import discretize, enforce_pool_cap
        g = discretize(self.alphas, self.space, self.candidates)
        return enforce_pool_cap(g, self.alphas, self.space, self.candidates, avg_pool_cap)


def build_supernet(space: SearchSpaceSpec, depth: int, C: int, classes: int,
                   candidates: Optional[CandidateSet] = None, hidden: Tuple[int, ...] = (128, 128),
                   causal_stem: bool = False, random_alpha_init: bool = True,
                   dropout_cells: Iterable[CellType] = (CellType.CAUSAL, CellType.REDUCTION)
                   ) -> SuperNet:
    if classes < 2:
        raise PlanError(f"classes={classes}: need at least 2")
    plan = build_macro_plan(depth, C, classes=classes, causal_stem=causal_stem, hidden=hidden)
    candidates = candidates or CandidateSet.full(space)
    net = SuperNet(space, plan, candidates, random_alpha_init, dropout_cells)
    logger.info("Built %d-cell super-network over %s with %d ops per edge (%d parameters)",
                depth, space.name, candidates.ops_per_edge, parameter_count(net))
    return net


class EvalCell(nn.Module):
    def __init__(self, spec: CellSpec, space: SearchSpaceSpec, c_prev_prev: int, c_prev: int,
                 channels: int, reduction_prev: bool):
        super().__init__()
        self.reduction = spec.cell_type == CellType.REDUCTION
        self.space = space
        self.preprocess0 = preprocess(c_prev_prev, channels, reduction_prev, affine=True)
        self.preprocess1 = preprocess(c_prev, channels, False, affine=True)
        self.links = [(e.src, e.dst) for e in spec.edges]
        self.ops = nn.ModuleList(
            build_operation(e.op, channels, 2 if self.reduction and e.src < 2 else 1)
            for e in spec.edges)
        self.multiplier = space.intermediate_count
        # hand-written cells may link a higher node into a lower one
        order = nx.DiGraph(self.links)
        order.add_nodes_from(space.intermediate_nodes)
        self.order = [n for n in nx.topological_sort(order) if n in space.intermediate_nodes]

    def forward(self, s0, s1):
        states: Dict[int, torch.Tensor] = {0: self.preprocess0(s0), 1: self.preprocess1(s1)}
        for dst in self.order:
            node = None
            for (src, d), op in zip(self.links, self.ops):
                if d != dst:
                    continue
                out = op(states[src])
                node = out if node is None else node + out
            states[dst] = node
        return torch.cat([states[n] for n in self.space.intermediate_nodes], dim=1)


class EvalNet(nn.Module):
    def __init__(self, genotype: Genotype, plan: MacroPlan):
        super().__init__()
        self.genotype = genotype
        self.plan = plan
        space = get_space(genotype.space)
        C = plan.initial_channels
        self.stem = Stem(plan.in_channels, C, plan.stem)
        self.cells = nn.ModuleList()
        c_pp, c_p = C, C
        for k, cell_type in enumerate(plan.cell_types()):
            channels = plan.channels_at(k)
            reduction_prev = k > 0 and plan.is_reduction(k - 1)
            cell = EvalCell(genotype.cell(cell_type), space, c_pp, c_p, channels, reduction_prev)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.multiplier * channels
        self.head = Head(c_p, plan.head.hidden, plan.head.classes)

    @property
    def genotype_hash(self) -> str:
        return genotype_hash(self.genotype)

    def forward(self, x):
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return self.head(s1)

    def posteriors(self, x):
        return F.softmax(self.forward(x), dim=-1)


def build_eval_net(genotype: Genotype, L: int, C: int, classes: int,
                   hidden: Tuple[int, ...] = (128, 128), causal_stem: bool = False,
                   space: Optional[SearchSpaceSpec] = None) -> EvalNet:
    """Stack ``genotype`` into an L-cell network; rejects invalid genotypes first."""
    if space is not None and space.name != genotype.space:
        raise SpaceMismatchError(f"genotype is for {genotype.space}, not {space.name}")
    require_valid(genotype, space)
    plan = build_macro_plan(L, C, classes=classes, causal_stem=causal_stem, hidden=hidden)
    net = EvalNet(genotype, plan)
    logger.info("Built eval network L=%d C=%d: %d parameters", L, C, parameter_count(net))
    return net


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def output_frames(input_frames: int) -> int:
    """Frames after two stride-2 reductions."""
    return -(-input_frames // 4)
