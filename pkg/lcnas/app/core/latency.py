"""Static algorithmic latency: how many future input frames an output frame needs.

Each op contributes its right context multiplied by the frame period (in input
frames) of the tensor it reads. Inside a reduction cell the edges leaving the
input nodes read at the cell's input rate; everything downstream reads at
twice that period.
"""
import logging
from typing import Dict, List, Optional, Tuple

import networkx as nx

from ..models.genotype import CellSpec, CellType, Genotype, GenotypeStructureError, build_cell, genotype_hash
from ..models.operations import KERNEL_FREE, OperationKind, OpFamily
from ..models.plan import MacroPlan
from ..models.reports import CellLatency, LatencyReport, PathHop
from ..models.search_space import SearchSpaceSpec, SpaceMismatchError

logger = logging.getLogger(__name__)

SYMMETRIC_DELTA_LOOKAHEAD = 2


def block_contexts(op: OperationKind) -> List[int]:
    """Right context of each sequential block of ``op``, in frames at that block's input."""
    if op.causal or op.family in KERNEL_FREE:
        return [0]
    half = (op.kernel_time - 1) // 2
    if op.family == OpFamily.SEPARABLE_CONV:
        return [half] * op.conv_stack_count
    if op.family == OpFamily.DILATED_SEPARABLE_CONV:
        return [half * op.dilation]
    # pools, factorized pairs (time kernel only) and the plain stem conv
    return [half]


def op_right_context(op: OperationKind) -> int:
    """Future frames consumed at the op's input rate, stride effect excluded.

    post: __return__ >= 0
    post: __return__ == 0 or not op.causal
    """
    return sum(block_contexts(op))


def op_cost(op: OperationKind, period: int, strided: bool) -> int:
    """Cost in input frames of ``op`` reading a tensor at ``period`` input frames per frame.

    Blocks after a strided first block read at ``2 * period``.

    pre: period >= 1
    post: __return__ >= op_right_context(op) * period
    """
    contexts = block_contexts(op)
    cost = contexts[0] * period
    later = 2 * period if strided else period
    return cost + sum(c * later for c in contexts[1:])


def _edge_cost(src: int, op: OperationKind, period: int, strided: bool) -> int:
    if strided:
        if src < 2:
            return op_cost(op, period, True)
        return op_cost(op, 2 * period, False)
    return op_cost(op, period, False)


def _cell_graph(cell: CellSpec, period: int, strided: bool) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from([0, 1])
    for e in cell.edges:
        cost = _edge_cost(e.src, e.op, period, strided)
        if g.has_edge(e.src, e.dst):
            # parallel edges: only the costlier one can be critical
            if g[e.src][e.dst]["weight"] >= cost:
                continue
        g.add_edge(e.src, e.dst, weight=cost, op=e.op.name)
    if not nx.is_directed_acyclic_graph(g):
        raise GenotypeStructureError(f"{cell.cell_type.value} cell contains a cycle")
    return g


def _longest_from(g: nx.DiGraph, sources) -> Tuple[Dict, Dict]:
    """Longest-path distance from any of ``sources`` to every reachable node, with predecessors."""
    dist = {s: 0 for s in sources if s in g}
    pred: Dict = {}
    for node in nx.topological_sort(g):
        if node not in dist:
            continue
        for succ in g.successors(node):
            d = dist[node] + g[node][succ]["weight"]
            if succ not in dist or d > dist[succ]:
                dist[succ] = d
                pred[succ] = node
    return dist, pred


def cell_latency_frames(cell: CellSpec, period: int, strided: bool
                        ) -> Tuple[int, List[Tuple[int, int, str, int]]]:
    """(frames, critical path as (src, dst, op, cost) hops) for one cell."""
    g = _cell_graph(cell, period, strided)
    dist, pred = _longest_from(g, (0, 1))
    intermediates = [n for n in dist if n >= 2]
    if not intermediates:
        return 0, []
    # lowest node index wins ties so reports are stable
    end = max(intermediates, key=lambda n: (dist[n], -n))
    path = []
    node = end
    while node in pred:
        src = pred[node]
        path.append((src, node, g[src][node]["op"], g[src][node]["weight"]))
        node = src
    return dist[end], list(reversed(path))


def cell_latency(cell: CellSpec, input_period: float, strided: bool,
                 frame_period_in: float = 10.0) -> Tuple[float, List[Tuple[int, int, str, float]]]:
    """Cell latency in ms and its critical path, for input frames ``input_period`` ms apart."""
    period = int(round(input_period / frame_period_in))
    frames, path = cell_latency_frames(cell, max(period, 1), strided)
    return frames * frame_period_in, [(s, d, op, c * frame_period_in) for s, d, op, c in path]


def network_graph(plan: MacroPlan, g: Genotype) -> nx.DiGraph:
    """Dataflow DAG of the whole evaluation network, weighted in input frames.

    Nodes: ``"input"``, ``"stem"``, ``(cell, node)`` and ``"output"``.
    Shape-matching preprocessing is zero-weight: 1x1 or causal strided 1x1.
    """
    net = nx.DiGraph()
    net.add_edge("input", "stem", weight=op_cost(plan.stem, 1, False), op=plan.stem.name)
    prev_prev, prev = "stem", "stem"
    for k, cell_type in enumerate(plan.cell_types()):
        cell = g.cell(cell_type)
        strided = cell_type == CellType.REDUCTION
        period = plan.input_period(k)
        net.add_edge(prev_prev, (k, 0), weight=0, op="preprocess")
        net.add_edge(prev, (k, 1), weight=0, op="preprocess")
        dests = set()
        for e in cell.edges:
            cost = _edge_cost(e.src, e.op, period, strided)
            key = ((k, e.src), (k, e.dst))
            if net.has_edge(*key) and net[key[0]][key[1]]["weight"] >= cost:
                continue
            net.add_edge(*key, weight=cost, op=e.op.name)
            dests.add(e.dst)
        for node in sorted(dests):
            net.add_edge((k, node), (k, "out"), weight=0, op="concat")
        prev_prev, prev = prev, (k, "out")
    net.add_edge(prev, "output", weight=0, op="head")
    if not nx.is_directed_acyclic_graph(net):
        raise GenotypeStructureError("network graph contains a cycle")
    return net


def _check_space(plan: MacroPlan, g: Genotype, space: Optional[SearchSpaceSpec]) -> None:
    if space is not None and space.name != g.space:
        raise SpaceMismatchError(f"genotype is for {g.space}, plan was built for {space.name}")


def network_latency(plan: MacroPlan, g: Genotype, space: Optional[SearchSpaceSpec] = None,
                    feature_lookahead_frames: int = 0) -> LatencyReport:
    """Whole-network latency report for ``g`` stacked into ``plan``.

    ``per_cell`` holds cell-local latencies; the total is the exact longest
    path of the network graph, which equals stem + sum(per_cell) whenever the
    two reduction cells are not adjacent (L >= 5).
    """
    _check_space(plan, g, space)
    ms = plan.frame_period_in
    net = network_graph(plan, g)
    dist, _ = _longest_from(net, ("input",))
    total = dist["output"] + feature_lookahead_frames

    per_cell = []
    hops = []
    for k, cell_type in enumerate(plan.cell_types()):
        strided = cell_type == CellType.REDUCTION
        period = plan.input_period(k)
        frames, path = cell_latency_frames(g.cell(cell_type), period, strided)
        per_cell.append(CellLatency(index=k, cell_type=cell_type, latency_ms=frames * ms,
                                    latency_frames=frames, input_frame_period_ms=period * ms))
        if strided:
            hops.extend(PathHop(cell_index=k, src=s, dst=d, op=op, cost_ms=c * ms)
                        for s, d, op, c in path)
    stem_frames = dist["stem"]
    report = LatencyReport(
        genotype_hash=genotype_hash(g),
        space=g.space,
        total_cells=plan.total_cells,
        frame_period_in=ms,
        stem_ms=stem_frames * ms,
        feature_lookahead_frames=feature_lookahead_frames,
        total_ms=total * ms,
        total_input_frames=total,
        per_cell=tuple(per_cell),
        critical_path=tuple(hops),
    )
    logger.debug("Latency of %s over %d cells: %d frames", report.genotype_hash[:12],
                 plan.total_cells, total)
    return report


def _costliest(space: SearchSpaceSpec, period: int, strided: bool, causal: bool = False
               ) -> OperationKind:
    candidates = [op.as_causal(causal) for op in space.operations if op.family != OpFamily.ZERO]
    return max(candidates, key=lambda op: op_cost(op, period, strided))


def worst_case_genotype(space: SearchSpaceSpec) -> Genotype:
    """A valid genotype whose reduction cell puts the costliest op on every edge of
    the chain input -> 2 -> 3 -> 4 -> 5, and costliest ops everywhere else."""
    first = _costliest(space, 1, True).name
    later = _costliest(space, 2, False).name
    reduction = [(0, 2, first), (1, 2, first)]
    for dst in range(3, 2 + space.intermediate_count):
        reduction += [(0, dst, first), (dst - 1, dst, later)]
    # causal cell: any valid structure; avoid avg pools for the cap
    safe = next(op.name for op in space.operations
                if op.family not in (OpFamily.ZERO, OpFamily.AVG_POOL))
    causal = [(s, d, safe) for d in space.intermediate_nodes for s in (d - 2, d - 1)]
    return Genotype(
        space=space.name,
        causal_cell=build_cell(space, CellType.CAUSAL, causal),
        reduction_cell=build_cell(space, CellType.REDUCTION, sorted(reduction, key=lambda e: (e[1], e[0]))),
    )


def space_latency_bound(space: SearchSpaceSpec, plan: MacroPlan) -> float:
    """Largest total latency any genotype from ``space`` can have under ``plan`` (ms)."""
    return network_latency(plan, worst_case_genotype(space)).total_ms
