from typing import Dict, Iterable, List, Optional, Set

from ..models.genotype import CellSpec, CellType, Genotype, GenotypeStructureError
from ..models.operations import OpFamily
from ..models.reports import ValidationReport, Violation
from ..models.search_space import SearchSpaceSpec, SpaceMismatchError, get_space

AVG_POOL_CAP = 2

RULE_RETAIN_K = "retain-k"
RULE_DISTINCT = "distinct-predecessors"
RULE_ZERO = "zero-op"
RULE_CAUSAL = "causal-ops"
RULE_AVG_POOL = "avg-pool cap"
RULE_MEMBERSHIP = "space-membership"
RULE_STACK = "stack-count"
RULE_CELL_TYPE = "cell-type"


def check_cell_structure(cell: CellSpec, space: SearchSpaceSpec) -> None:
    """Raise GenotypeStructureError for graphs no rule check can make sense of."""
    label = f"{cell.cell_type.value} cell"
    if not cell.edges:
        raise GenotypeStructureError(f"{label} has no edges")
    for e in cell.edges:
        if e.dst not in space.intermediate_nodes:
            raise GenotypeStructureError(f"{label}: edge {e.src}->{e.dst} targets a non-intermediate node")
        if not 0 <= e.src < space.output_node:
            raise GenotypeStructureError(f"{label}: edge {e.src}->{e.dst} has an invalid source")
    detect_cycle(((e.src, e.dst) for e in cell.edges), label)


def detect_cycle(pairs: Iterable, label: str = "cell") -> None:
    """Depth-first search for a cycle among (from, to) pairs"""
    graph: Dict[int, List[int]] = {}
    for src, dst in pairs:
        graph.setdefault(src, []).append(dst)

    visited: Set[int] = set()
    temp_visited: Set[int] = set()

    def has_cycle(node):
        visited.add(node)
        temp_visited.add(node)
        for neighbor in graph.get(node, []):
            if neighbor not in visited:
                if has_cycle(neighbor):
                    return True
            elif neighbor in temp_visited:
                return True
        temp_visited.remove(node)
        return False

    for node in list(graph):
        if node not in visited and has_cycle(node):
            raise GenotypeStructureError(f"{label}: cycle detected among edges")


def _cell_violations(cell: CellSpec, expected: CellType, space: SearchSpaceSpec,
                     avg_pool_cap: int) -> List[Violation]:
    found: List[Violation] = []

    def flag(rule, message, node=None, edge=None):
        found.append(Violation(rule=rule, cell=expected, message=message, node=node, edge=edge))

    if cell.cell_type != expected:
        flag(RULE_CELL_TYPE, f"stored as {cell.cell_type.value}")

    for node in space.intermediate_nodes:
        incoming = cell.incoming(node)
        if len(incoming) != space.retain_k:
            flag(RULE_RETAIN_K, f"{len(incoming)} incoming edges, expected {space.retain_k}", node=node)
        sources = [e.src for e in incoming]
        if len(set(sources)) != len(sources):
            flag(RULE_DISTINCT, f"repeated predecessor among {sorted(sources)}", node=node)

    by_name = {op.name: op for op in space.operations}
    for e in cell.edges:
        pair = (e.src, e.dst)
        if e.op.family == OpFamily.ZERO:
            flag(RULE_ZERO, "the zero op cannot survive discretization", edge=pair)
        if expected == CellType.CAUSAL and not e.op.causal:
            flag(RULE_CAUSAL, f"{e.op.name} is not causal", edge=pair)
        if e.op.family == OpFamily.IDENTITY:
            continue
        reference = by_name.get(e.op.name)
        if reference is None:
            flag(RULE_MEMBERSHIP, f"{e.op.name} is not in {space.name}", edge=pair)
        elif reference.conv_stack_count != e.op.conv_stack_count:
            flag(RULE_STACK, f"{e.op.name} has stack {e.op.conv_stack_count}, "
                             f"{space.name} uses {reference.conv_stack_count}", edge=pair)
        elif reference != e.op.as_causal(False):
            flag(RULE_MEMBERSHIP, f"{e.op.name} differs from the {space.name} definition", edge=pair)

    if expected == CellType.CAUSAL:
        pools = cell.count(OpFamily.AVG_POOL)
        if pools > avg_pool_cap:
            flag(RULE_AVG_POOL, f"{pools} avg_pool edges, at most {avg_pool_cap} allowed")
    return found


def validate_genotype(g: Genotype, space: Optional[SearchSpaceSpec] = None,
                      avg_pool_cap: int = AVG_POOL_CAP) -> ValidationReport:
    """Check both cells against the discretized-cell rules.

    Rule violations are collected into the report; graphs that are not even
    well formed raise GenotypeStructureError instead.
    """
    if space is None:
        space = get_space(g.space)
    elif space.name != g.space:
        raise SpaceMismatchError(f"genotype is for {g.space}, checked against {space.name}")

    violations: List[Violation] = []
    for expected in (CellType.CAUSAL, CellType.REDUCTION):
        cell = g.cell(expected)
        check_cell_structure(cell, space)
        violations.extend(_cell_violations(cell, expected, space, avg_pool_cap))
    return ValidationReport(violations=tuple(violations))


def require_valid(g: Genotype, space: Optional[SearchSpaceSpec] = None) -> None:
    """Raise GenotypeStructureError listing every violation, if any."""
    report = validate_genotype(g, space)
    if not report.ok:
        raise GenotypeStructureError("; ".join(str(v) for v in report.violations))
