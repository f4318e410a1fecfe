import enum
import hashlib
import json
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .operations import OperationKind, OpFamily
from .search_space import SearchSpaceSpec, SpaceMismatchError, get_space

SCHEMA_VERSION = 1


class CellType(str, enum.Enum):
    CAUSAL = "causal"
    REDUCTION = "reduction"


class GenotypeParseError(ValueError):
    """Genotype text could not be read; ``location`` points at the offending field."""

    def __init__(self, message: str, location: str = "$"):
        super().__init__(f"{location}: {message}")
        self.location = location


class GenotypeStructureError(ValueError):
    """Cell graph is malformed (bad node indices, cycles, no edges)."""


class Edge(BaseModel):
    model_config = ConfigDict(frozen=True)

    src: int
    dst: int
    op: OperationKind


class CellSpec(BaseModel):
    """A discretized cell: a list of (from, to, op) edges.

    Structure is not checked here; see ``utils.validation.validate_genotype``.
    """
    model_config = ConfigDict(frozen=True)

    cell_type: CellType
    edges: Tuple[Edge, ...]

    @property
    def causal(self) -> bool:
        return all(e.op.causal for e in self.edges)

    def incoming(self, node: int) -> List[Edge]:
        return [e for e in self.edges if e.dst == node]

    def count(self, family: OpFamily) -> int:
        return sum(1 for e in self.edges if e.op.family == family)


class StageRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    stage: int
    depth: int
    ops_kept: int
    dropout: float = 0.0


class GenotypeMetadata(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: Optional[int] = None
    stages: Tuple[StageRecord, ...] = ()
    label: Optional[str] = None


class Genotype(BaseModel):
    model_config = ConfigDict(frozen=True)

    space: str
    causal_cell: CellSpec
    reduction_cell: CellSpec
    metadata: GenotypeMetadata = Field(default_factory=GenotypeMetadata)

    def cell(self, cell_type: CellType) -> CellSpec:
        return self.causal_cell if cell_type == CellType.CAUSAL else self.reduction_cell

    def __repr__(self):
        return f"<Genotype {self.space} ({len(self.causal_cell.edges)}+{len(self.reduction_cell.edges)} edges)>"


def _encode_cell(cell: CellSpec, default_causal: bool) -> Dict[str, Any]:
    flags = {e.op.causal for e in cell.edges}
    if len(flags) > 1:
        raise GenotypeStructureError(f"{cell.cell_type.value} cell mixes causal and non-causal ops")
    causal = flags.pop() if flags else default_causal
    return {
        "causal": causal,
        "edges": [{"from": e.src, "to": e.dst, "op": e.op.name} for e in cell.edges],
    }


def genotype_to_dict(g: Genotype, with_metadata: bool = True) -> Dict[str, Any]:
    doc = {
        "version": SCHEMA_VERSION,
        "space": g.space,
        "causal_cell": _encode_cell(g.causal_cell, True),
        "reduction_cell": _encode_cell(g.reduction_cell, False),
    }
    if with_metadata:
        doc["metadata"] = g.metadata.model_dump(mode="json")
    return doc


def encode_genotype(g: Genotype) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline.

    post: parse_genotype(__return__) == g
    """
    return json.dumps(genotype_to_dict(g), sort_keys=True, indent=2) + "\n"


def genotype_hash(g: Genotype) -> str:
    """sha256 over the architecture only (metadata excluded)."""
    text = json.dumps(genotype_to_dict(g, with_metadata=False), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _require(doc: Dict[str, Any], key: str, kind, location: str):
    if key not in doc:
        raise GenotypeParseError(f"missing key {key!r}", location)
    value = doc[key]
    # bool is an int subclass; never accept it where an index is expected
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise GenotypeParseError(f"{key!r} must be {getattr(kind, '__name__', kind)}",
                                 f"{location}.{key}")
    return value


def _parse_cell(doc: Any, cell_type: CellType, space: SearchSpaceSpec, location: str) -> CellSpec:
    if not isinstance(doc, dict):
        raise GenotypeParseError("cell must be an object", location)
    causal = doc.get("causal", cell_type == CellType.CAUSAL)
    if not isinstance(causal, bool):
        raise GenotypeParseError("'causal' must be a boolean", f"{location}.causal")
    raw_edges = _require(doc, "edges", list, location)
    edges = []
    for i, raw in enumerate(raw_edges):
        loc = f"{location}.edges[{i}]"
        if not isinstance(raw, dict):
            raise GenotypeParseError("edge must be an object", loc)
        src = _require(raw, "from", int, loc)
        dst = _require(raw, "to", int, loc)
        name = _require(raw, "op", str, loc)
        if dst not in space.intermediate_nodes:
            raise GenotypeParseError(f"target node {dst} is not an intermediate node", f"{loc}.to")
        if not 0 <= src < space.output_node:
            raise GenotypeParseError(f"source node {src} out of range", f"{loc}.from")
        try:
            op = space.resolve(name, causal)
        except KeyError:
            raise GenotypeParseError(f"unknown operation {name!r}", f"{loc}.op") from None
        edges.append(Edge(src=src, dst=dst, op=op))
    return CellSpec(cell_type=cell_type, edges=tuple(edges))


def parse_genotype(text: Union[str, bytes]) -> Genotype:
    """Read genotype JSON (schema v1)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GenotypeParseError(f"invalid JSON: {e.msg} (line {e.lineno}, column {e.colno})")
    if not isinstance(doc, dict):
        raise GenotypeParseError("top level must be an object")
    version = _require(doc, "version", int, "$")
    if version != SCHEMA_VERSION:
        raise GenotypeParseError(f"unsupported schema version {version}", "$.version")
    space_name = _require(doc, "space", str, "$")
    try:
        space = get_space(space_name)
    except SpaceMismatchError as e:
        raise GenotypeParseError(str(e), "$.space") from None
    causal_cell = _parse_cell(doc.get("causal_cell"), CellType.CAUSAL, space, "$.causal_cell")
    reduction_cell = _parse_cell(doc.get("reduction_cell"), CellType.REDUCTION, space,
                                 "$.reduction_cell")
    try:
        metadata = GenotypeMetadata.model_validate(doc.get("metadata") or {})
    except ValueError as e:
        raise GenotypeParseError(str(e), "$.metadata") from None
    return Genotype(space=space.name, causal_cell=causal_cell,
                    reduction_cell=reduction_cell, metadata=metadata)


def build_cell(space: SearchSpaceSpec, cell_type: CellType,
               edges: List[Tuple[int, int, str]], causal: Optional[bool] = None) -> CellSpec:
    """Convenience constructor from (from, to, op-name) triples."""
    if causal is None:
        causal = cell_type == CellType.CAUSAL
    return CellSpec(
        cell_type=cell_type,
        edges=tuple(Edge(src=s, dst=d, op=space.resolve(name, causal)) for s, d, name in edges),
    )


def sample_genotype(space: SearchSpaceSpec, rng: Union[int, np.random.Generator],
                    avg_pool_cap: int = 2) -> Genotype:
    """Uniformly random valid genotype for ``space``.

    Each intermediate node draws ``retain_k`` distinct predecessors and one
    non-zero op per edge. Causal cells redraw until the avg-pool cap holds.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    candidates = [op for op in space.operations if op.family != OpFamily.ZERO]

    def draw(cell_type: CellType) -> CellSpec:
        causal = cell_type == CellType.CAUSAL
        while True:
            edges = []
            for dst in space.intermediate_nodes:
                preds = sorted(rng.choice(dst, size=space.retain_k, replace=False).tolist())
                for src in preds:
                    op = candidates[int(rng.integers(len(candidates)))]
                    edges.append(Edge(src=src, dst=dst, op=op.as_causal(causal)))
            cell = CellSpec(cell_type=cell_type, edges=tuple(edges))
            if not causal or cell.count(OpFamily.AVG_POOL) <= avg_pool_cap:
                return cell

    return Genotype(space=space.name, causal_cell=draw(CellType.CAUSAL),
                    reduction_cell=draw(CellType.REDUCTION))
