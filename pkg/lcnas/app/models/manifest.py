import json
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .genotype import Genotype
from .reports import LatencyReport


class RunRecord(BaseModel):
    """Outcome of one (seed, dropout setting) search run."""
    model_config = ConfigDict(frozen=True)

    run_id: str
    seed: int
    dropout: Tuple[float, ...]
    genotype_hash: str
    val_accuracy: float
    latency_ms: float
    within_budget: bool


class SelectionRecord(BaseModel):
    """Which run a search picked and by which rule."""
    model_config = ConfigDict(frozen=True)

    rule: str  # "best-val-within-budget" or "lowest-latency"
    budget_ms: float
    selected: str
    candidates: Tuple[RunRecord, ...]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


class RunManifest(BaseModel):
    """Everything needed to reproduce a run directory."""
    model_config = ConfigDict(frozen=True)

    command: str
    config: str  # resolved INI text
    config_hash: str
    seeds: List[int] = Field(default_factory=list)
    versions: Dict[str, str] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)  # name -> sha256
    outputs: List[str] = Field(default_factory=list)
    timings: Dict[str, float] = Field(default_factory=dict)  # seconds
    extra: Dict[str, Any] = Field(default_factory=dict)
    created_at: datetime = Field(default_factory=datetime.now)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


class SearchRun(BaseModel):
    """Artifacts of one (seed, dropout setting) run."""
    model_config = ConfigDict(frozen=True)

    record: RunRecord
    genotype: Genotype
    latency: LatencyReport
    alphas: Dict[str, Dict[str, List[List[float]]]] = Field(default_factory=dict)
    run_dir: Optional[str] = None


class SearchResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    runs: Tuple[SearchRun, ...]
    selection: SelectionRecord

    @property
    def selected(self) -> SearchRun:
        return next(r for r in self.runs if r.record.run_id == self.selection.selected)
