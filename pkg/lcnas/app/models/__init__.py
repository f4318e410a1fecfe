from .operations import OperationKind, OpFamily
from .search_space import SearchSpaceSpec, CandidateSet, SpaceMismatchError, get_space
from .genotype import (
    CellType, Edge, CellSpec, Genotype, GenotypeParseError, GenotypeStructureError,
    parse_genotype, encode_genotype, genotype_hash,
)
from .plan import MacroPlan, HeadSpec, PlanError, build_macro_plan
from .reports import ValidationReport, Violation, LatencyReport, ProbeReport, Verdict
from .config import ToolkitConfig, ConfigError, load_config, parse_config, dump_config
