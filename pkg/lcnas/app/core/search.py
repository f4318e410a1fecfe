"""Progressive differentiable search: warmup, alternating updates, pruning, discretization."""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..models.config import DropoutCells, DropoutSchedule, SearchConfig, StageConfig, ToolkitConfig
from ..models.genotype import (
    CellSpec, CellType, Edge, Genotype, GenotypeMetadata, StageRecord, encode_genotype,
)
from ..models.manifest import RunRecord, SearchResult, SearchRun, SelectionRecord
from ..models.operations import OpFamily
from ..models.plan import build_macro_plan
from ..models.search_space import CandidateSet, SearchSpaceSpec, get_space
from ..utils.validation import require_valid
from .data import IGNORE_INDEX, Batch, Dataset, iterate_batches, split_for_search
from .engine import seed_everything
from .latency import network_latency
from .network import AlphaParams, SuperNet, build_supernet

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "phase", "train_loss", "val_loss", "val_acc")
RULE_BEST_WITHIN_BUDGET = "best-val-within-budget"
RULE_LOWEST_LATENCY = "lowest-latency"

AlphaLike = Union[AlphaParams, Mapping]


class SearchAbort(RuntimeError):
    """A search stage cannot continue; ``stage`` is 1-based when known."""

    def __init__(self, message: str, stage: Optional[int] = None,
                 diagnostics: Optional[Dict] = None):
        prefix = f"stage {stage}: " if stage is not None else ""
        super().__init__(prefix + message)
        self.message = message
        self.stage = stage
        self.diagnostics = diagnostics or {}


# -- losses --------------------------------------------------------------------------

def frame_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
                           ignore_index=IGNORE_INDEX)


def frame_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> Tuple[int, int]:
    """(correct, counted) over non-padding frames."""
    keep = labels != IGNORE_INDEX
    correct = (logits.argmax(dim=-1) == labels) & keep
    return int(correct.sum()), int(keep.sum())


def _require_finite(loss: torch.Tensor, net: SuperNet, stage: Optional[int], what: str):
    if torch.isfinite(loss).all():
        return
    diagnostics = {
        "loss": float(loss.detach()),
        "alpha_abs_max": max(float(a.detach().abs().max()) for a in net.arch_parameters()),
        "op_dropout": net.op_dropout,
    }
    raise SearchAbort(f"non-finite {what} loss", stage, diagnostics)


# -- steps ---------------------------------------------------------------------------

def warmup_step(net: SuperNet, batch: Batch, w_opt: torch.optim.Optimizer,
                grad_clip: float = 5.0, stage: Optional[int] = None) -> float:
    """One weight update on the training loss with the alphas frozen."""
    net.train()
    alphas = net.arch_parameters()
    for a in alphas:
        a.requires_grad_(False)
    try:
        w_opt.zero_grad()
        loss = frame_loss(net(batch.features), batch.labels)
        _require_finite(loss, net, stage, "training")
        loss.backward()
        nn.utils.clip_grad_norm_(net.weight_parameters(), grad_clip)
        w_opt.step()
    finally:
        for a in alphas:
            a.requires_grad_(True)
    return float(loss.detach())


def alternate_step(net: SuperNet, train_batch: Batch, val_batch: Batch,
                   w_opt: torch.optim.Optimizer, a_opt: torch.optim.Optimizer,
                   grad_clip: float = 5.0, update_alpha: bool = True,
                   stage: Optional[int] = None) -> Tuple[float, float]:
    """First-order alternation: alpha step on the validation batch, then a weight step.

    Returns (training loss, validation loss); the latter is NaN when
    ``update_alpha`` is off.
    """
    val_loss = float("nan")
    if update_alpha:
        net.train()
        a_opt.zero_grad()
        loss = frame_loss(net(val_batch.features), val_batch.labels)
        _require_finite(loss, net, stage, "validation")
        loss.backward()
        a_opt.step()
        val_loss = float(loss.detach())
    train_loss = warmup_step(net, train_batch, w_opt, grad_clip, stage)
    return train_loss, val_loss


def weight_optimizer(net: SuperNet, cfg: SearchConfig, epochs: int):
    opt = torch.optim.SGD(net.weight_parameters(), lr=cfg.weight_lr,
                          momentum=cfg.weight_momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs, 1),
                                                       eta_min=cfg.weight_lr_min)
    return opt, sched


def arch_optimizer(net: SuperNet, cfg: SearchConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.arch_parameters(), lr=cfg.arch_lr, betas=(0.5, 0.999),
                            weight_decay=cfg.arch_weight_decay)


def stage_dropout(p: float, epoch: int, epochs: int,
                  schedule: DropoutSchedule = DropoutSchedule.LINEAR) -> float:
    """Dropout rate on regularized candidates for ``epoch`` (0-based) of a stage.

    The linear schedule starts at ``p`` and loses ``p / epochs`` per epoch.
    """
    if schedule == DropoutSchedule.CONSTANT or epochs <= 0:
        return p
    return p * max(epochs - epoch, 0) / epochs


# -- alpha bookkeeping ---------------------------------------------------------------

def _alpha_rows(alphas: AlphaLike, cell_type: CellType) -> torch.Tensor:
    if isinstance(alphas, AlphaParams):
        rows = alphas.row_matrix(cell_type)
    elif cell_type in alphas:
        rows = alphas[cell_type]
    else:
        rows = alphas[cell_type.value]
    return torch.as_tensor(rows).detach().to(torch.float64)


def _ranked(weights: Sequence[float], positions: Sequence[int]) -> List[int]:
    """Positions by descending weight, lower position first on ties."""
    return sorted(positions, key=lambda i: (-weights[i], i))


def prune_operations(alphas: AlphaLike, candidates: CandidateSet, space: SearchSpaceSpec,
                     keep: int) -> Tuple[CandidateSet, AlphaParams]:
    """Keep the ``keep`` strongest non-zero candidates per edge; alphas restart at zero.

    The zero op is not ranked: it survives on every edge that still carries
    it, on top of the ``keep`` others. Survivors stay in space order.
    """
    width = candidates.ops_per_edge
    if keep < 1:
        raise ValueError(f"keep={keep}: at least one op per edge must survive")
    reduced = {}
    for cell_type in (CellType.CAUSAL, CellType.REDUCTION):
        weights = F.softmax(_alpha_rows(alphas, cell_type), dim=-1).tolist()
        rows = []
        for w, row in zip(weights, candidates.rows(cell_type.value)):
            zero = [i for i in range(width) if space.operations[row[i]].family == OpFamily.ZERO]
            nonzero = [i for i in range(width) if i not in zero]
            if keep > len(nonzero):
                raise ValueError(f"keep={keep} exceeds the {len(nonzero)} non-zero candidates per edge")
            survivors = sorted(zero + _ranked(w, nonzero)[:keep])
            rows.append(tuple(row[i] for i in survivors))
        reduced[cell_type.value] = tuple(rows)
    pruned = CandidateSet(causal=reduced["causal"], reduction=reduced["reduction"])
    return pruned, AlphaParams(space.edge_count, pruned.ops_per_edge, random_init=False)


def _best_nonzero(weights: Sequence[float], row: Sequence[int], space: SearchSpaceSpec,
                  exclude: Sequence[OpFamily] = ()) -> Optional[int]:
    allowed = [i for i, op_index in enumerate(row)
               if space.operations[op_index].family not in (OpFamily.ZERO, *exclude)]
    ranked = _ranked(weights, allowed)
    return ranked[0] if ranked else None


def discretize(alphas: AlphaLike, space: SearchSpaceSpec, candidates: Optional[CandidateSet] = None,
               retain_k: Optional[int] = None) -> Genotype:
    """Per intermediate node keep the ``retain_k`` incoming edges whose best non-zero
    op is strongest; ties go to the lower edge index, then the lower op index."""
    candidates = candidates or CandidateSet.full(space)
    retain_k = retain_k or space.retain_k
    cells = {}
    for cell_type in (CellType.CAUSAL, CellType.REDUCTION):
        weights = F.softmax(_alpha_rows(alphas, cell_type), dim=-1).tolist()
        rows = candidates.rows(cell_type.value)
        causal = cell_type == CellType.CAUSAL
        edges = []
        for dst in space.intermediate_nodes:
            scored = []
            for src in range(dst):
                e = space.edge_index(src, dst)
                best = _best_nonzero(weights[e], rows[e], space)
                if best is not None:
                    scored.append((-weights[e][best], e, src, rows[e][best]))
            for _, _, src, op_index in sorted(scored)[:retain_k]:
                edges.append(Edge(src=src, dst=dst, op=space.operations[op_index].as_causal(causal)))
        edges.sort(key=lambda e: (e.dst, e.src))
        cells[cell_type] = CellSpec(cell_type=cell_type, edges=tuple(edges))
    return Genotype(space=space.name, causal_cell=cells[CellType.CAUSAL],
                    reduction_cell=cells[CellType.REDUCTION])


def enforce_pool_cap(g: Genotype, alphas: AlphaLike, space: SearchSpaceSpec,
                     candidates: Optional[CandidateSet] = None, cap: int = 2) -> Genotype:
    """Replace the weakest avg-pool edges of the causal cell until at most ``cap`` remain.

    The replacement is the edge's next-strongest non-zero, non-avg-pool
    candidate, or the first such op of the space if pruning removed them all.
    """
    candidates = candidates or CandidateSet.full(space)
    cell = g.causal_cell
    if cell.count(OpFamily.AVG_POOL) <= cap:
        return g
    weights = F.softmax(_alpha_rows(alphas, CellType.CAUSAL), dim=-1).tolist()
    rows = candidates.rows(CellType.CAUSAL.value)
    edges = list(cell.edges)

    def pool_weight(i):
        e = space.edge_index(edges[i].src, edges[i].dst)
        pos = [p for p, op_index in enumerate(rows[e])
               if space.operations[op_index].family == OpFamily.AVG_POOL]
        return max((weights[e][p] for p in pos), default=0.0), e

    fallback = next(op for op in space.operations
                    if op.family not in (OpFamily.ZERO, OpFamily.AVG_POOL))
    while sum(1 for e in edges if e.op.family == OpFamily.AVG_POOL) > cap:
        pools = [i for i, e in enumerate(edges) if e.op.family == OpFamily.AVG_POOL]
        weakest = min(pools, key=pool_weight)
        e = space.edge_index(edges[weakest].src, edges[weakest].dst)
        best = _best_nonzero(weights[e], rows[e], space, exclude=(OpFamily.AVG_POOL,))
        op = space.operations[rows[e][best]] if best is not None else fallback
        edges[weakest] = edges[weakest].model_copy(update={"op": op.as_causal(True)})
        logger.info("Avg-pool cap: edge %d->%d now %s", edges[weakest].src, edges[weakest].dst,
                    op.name)
    return g.model_copy(update={"causal_cell": CellSpec(cell_type=CellType.CAUSAL, edges=tuple(edges))})


# -- stages and runs -----------------------------------------------------------------

class MetricsWriter:
    """Appends epoch rows to ``metrics.csv`` (or only keeps them in memory)."""

    def __init__(self, path: Optional[Path] = None):
        self.path = path
        self.rows: List[Tuple] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def write(self, epoch: int, phase: str, train_loss: float, val_loss: float, val_acc: float):
        row = (epoch, phase, f"{train_loss:.6f}", f"{val_loss:.6f}", f"{val_acc:.6f}")
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(row)


def evaluate(net: nn.Module, dataset: Dataset, batch_size: int) -> Tuple[float, float]:
    """(mean frame loss, frame accuracy) in inference mode."""
    net.eval()
    loss_sum, correct, total = 0.0, 0, 0
    with torch.no_grad():
        for batch in iterate_batches(dataset, batch_size):
            logits = net(batch.features)
            c, n = frame_accuracy(logits, batch.labels)
            if n:
                loss_sum += float(frame_loss(logits, batch.labels)) * n
            correct += c
            total += n
    if total == 0:
        return float("nan"), 0.0
    return loss_sum / total, correct / total


def _endless(dataset: Dataset, batch_size: int, seed: int) -> Iterator[Batch]:
    epoch = 0
    while True:
        yield from iterate_batches(dataset, batch_size, seed=seed + epoch)
        epoch += 1


def run_stage(net: SuperNet, stage: StageConfig, index: int, splits: Tuple[Dataset, Dataset, Dataset],
              cfg: SearchConfig, metrics: MetricsWriter, seed: int) -> float:
    """Train one stage; returns the final validation accuracy of the super-network."""
    weight_set, alpha_set, val_set = splits
    w_opt, sched = weight_optimizer(net, cfg, stage.epochs)
    a_opt = arch_optimizer(net, cfg)
    alpha_batches = _endless(alpha_set, stage.batch_size, seed * 7919 + index * 101)
    val_acc = 0.0
    if stage.epochs == 0:
        _, val_acc = evaluate(net, val_set, stage.batch_size)
    for epoch in range(stage.epochs):
        net.op_dropout = stage_dropout(stage.dropout, epoch, stage.epochs, cfg.dropout_schedule)
        joint = epoch >= stage.warmup_epochs
        phase = f"s{index}-{'joint' if joint else 'warmup'}"
        losses = []
        try:
            for batch in iterate_batches(weight_set, stage.batch_size, seed=seed * 1009 + epoch):
                if joint:
                    loss, _ = alternate_step(net, batch, next(alpha_batches), w_opt, a_opt,
                                             cfg.grad_clip, stage=index)
                else:
                    loss = warmup_step(net, batch, w_opt, cfg.grad_clip, stage=index)
                losses.append(loss)
        except SearchAbort as e:
            if e.stage is None:
                raise SearchAbort(e.message, index, e.diagnostics) from e
            raise
        sched.step()
        val_loss, val_acc = evaluate(net, val_set, stage.batch_size)
        train_loss = sum(losses) / len(losses) if losses else float("nan")
        metrics.write(epoch, phase, train_loss, val_loss, val_acc)
        logger.info("Stage %d Epoch %d %s train_loss %.4f val_loss %.4f val_acc %.4f dropout %.3f",
                    index, epoch, phase, train_loss, val_loss, val_acc, net.op_dropout)
    return val_acc


def run_id_for(seed: int, setting: Sequence[float]) -> str:
    return f"seed-{seed}_drop-" + "-".join(f"{p:.2f}" for p in setting)


def _dropout_cell_types(choice: DropoutCells) -> Tuple[CellType, ...]:
    if choice == DropoutCells.CAUSAL:
        return (CellType.CAUSAL,)
    if choice == DropoutCells.REDUCTION:
        return (CellType.REDUCTION,)
    return (CellType.CAUSAL, CellType.REDUCTION)


def _candidate_names(space: SearchSpaceSpec, candidates: CandidateSet) -> Dict[str, List[List[str]]]:
    return {cell: [[space.operations[i].name for i in row] for row in candidates.rows(cell)]
            for cell in (CellType.CAUSAL.value, CellType.REDUCTION.value)}


def run_single(cfg: ToolkitConfig, splits: Tuple[Dataset, Dataset, Dataset], seed: int,
               setting: Sequence[float], run_dir: Optional[Path] = None) -> SearchRun:
    """All stages for one (seed, dropout setting); writes artifacts under ``run_dir``."""
    seed_everything(seed)
    space = get_space(cfg.search.space)
    classes = splits[0].classes
    run_id = run_id_for(seed, setting)
    metrics = MetricsWriter(run_dir / "metrics.csv" if run_dir else None)
    candidates = CandidateSet.full(space)
    stages = cfg.stages_for(tuple(setting))
    net: Optional[SuperNet] = None
    history, alphas = [], {}
    val_acc = 0.0
    for index, stage in enumerate(stages, start=1):
        if net is not None:
            # ops_kept counts the edge width, zero included
            zero_ops = sum(op.family == OpFamily.ZERO for op in space.operations)
            candidates, _ = prune_operations(net.alphas, candidates, space, stage.ops_kept - zero_ops)
            logger.info("Stage %d: pruned to %d ops per edge", index, candidates.ops_per_edge)
        net = build_supernet(space, stage.depth, cfg.search.channels, classes, candidates,
                             hidden=cfg.network.hidden, causal_stem=cfg.network.causal_stem,
                             random_alpha_init=index == 1,
                             dropout_cells=_dropout_cell_types(cfg.search.dropout_cells))
        val_acc = run_stage(net, stage, index, splits, cfg.search, metrics, seed)
        alphas[f"stage{index}"] = net.alphas.as_dict()
        history.append(StageRecord(stage=index, depth=stage.depth, ops_kept=stage.ops_kept,
                                   dropout=stage.dropout))
        if run_dir:
            doc = {"alphas": net.alphas.as_dict(), "candidates": _candidate_names(space, candidates)}
            (run_dir / f"alphas_stage{index}.json").write_text(
                json.dumps(doc, sort_keys=True, indent=2) + "\n")

    g = net.genotype(cfg.search.avg_pool_cap)
    g = g.model_copy(update={"metadata": GenotypeMetadata(seed=seed, stages=tuple(history),
                                                          label=run_id)})
    require_valid(g, space)
    plan = build_macro_plan(cfg.network.cells, cfg.network.channels, classes=classes,
                            causal_stem=cfg.network.causal_stem, hidden=cfg.network.hidden,
                            frame_period_in=cfg.network.frame_period_ms)
    latency = network_latency(plan, g, space, splits[0].feature_lookahead_frames)
    if run_dir:
        (run_dir / "genotype.json").write_text(encode_genotype(g))
        (run_dir / "latency.json").write_text(latency.to_json())
    record = RunRecord(run_id=run_id, seed=seed, dropout=tuple(setting),
                       genotype_hash=latency.genotype_hash, val_accuracy=val_acc,
                       latency_ms=latency.total_ms,
                       within_budget=latency.total_ms <= cfg.search.latency_budget_ms)
    logger.info("Run %s: genotype %s, val_acc %.4f, latency %gms", run_id,
                record.genotype_hash[:12], val_acc, latency.total_ms)
    return SearchRun(record=record, genotype=g, latency=latency, alphas=alphas,
                     run_dir=str(run_dir) if run_dir else None)


def select_run(records: Sequence[RunRecord], budget_ms: float) -> SelectionRecord:
    """Best validation accuracy within the latency budget, else the lowest latency.

    Ties go to the earlier run.
    """
    order = {r.run_id: i for i, r in enumerate(records)}
    within = [r for r in records if r.within_budget]
    if within:
        best = min(within, key=lambda r: (-r.val_accuracy, order[r.run_id]))
        rule = RULE_BEST_WITHIN_BUDGET
    else:
        best = min(records, key=lambda r: (r.latency_ms, order[r.run_id]))
        rule = RULE_LOWEST_LATENCY
    return SelectionRecord(rule=rule, budget_ms=budget_ms, selected=best.run_id,
                           candidates=tuple(records))


def run_search(cfg: ToolkitConfig, dataset: Dataset, out_dir: Optional[Path] = None) -> SearchResult:
    """Every dropout setting x seed, then the selection over all runs."""
    splits = split_for_search(dataset, cfg.data.split_seed, cfg.data.holdout)
    logger.info("Search splits: %d weight / %d alpha / %d validation utterances",
                *(len(s) for s in splits))
    runs = []
    for setting in cfg.search.dropout_settings:
        for seed in cfg.search.seeds:
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / "runs" / run_id_for(seed, setting)
                run_dir.mkdir(parents=True, exist_ok=True)
            runs.append(run_single(cfg, splits, seed, setting, run_dir))
    selection = select_run([r.record for r in runs], cfg.search.latency_budget_ms)
    result = SearchResult(runs=tuple(runs), selection=selection)
    if out_dir is not None:
        out_dir = Path(out_dir)
        chosen = result.selected
        (out_dir / "genotype.json").write_text(encode_genotype(chosen.genotype))
        (out_dir / "latency.json").write_text(chosen.latency.to_json())
        (out_dir / "selection.json").write_text(selection.to_json())
    logger.info("Selected %s by %s", selection.selected, selection.rule)
    return result
