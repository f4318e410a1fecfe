"""Command-line surface: search, latency, verify, train-eval, gen-data, dump-config."""
import contextlib
import logging
from pathlib import Path
from typing import Annotated, Dict, Iterator, List, Optional

import typer
from rich import box
from rich.table import Table

from ..core.search import SearchAbort
from ..core.verifier import ProbeError
from ..models.config import ConfigError, SyntheticTaskConfig, ToolkitConfig, dump_config, load_config
from ..models.genotype import GenotypeParseError, GenotypeStructureError
from ..models.plan import PlanError
from ..models.search_space import SpaceMismatchError, eval_preset
from ..services.analysis_service import AnalysisService
from ..services.data_service import DataService, DatasetMissing
from ..services.search_service import SearchService
from ..services.train_service import TrainService
from ..utils.log import configure_logging, console
from ..utils.repro import sha256_file, write_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_ABORT = 3

app = typer.Typer(
    name="lcnas",
    help="Latency-controlled architecture search for streaming acoustic models",
    add_completion=False,
    rich_markup_mode="rich",
)


@contextlib.contextmanager
def exit_codes() -> Iterator[None]:
    """Map domain errors to the documented exit codes."""
    try:
        yield
    except (ConfigError, DatasetMissing, GenotypeParseError, PlanError, SpaceMismatchError) as e:
        console.print(f"[bold red]error:[/bold red] {e}")
        raise typer.Exit(EXIT_USAGE) from None
    except GenotypeStructureError as e:
        console.print(f"[bold red]invalid genotype:[/bold red] {e}")
        raise typer.Exit(EXIT_FAILED) from None
    except SearchAbort as e:
        console.print(f"[bold red]search aborted at stage {e.stage}:[/bold red] {e.message}")
        for key, value in e.diagnostics.items():
            console.print(f"  {key}: {value}")
        raise typer.Exit(EXIT_ABORT) from None
    except ProbeError as e:
        console.print(f"[bold red]probe error:[/bold red] {e}")
        raise typer.Exit(EXIT_ABORT) from None


def _overrides(**sections: Dict[str, object]) -> Dict[str, Dict[str, object]]:
    return {name: {k: v for k, v in values.items() if v is not None}
            for name, values in sections.items()}


def _resolve_shape(genotype_space: str, cells: Optional[int], channels: Optional[int],
                   preset: Optional[str], cfg: ToolkitConfig):
    if preset:
        try:
            return eval_preset(preset, genotype_space)
        except KeyError:
            raise ConfigError(f"unknown preset {preset!r}", "preset") from None
    return cells or cfg.network.cells, channels or cfg.network.channels


ConfigOption = Annotated[Optional[Path], typer.Option("--config", "-c", help="INI configuration file")]
VerboseOption = Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging")]


@app.command()
def search(
    config: ConfigOption = None,
    out: Annotated[Path, typer.Option("--out", "-o", help="Run directory")] = Path("runs/search"),
    seeds: Annotated[Optional[str], typer.Option(help="Comma separated seeds, e.g. 1,2,3")] = None,
    space: Annotated[Optional[str], typer.Option(help="low_latency or medium_latency")] = None,
    budget: Annotated[Optional[float], typer.Option(help="Latency budget in ms for selection")] = None,
    verbose: VerboseOption = False,
):
    """Run the progressive search for every seed and dropout setting"""
    with exit_codes():
        cfg = load_config(config, _overrides(search={"seeds": seeds, "space": space,
                                                     "latency_budget_ms": budget}))
        configure_logging(out, verbose)
        result = SearchService.run(cfg, out)

    table = Table(title="Search runs", box=box.ROUNDED, header_style="bold magenta")
    for column in ("run", "genotype", "val acc", "latency (ms)", "in budget"):
        table.add_column(column)
    for run in result.runs:
        r = run.record
        marker = " *" if r.run_id == result.selection.selected else ""
        table.add_row(r.run_id + marker, r.genotype_hash[:12], f"{r.val_accuracy:.4f}",
                      f"{r.latency_ms:g}", "yes" if r.within_budget else "no")
    console.print(table)
    console.print(f"selected [bold]{result.selection.selected}[/bold] by {result.selection.rule}")


@app.command()
def latency(
    genotype: Annotated[Path, typer.Option("--genotype", "-g", help="Genotype JSON")],
    cells: Annotated[Optional[int], typer.Option(help="Cells L in the evaluation network")] = None,
    channels: Annotated[Optional[int], typer.Option(help="Initial channels C")] = None,
    preset: Annotated[Optional[str], typer.Option(help="small, medium or large (L, C) preset")] = None,
    causal_stem: Annotated[bool, typer.Option("--causal-stem", help="Left-only stem padding")] = False,
    symmetric_deltas: Annotated[bool, typer.Option(
        "--symmetric-deltas", help="Add the 2-frame lookahead of symmetric delta features")] = False,
    report: Annotated[Optional[Path], typer.Option(help="Write the JSON report here")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", "-o", help="Run directory")] = None,
    config: ConfigOption = None,
    verbose: VerboseOption = False,
):
    """Static algorithmic latency of a genotype"""
    with exit_codes():
        cfg = load_config(config)
        configure_logging(out, verbose)
        g = AnalysisService.load_genotype(genotype)
        L, C = _resolve_shape(g.space, cells, channels, preset, cfg)
        result = AnalysisService.latency(g, L, C, causal_stem or cfg.network.causal_stem,
                                         cfg.network.frame_period_ms, symmetric_deltas)
    typer.echo(result.summary())
    if report:
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(result.to_json())
    if out:
        (out / "latency.json").write_text(result.to_json())
        write_manifest(out, "latency", dump_config(cfg), inputs={"genotype": sha256_file(genotype)},
                       extra={"total_ms": result.total_ms})


@app.command()
def verify(
    genotype: Annotated[Optional[Path], typer.Option("--genotype", "-g", help="Genotype JSON")] = None,
    cells: Annotated[Optional[int], typer.Option(help="Cells L")] = None,
    channels: Annotated[Optional[int], typer.Option(help="Initial channels C")] = None,
    trials: Annotated[Optional[int], typer.Option(help="Random trials per horizon")] = None,
    random: Annotated[int, typer.Option("--random", help="Certify N random genotypes instead")] = 0,
    space: Annotated[str, typer.Option(help="Preset for --random")] = "low_latency",
    causal_stem: Annotated[bool, typer.Option("--causal-stem")] = False,
    out: Annotated[Optional[Path], typer.Option("--out", "-o", help="Run directory")] = None,
    config: ConfigOption = None,
    verbose: VerboseOption = False,
):
    """Measure lookahead by perturbation and compare with the static claim"""
    with exit_codes():
        cfg = load_config(config, _overrides(verify={"trials": trials}))
        configure_logging(out, verbose)
        L, C = cells or cfg.network.cells, channels or cfg.network.channels
        stem = causal_stem or cfg.network.causal_stem
        if random:
            results = AnalysisService.verify_random(space, random, L, C, cfg.verify, stem)
            probes = [p for _, p in results]
        else:
            if genotype is None:
                raise ConfigError("either --genotype or --random is required", "verify")
            g = AnalysisService.load_genotype(genotype)
            _, probe = AnalysisService.verify(g, L, C, cfg.verify, stem)
            probes = [probe]

    for probe in probes:
        typer.echo(probe.summary())
        for note in probe.notes:
            typer.echo(f"  {note}")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        for i, probe in enumerate(probes):
            name = "probe.json" if len(probes) == 1 else f"probe-{i:03d}.json"
            (out / name).write_text(probe.to_json())
        write_manifest(out, "verify", dump_config(cfg), seeds=[cfg.verify.seed],
                       extra={"passed": sum(p.passed for p in probes), "total": len(probes)})
    if not all(p.passed for p in probes):
        raise typer.Exit(EXIT_FAILED)


@app.command("train-eval")
def train_eval(
    genotype: Annotated[Optional[Path], typer.Option("--genotype", "-g", help="Genotype JSON")] = None,
    cells: Annotated[Optional[int], typer.Option(help="Cells L")] = None,
    channels: Annotated[Optional[int], typer.Option(help="Initial channels C")] = None,
    epochs: Annotated[Optional[int], typer.Option(help="Total training epochs")] = None,
    data: Annotated[Optional[Path], typer.Option(help="Feature file (default: synthetic)")] = None,
    out: Annotated[Path, typer.Option("--out", "-o", help="Run directory")] = Path("runs/train"),
    resume: Annotated[Optional[Path], typer.Option(help="Continue the run in this directory")] = None,
    space: Annotated[Optional[str], typer.Option(help="Reject genotypes from any other search space")] = None,
    config: ConfigOption = None,
    verbose: VerboseOption = False,
):
    """Train an evaluation network built from a genotype"""
    with exit_codes():
        run_dir = resume or out
        if genotype is None:
            genotype = run_dir / "genotype.json" if resume else None
        if genotype is None:
            raise ConfigError("--genotype is required unless --resume is given", "train-eval")
        data_keys = {"source": "path", "path": str(data)} if data else {}
        cfg = load_config(config, _overrides(network={"cells": cells, "channels": channels},
                                             train={"epochs": epochs}, data=data_keys))
        configure_logging(run_dir, verbose)
        g = AnalysisService.load_genotype(genotype)
        rows = TrainService.train_eval(g, cfg, run_dir, resume=resume is not None,
                                       expected_space=space)
    if rows:
        typer.echo(f"epoch {rows[-1][0]}: val_acc {rows[-1][4]}")


@app.command("gen-data")
def gen_data(
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory")],
    classes: Annotated[int, typer.Option(help="Number of classes K")] = 8,
    past: Annotated[int, typer.Option(help="Past window W in frames")] = 4,
    future: Annotated[int, typer.Option(help="Future window F in frames")] = 0,
    utts: Annotated[int, typer.Option(help="Number of utterances")] = 1000,
    frames: Annotated[int, typer.Option(help="Frames per utterance")] = 128,
    seed: Annotated[int, typer.Option(help="Generator seed")] = 0,
    verbose: VerboseOption = False,
):
    """Generate a synthetic streaming dataset"""
    with exit_codes():
        try:
            synthetic = SyntheticTaskConfig(classes=classes, past_window=past, future_window=future,
                                            utterances=utts, min_frames=frames, max_frames=frames,
                                            seed=seed)
        except ValueError as e:
            raise ConfigError(str(e), "gen-data") from None
        configure_logging(out, verbose)
        path = DataService.generate(synthetic, out)
    typer.echo(str(path))


@app.command("dump-config")
def dump_config_cmd(config: ConfigOption = None):
    """Print the fully resolved configuration"""
    with exit_codes():
        cfg = load_config(config)
    typer.echo(dump_config(cfg), nl=False)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        code = app(args=argv, standalone_mode=False)
    except typer.Exit as e:
        return e.exit_code
    except Exception as e:  # click usage errors
        code = getattr(e, "exit_code", EXIT_ABORT)
        if hasattr(e, "show"):
            e.show()
        return code if code is not None else EXIT_USAGE
    return code if isinstance(code, int) else EXIT_OK
