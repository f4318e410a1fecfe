import logging
from pathlib import Path
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

# "lcnas.app" under the test suite, "app" when run from main.py
PACKAGE_LOGGER = __name__.rsplit(".utils", 1)[0]
FILE_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"

# all command output goes to stderr so stdout stays parseable
console = Console(stderr=True)


def configure_logging(run_dir: Optional[Path] = None, verbose: bool = False) -> None:
    """Console handler always; ``run.log`` as well once a run directory exists."""
    root = logging.getLogger(PACKAGE_LOGGER)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    rich_handler = RichHandler(console=console, show_path=False, rich_tracebacks=False)
    rich_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(rich_handler)

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        file_handler.setLevel(logging.DEBUG)
        root.addHandler(file_handler)
    root.propagate = False
