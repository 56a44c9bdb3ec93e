"""
Output formatting and console utilities.
"""

import logging

from rich import print as rprint
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

console = Console()


def setup_console(verbose=False):
    """Route library logging through rich on stderr; verbose adds debug records."""
    level = logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger("modcal")
    root.handlers.clear()
    root.addHandler(RichHandler(console=Console(stderr=True), show_path=verbose, rich_tracebacks=True))
    root.setLevel(level)
    root.propagate = False


def print_success(message):
    """Print success message in green."""
    rprint(f"[green]✓[/green] {message}")


def print_error(message):
    """Print error message in red."""
    rprint(f"[red]✗[/red] {message}")


def print_warning(message):
    """Print warning message in yellow."""
    rprint(f"[yellow]⚠[/yellow] {message}")


def print_info(message):
    """Print info message in blue."""
    rprint(f"[blue]ℹ[/blue] {message}")


def create_table(title, columns):
    """Create a rich table with given title and columns."""
    table = Table(title=title)
    for column in columns:
        table.add_column(column['name'], style=column.get('style', 'white'))
    return table


def create_progress(total=False):
    """Create a spinner, or a bar when the amount of work is known."""
    columns = [SpinnerColumn(), TextColumn("[progress.description]{task.description}")]
    if total:
        columns += [BarColumn(), TextColumn("{task.completed}/{task.total}"), TimeElapsedColumn()]
    return Progress(*columns, console=console)


def format_bytes(bytes_value):
    """Format bytes to human readable format."""
    for unit in ['B', 'KB', 'MB', 'GB', 'TB']:
        if bytes_value < 1024.0:
            return f"{bytes_value:.1f} {unit}"
        bytes_value /= 1024.0
    return f"{bytes_value:.1f} PB"


def format_seconds(seconds):
    """Format a duration as 1h 2m, 3m 4s or 5.6s."""
    if seconds >= 3600:
        return f"{int(seconds // 3600)}h {int(seconds % 3600 // 60)}m"
    if seconds >= 60:
        return f"{int(seconds // 60)}m {int(seconds % 60)}s"
    return f"{seconds:.1f}s"


def print_report(title, report):
    """Print a flat key/value table of a stage report, nested dicts flattened with dots."""
    table = create_table(title, [{'name': 'Key', 'style': 'cyan'}, {'name': 'Value', 'style': 'white'}])

    def add(prefix, value):
        if isinstance(value, dict):
            for key, inner in value.items():
                add(f"{prefix}.{key}" if prefix else str(key), inner)
        elif isinstance(value, float):
            table.add_row(prefix, f"{value:.4f}")
        else:
            table.add_row(prefix, str(value))

    add("", report)
    console.print(table)
