"""
Main CLI entry point for modcal.
"""

import click
from rich.console import Console
from rich.table import Table

from modcal import __version__
from modcal.commands.ablate import ablate
from modcal.commands.config import config
from modcal.commands.data import gen_data
from modcal.commands.figures import render
from modcal.commands.inversion import invert, pretrain_fsr
from modcal.commands.source import evaluate, train_source
from modcal.commands.target import train_target
from modcal.config.manager import ConfigManager, parse_overrides
from modcal.core.errors import ConfigurationError
from modcal.utils.output import format_bytes, setup_console
from modcal.utils.system import default_workers, get_system_stats

console = Console()


@click.group()
@click.version_option(version=__version__, prog_name="modcal")
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose output')
@click.option('--config-file', '-c', help='Path to configuration file (default: ./modcal.cfg)')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE', help='Override a configuration key')
@click.option('--run-root', '-r', help='Run root directory (default: $MODCAL_RUN_ROOT or ./runs)')
@click.pass_context
def main(ctx, verbose, config_file, overrides, run_root):
    """
    modcal - modality calibration: train detectors for a new sensor modality
    on top of a pre-trained image detector.

    Examples:
        modcal gen-data
        modcal train-source
        modcal invert && modcal pretrain-fsr
        modcal train-target --mode mac-self
        modcal ablate --seeds 3
    """
    ctx.ensure_object(dict)
    ctx.obj['verbose'] = verbose
    ctx.obj['config_file'] = config_file
    ctx.obj['run_root'] = run_root
    try:
        ctx.obj['overrides'] = parse_overrides(overrides)
    except ConfigurationError as e:
        raise click.UsageError(str(e))

    setup_console(verbose)


# Pipeline stages
main.add_command(gen_data)
main.add_command(train_source)
main.add_command(invert)
main.add_command(pretrain_fsr)
main.add_command(train_target)
main.add_command(evaluate)
main.add_command(ablate)
main.add_command(render)
main.add_command(config)


@main.command()
@click.pass_context
def info(ctx):
    """Show modcal information and host resources."""
    stats = get_system_stats()
    table = Table(title="modcal Information")
    table.add_column("Property", style="cyan")
    table.add_column("Value", style="green")

    table.add_row("Version", __version__)
    table.add_row("Run root", str(ConfigManager.run_root(ctx.obj.get('run_root'))))
    table.add_row("Python", stats.python)
    table.add_row("Torch", f"{stats.torch} ({stats.torch_threads} threads)")
    table.add_row("CPU cores", f"{stats.physical_cores} physical / {stats.logical_cores} logical")
    table.add_row("Memory", f"{format_bytes(stats.memory_available)} free of {format_bytes(stats.memory_total)}")
    table.add_row("Default workers", str(default_workers()))
    table.add_row("Commands", "gen-data, train-source, invert, pretrain-fsr, train-target, eval, ablate, "
                              "render-figures, config")

    console.print(table)


if __name__ == '__main__':
    main()
