"""
Configuration management commands.
"""

import click
from rich.table import Table

from modcal.config.manager import DEFAULTS, ConfigManager, format_value, parse_value
from modcal.core.errors import ConfigurationError
from modcal.commands.common import fail
from modcal.utils.output import console, print_error, print_info, print_success, print_warning


def _manager(ctx):
    return ConfigManager(ctx.obj.get('config_file') if ctx.obj else None)


@click.group()
def config():
    """Configuration management."""
    pass


@config.command()
@click.option('--force', '-f', is_flag=True, help='Overwrite existing configuration')
@click.pass_context
def init(ctx, force):
    """Write a configuration file with every key at its default."""
    config_manager = _manager(ctx)

    if config_manager.config_exists() and not force:
        print_warning("Configuration already exists. Use --force to overwrite.")
        return

    config_manager.create_default_config()
    print_success(f"Configuration initialized at: {config_manager.config_path}")


@config.command()
@click.option('--section', '-s', help='Only show one namespace (e.g. target)')
@click.option('--changed', is_flag=True, help='Only show keys that differ from the defaults')
@click.pass_context
def show(ctx, section, changed):
    """Show the effective configuration."""
    config_manager = _manager(ctx)
    try:
        run_config = config_manager.load_config(ctx.obj.get('overrides') if ctx.obj else None)
    except ConfigurationError as e:
        fail(e)

    if config_manager.config_exists():
        print_info(f"Configuration file: {config_manager.config_path}")
    else:
        print_info("No configuration file; showing defaults.")

    table = Table(title="Run Configuration")
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="white")
    table.add_column("Description", style="dim")
    for key, option in DEFAULTS.items():
        if section and not key.startswith(section + "."):
            continue
        value = run_config[key]
        if changed and value == option.default:
            continue
        style = "yellow" if value != option.default else "white"
        table.add_row(key, f"[{style}]{format_value(value)}[/{style}]", option.doc)
    console.print(table)


@config.command()
@click.argument('key')
@click.argument('value')
@click.pass_context
def set(ctx, key, value):
    """Set a configuration value."""
    config_manager = _manager(ctx)
    try:
        stored = config_manager.set_value(key, parse_value(value))
        print_success(f"Set {key} = {format_value(stored)}")
    except ConfigurationError as e:
        fail(e)


@config.command()
@click.argument('key')
@click.pass_context
def get(ctx, key):
    """Get a configuration value."""
    config_manager = _manager(ctx)
    try:
        print_info(f"{key} = {format_value(config_manager.get_value(key))}")
    except ConfigurationError as e:
        fail(e)


@config.command()
@click.pass_context
def path(ctx):
    """Show configuration file path."""
    config_manager = _manager(ctx)
    print_info(f"Configuration file path: {config_manager.config_path}")
    print_info(f"Run root: {ConfigManager.run_root(ctx.obj.get('run_root') if ctx.obj else None)}")


@config.command()
@click.pass_context
def validate(ctx):
    """Validate configuration file."""
    config_manager = _manager(ctx)

    if not config_manager.config_exists():
        print_error("No configuration file found.")
        ctx.exit(1)

    is_valid, errors = config_manager.validate_config()
    if is_valid:
        print_success("Configuration is valid.")
        return
    print_error("Configuration validation failed:")
    for error in errors:
        print_error(f"  - {error}")
    ctx.exit(2)
