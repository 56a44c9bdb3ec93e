"""
Helpers shared by the pipeline commands.
"""

import sys

import click

from modcal.config.manager import ConfigManager
from modcal.core.errors import ModcalError
from modcal.core.experiment import Pipeline
from modcal.utils.output import print_error

overwrite_option = click.option('--overwrite', is_flag=True, help='Replace a completed stage directory')


def load_config(ctx):
    """RunConfig from the config file plus --set overrides."""
    manager = ConfigManager(ctx.obj.get('config_file'))
    return manager.load_config(ctx.obj.get('overrides'))


def load_pipeline(ctx):
    config = load_config(ctx)
    return Pipeline(config, ConfigManager.run_root(ctx.obj.get('run_root')))


def fail(error: ModcalError):
    """Print the diagnostic and exit with the error's code."""
    print_error(str(error))
    sys.exit(error.exit_code)
