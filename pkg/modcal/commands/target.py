"""
Target model training.
"""

import click

from modcal.commands.common import fail, load_config, overwrite_option
from modcal.config.manager import ConfigManager
from modcal.core.errors import ModcalError
from modcal.core.experiment import Pipeline
from modcal.core.mactrain import TrainMode
from modcal.utils.output import create_progress, print_report, print_success


@click.command('train-target')
@click.option('--name', '-n', help='Run name under targets/ (default: the mode)')
@click.option('--mode', '-m', type=click.Choice([m.value for m in TrainMode]),
              help='Shortcut for --set target.mode=...')
@overwrite_option
@click.pass_context
def train_target(ctx, name, mode, overwrite):
    """Train the target model {C | S} on the target modality."""
    try:
        config = load_config(ctx)
        if mode:
            config = config.updated({'target.mode': mode})
        name = name or config['target.mode']
        pipeline = Pipeline(config, ConfigManager.run_root(ctx.obj.get('run_root')))

        with create_progress() as progress:
            task = progress.add_task(f"Training target model '{name}' ({config['target.mode']})...", total=None)
            report = pipeline.train_target(name, overwrite=overwrite)
            progress.update(task, completed=True)

        print_report(f"Target run {name}", report)
        print_success(f"Run written to {pipeline.layout.target(name).path}")
    except ModcalError as e:
        fail(e)
