"""
Synthetic dataset generation.
"""

import time

import click

from modcal.commands.common import fail, load_pipeline, overwrite_option
from modcal.core.errors import ModcalError
from modcal.utils.output import create_progress, format_seconds, print_report, print_success
from modcal.utils.system import default_workers


@click.command('gen-data')
@overwrite_option
@click.option('--workers', '-w', type=int, default=None, help='Worker processes (default: run.workers or physical cores)')
@click.pass_context
def gen_data(ctx, overwrite, workers):
    """Generate the paired source/target-modality scenes (train and test splits)."""
    try:
        pipeline = load_pipeline(ctx)
        workers = default_workers(workers if workers is not None else pipeline.config['run.workers'])
        start = time.perf_counter()
        with create_progress() as progress:
            task = progress.add_task("Generating scenes...", total=None)
            report = pipeline.gen_data(
                overwrite=overwrite, workers=workers,
                on_progress=lambda split: progress.update(task, description=f"Generating {split} split..."))
            progress.update(task, completed=True)

        print_report("Dataset", report)
        print_success(f"Dataset written to {pipeline.layout.data('')} in {format_seconds(time.perf_counter() - start)}")
    except ModcalError as e:
        fail(e)
