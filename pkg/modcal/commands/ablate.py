"""
The technique ablation ladder.
"""

import click

from modcal.commands.common import fail, load_pipeline, overwrite_option
from modcal.core.errors import ModcalError
from modcal.core.experiment import ResultsTable, ablation_ladder, run_ablation
from modcal.utils.output import console, create_progress, create_table, print_success
from modcal.utils.system import default_workers


def show_results(table: ResultsTable):
    rich_table = create_table("Ablation", [{'name': h, 'style': s} for h, s in zip(
        ResultsTable.HEADERS, ['cyan', 'green', 'green', 'yellow', 'white'])])
    for row in table.rows:
        rich_table.add_row(*row.cells())
    console.print(rich_table)


@click.command('ablate')
@click.option('--seeds', '-s', type=int, default=3, show_default=True, help='Replicates per rung')
@click.option('--alternatives', is_flag=True, help='Add the non-decayed semantic supervision rung')
@click.option('--workers', '-w', type=int, default=None, help='Parallel runs (default: run.workers or physical cores)')
@overwrite_option
@click.pass_context
def ablate(ctx, seeds, alternatives, workers, overwrite):
    """Run every rung of the ladder and tabulate AP (mean ± std over seeds)."""
    try:
        pipeline = load_pipeline(ctx)
        workers = default_workers(workers if workers is not None else pipeline.config['run.workers'])
        rungs = ablation_ladder(alternatives, pipeline.config['target.semi_fraction'])

        with create_progress(total=True) as progress:
            task = progress.add_task("Training ladder...", total=len(rungs) * seeds)
            table = run_ablation(pipeline.config, pipeline.layout.root, replicates=seeds,
                                 alternatives=alternatives, workers=workers, overwrite=overwrite,
                                 on_done=lambda name: progress.advance(task))

        show_results(table)
        print_success(f"Results written to {pipeline.layout.ablation.path / 'results.md'}")
    except ModcalError as e:
        fail(e)
