"""
Source detector training and evaluation.
"""

import json

import click

from modcal.commands.common import fail, load_pipeline, overwrite_option
from modcal.core.errors import ModcalError
from modcal.utils.output import (
    console, create_progress, create_table, print_info, print_report, print_success,
)


@click.command('train-source')
@overwrite_option
@click.pass_context
def train_source(ctx, overwrite):
    """Train the source detector S on source-modality images."""
    try:
        pipeline = load_pipeline(ctx)
        with create_progress() as progress:
            task = progress.add_task(
                f"Training source detector ({pipeline.config['source.iterations']} iterations)...", total=None)
            report = pipeline.train_source(overwrite=overwrite)
            progress.update(task, completed=True)

        print_report("Source detector", report)
        print_success(f"Source checkpoint written to {pipeline.layout.stage('source').path}")
    except ModcalError as e:
        fail(e)


@click.command('eval')
@click.option('--name', '-n', help='Target run to evaluate on the target modality')
@click.option('--source', 'source_only', is_flag=True, help='Evaluate S on source images instead')
@click.pass_context
def evaluate(ctx, name, source_only):
    """Score a target run (or the source model) on the test split."""
    if not name and not source_only:
        raise click.UsageError("give --name RUN or --source")
    try:
        pipeline = load_pipeline(ctx)
        label = "source" if source_only else name
        result = pipeline.evaluate_source() if source_only else pipeline.evaluate_target(name)

        table = create_table(f"Evaluation: {label}", [
            {'name': 'IoU', 'style': 'cyan'}, {'name': 'AP', 'style': 'green'}])
        table.add_row("0.50", f"{result.ap50 * 100:.2f}")
        table.add_row("0.50:0.95", f"{result.ap * 100:.2f}")
        for class_id, ap in result.per_class.items():
            table.add_row(f"class {class_id}", f"{ap * 100:.2f}")
        console.print(table)

        out = pipeline.layout.root / "eval"
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{label}.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
        print_info(f"Report written to {out / (label + '.json')}")
    except ModcalError as e:
        fail(e)
