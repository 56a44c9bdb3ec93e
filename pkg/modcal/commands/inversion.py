"""
Source model inversion and reconstructor pretraining.
"""

import click

from modcal.commands.common import fail, load_pipeline, overwrite_option
from modcal.core.errors import ModcalError
from modcal.utils.output import create_progress, print_report, print_success, print_warning


@click.command('invert')
@overwrite_option
@click.pass_context
def invert(ctx, overwrite):
    """Invert the frozen source detector on random layouts (the J_S corpus)."""
    try:
        pipeline = load_pipeline(ctx)
        total = pipeline.config['inversion.corpus_size']
        with create_progress(total=True) as progress:
            task = progress.add_task("Inverting layouts...", total=total)
            report = pipeline.invert(overwrite=overwrite,
                                     on_progress=lambda done: progress.update(task, completed=done))

        print_report("Inversion corpus", report)
        if report['unconverged']:
            print_warning(f"{len(report['unconverged'])} items ended above inversion.convergence_ceiling")
        print_success(f"Corpus written to {pipeline.layout.stage('inversion').path}")
    except ModcalError as e:
        fail(e)


@click.command('pretrain-fsr')
@overwrite_option
@click.pass_context
def pretrain_fsr(ctx, overwrite):
    """Train the reconstructor R on the J_S corpus."""
    try:
        pipeline = load_pipeline(ctx)
        with create_progress() as progress:
            task = progress.add_task(f"Training reconstructor ({pipeline.config['fsr.iterations']} iterations)...",
                                     total=None)
            report = pipeline.pretrain_fsr(overwrite=overwrite)
            progress.update(task, completed=True)

        print_report("Reconstructor", report)
        if not report['converged']:
            print_warning(f"Held-out L1 {report['heldout_l1']:.4f} is above fsr.threshold {report['threshold']}")
        print_success(f"Reconstructor written to {pipeline.layout.stage('fsr').path}")
    except ModcalError as e:
        fail(e)
