"""
Figure emission from logged run tensors.
"""

import click

from modcal.commands.common import fail, load_pipeline
from modcal.core.errors import ModcalError, StateError
from modcal.core.figures import render_corpus, render_figures
from modcal.core.inversion import read_corpus
from modcal.utils.output import print_info, print_success, print_warning


@click.command('render-figures')
@click.option('--name', '-n', required=True, help='Target run to render')
@click.option('--samples', type=int, default=None, help='Limit the number of samples')
@click.option('--corpus', type=int, default=0, help='Also render this many J_S corpus items')
@click.pass_context
def render(ctx, name, samples, corpus):
    """Render X, J, gradient, attention-mask and detection panels as PNG."""
    try:
        pipeline = load_pipeline(ctx)
        run_dir = pipeline.layout.target(name)
        if not run_dir.is_complete:
            raise StateError(f"target run {name!r} is not complete; run 'modcal train-target --name {name}'")
        out = pipeline.layout.figures(name)
        report = render_figures(run_dir.path, out, samples)

        if corpus:
            pipeline.layout.require("inversion")
            items = read_corpus(pipeline.layout.stage("inversion") / "corpus")
            report.written += render_corpus(items, out, corpus)

        for sample, panels in sorted(report.skipped.items()):
            print_warning(f"{sample}: skipped {', '.join(panels)} (tensors not logged)")
        print_info(f"{len(report.written)} panels")
        print_success(f"Figures written to {out}")
    except ModcalError as e:
        fail(e)
