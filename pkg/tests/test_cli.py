"""
Test CLI functionality.
"""

import json

from click.testing import CliRunner

from modcal.cli import main
from modcal.core.synthdata import dataset_checksum

from tests.conftest import tiny_args


def _flat(output):
    """Undo rich's line wrapping."""
    return " ".join(output.split())


def _invoke(tmp_path, *args):
    runner = CliRunner()
    base = ['-c', str(tmp_path / 'modcal.cfg'), '-r', str(tmp_path / 'runs')] + tiny_args()
    return runner.invoke(main, base + list(args))


def test_cli_help():
    """Test CLI help command."""
    runner = CliRunner()
    result = runner.invoke(main, ['--help'])
    assert result.exit_code == 0
    assert 'modality calibration' in result.output


def test_cli_version():
    """Test CLI version command."""
    runner = CliRunner()
    result = runner.invoke(main, ['--version'])
    assert result.exit_code == 0
    assert '0.1.0' in result.output


def test_cli_info():
    """Test CLI info command."""
    runner = CliRunner()
    result = runner.invoke(main, ['info'])
    assert result.exit_code == 0
    assert 'modcal Information' in result.output


def test_stage_commands_have_help():
    """Every pipeline stage documents itself."""
    runner = CliRunner()
    for command in ['gen-data', 'train-source', 'invert', 'pretrain-fsr', 'train-target', 'eval', 'ablate',
                    'render-figures', 'config']:
        result = runner.invoke(main, [command, '--help'])
        assert result.exit_code == 0, command


def test_unknown_config_key_is_a_usage_error(tmp_path):
    """Test --set with a key nobody defines."""
    runner = CliRunner()
    result = runner.invoke(main, ['-r', str(tmp_path), '--set', 'detector.depth=3', 'gen-data'])
    assert result.exit_code == 2
    assert 'Unknown configuration key' in _flat(result.output)


def test_gen_data_twice_gives_identical_checksums(tmp_path):
    """Test gen-data determinism across --overwrite."""
    first = _invoke(tmp_path, 'gen-data', '--workers', '1')
    assert first.exit_code == 0, first.output
    checksums = [dataset_checksum(tmp_path / 'runs' / 'data' / split) for split in ('train', 'test')]

    again = _invoke(tmp_path, 'gen-data', '--workers', '1')
    assert again.exit_code != 0
    assert '--overwrite' in _flat(again.output)

    second = _invoke(tmp_path, 'gen-data', '--workers', '1', '--overwrite')
    assert second.exit_code == 0, second.output
    assert checksums == [dataset_checksum(tmp_path / 'runs' / 'data' / split) for split in ('train', 'test')]


def test_train_target_before_train_source(tmp_path):
    """Test train-target fails naming the missing source checkpoint."""
    assert _invoke(tmp_path, 'gen-data', '--workers', '1').exit_code == 0
    result = _invoke(tmp_path, 'train-target')
    assert result.exit_code != 0
    output = _flat(result.output)
    assert 'missing source stage' in output
    assert 'train-source' in output


def test_train_source_before_gen_data(tmp_path):
    """Test a missing dataset names the command to run."""
    result = _invoke(tmp_path, 'train-source')
    assert result.exit_code == 1
    assert 'gen-data' in _flat(result.output)


def test_full_pipeline(tmp_path):
    """Test every stage end to end at toy scale."""
    for command in (['gen-data', '--workers', '1'], ['train-source'], ['invert'], ['pretrain-fsr'],
                    ['train-target', '--name', 'mac']):
        result = _invoke(tmp_path, *command)
        assert result.exit_code == 0, (command, result.output)

    run = tmp_path / 'runs' / 'targets' / 'mac'
    assert (run / 'COMPLETE').exists()
    report = json.loads((run / 'report.json').read_text())
    assert report['mode'] == 'mac-supervised'
    assert report['annotated_samples'] == 8
    assert (run / 'metrics.jsonl').read_text().strip()

    result = _invoke(tmp_path, 'eval', '--name', 'mac')
    assert result.exit_code == 0, result.output
    assert (tmp_path / 'runs' / 'eval' / 'mac.json').exists()

    result = _invoke(tmp_path, 'eval', '--source')
    assert result.exit_code == 0, result.output

    result = _invoke(tmp_path, 'render-figures', '--name', 'mac', '--corpus', '2')
    assert result.exit_code == 0, result.output
    pngs = sorted(p.name for p in (tmp_path / 'runs' / 'figures' / 'mac').glob('*.png'))
    sample_panels = [p for p in pngs if p.startswith('train-00000_')]
    assert len(sample_panels) >= 5
    assert len([p for p in pngs if p.startswith('corpus-')]) == 2


def test_eval_needs_a_target(tmp_path):
    """Test eval without --name or --source."""
    result = _invoke(tmp_path, 'eval')
    assert result.exit_code == 2


def test_config_help():
    """Test config command help."""
    runner = CliRunner()
    result = runner.invoke(main, ['config', '--help'])
    assert result.exit_code == 0
    assert 'Configuration management' in result.output


def test_config_set_get_validate(tmp_path):
    """Test config set/get/validate against a file."""
    runner = CliRunner()
    cfg = str(tmp_path / 'modcal.cfg')

    result = runner.invoke(main, ['-c', cfg, 'config', 'set', 'target.iterations', '50'])
    assert result.exit_code == 0, result.output
    result = runner.invoke(main, ['-c', cfg, 'config', 'get', 'target.iterations'])
    assert 'target.iterations = 50' in result.output

    result = runner.invoke(main, ['-c', cfg, 'config', 'set', 'target.iterations', 'many'])
    assert result.exit_code == 2

    result = runner.invoke(main, ['-c', cfg, 'config', 'validate'])
    assert result.exit_code == 0
    assert 'valid' in result.output


def test_config_validate_rejects_bad_file(tmp_path):
    """Test config validate on an unknown key."""
    cfg = tmp_path / 'modcal.cfg'
    cfg.write_text("target.speed = 3\n")
    result = CliRunner().invoke(main, ['-c', str(cfg), 'config', 'validate'])
    assert result.exit_code == 2


def test_config_init_and_show(tmp_path):
    """Test config init writes every default and show lists changed keys."""
    runner = CliRunner()
    cfg = str(tmp_path / 'modcal.cfg')
    result = runner.invoke(main, ['-c', cfg, 'config', 'init'])
    assert result.exit_code == 0
    assert 'run.seed = 0' in (tmp_path / 'modcal.cfg').read_text()

    result = runner.invoke(main, ['-c', cfg, '--set', 'run.seed=5', 'config', 'show', '--changed'])
    assert result.exit_code == 0
    assert 'run.seed' in result.output
    assert 'target.lr' not in result.output
