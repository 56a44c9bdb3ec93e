"""
Test the vector-quantized calibrator.
"""

import pytest
import torch

from modcal.core.calibrator import (
    Calibrator, CalibratorConfig, Codebook, ModalityAdapter, build_calibrator, calibrate, export_codebook,
    load_calibrator, nearest_codes, quantize, save_calibrator, vq_losses,
)
from modcal.core.errors import ConfigurationError, InputError, StateError
from modcal.core.tensorio import read_tensor

SPATIAL = CalibratorConfig(image_size=32, input_shape=(1, 16, 16), channel=4, codebook_size=8, hidden=4,
                           adapter_channels=2)
FLAT = CalibratorConfig(image_size=32, input_shape=(64, 1, 1), channel=4, codebook_size=8, hidden=4,
                        adapter_channels=2)


def _cells(values):
    """[[c0, c1], ...] -> z_e of shape [1, 2, 1, n]."""
    return torch.tensor(values, dtype=torch.float32).t().reshape(1, 2, 1, len(values))


def test_quantize_nearest_neighbour():
    """Test the hand-placed two-entry codebook."""
    codebook = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    index, z_q = quantize(_cells([[0.2, 0.1], [0.6, 0.6], [0.5, 0.5]]), codebook)
    assert index.reshape(-1).tolist() == [0, 1, 0]
    assert z_q[0, :, 0, 1].tolist() == [1.0, 1.0]


def test_quantize_errors():
    """Test empty codebooks and channel mismatches."""
    with pytest.raises(ConfigurationError):
        quantize(torch.zeros(1, 2, 1, 1), torch.zeros(0, 2))
    with pytest.raises(InputError):
        quantize(torch.zeros(1, 3, 1, 1), torch.zeros(4, 2))


def test_quantization_oracle():
    """Test 10k random cells against exhaustive nearest-neighbour search."""
    gen = torch.Generator().manual_seed(0)
    codebook = torch.randn(16, 4, generator=gen)
    z_e = torch.randn(10, 4, 20, 50, generator=gen)
    index, z_q = quantize(z_e, codebook)

    flat = z_e.permute(0, 2, 3, 1).reshape(-1, 4)
    expected = []
    for row in flat:
        distances = ((row[None, :] - codebook) ** 2).sum(dim=1).tolist()
        expected.append(min(range(len(distances)), key=lambda k: (distances[k], k)))
    assert index.reshape(-1).tolist() == expected
    assert int(index.min()) >= 0 and int(index.max()) < 16
    assert torch.equal(z_q.permute(0, 2, 3, 1).reshape(-1, 4), codebook[index.reshape(-1)])


def test_nearest_codes_chunking():
    """Test chunked search equals one-shot search."""
    gen = torch.Generator().manual_seed(1)
    flat, codebook = torch.randn(1000, 3, generator=gen), torch.randn(7, 3, generator=gen)
    assert torch.equal(nearest_codes(flat, codebook, chunk=64), nearest_codes(flat, codebook, chunk=4096))


def test_straight_through_gradient():
    """Test the gradient of z_q passes to z_e unchanged."""
    codebook = torch.randn(8, 4)
    z_e = torch.randn(2, 4, 3, 3, requires_grad=True)
    _, z_q = quantize(z_e, codebook)
    weights = torch.randn_like(z_q)
    (z_q * weights).sum().backward()
    assert torch.equal(z_e.grad, weights)


def test_vq_losses_fixed_point():
    """Test all terms vanish when z_e sits on the codebook and the reconstruction is exact."""
    codebook = Codebook(4, 2)
    z_e = codebook.weight.detach()[[0, 3]].t().reshape(1, 2, 1, 2).clone()
    grid = codebook(z_e)
    target = torch.rand(1, 3, 4, 4)
    losses = vq_losses(z_e, codebook.lookup(grid.indices), target.clone(), target, beta=0.25)
    assert float(losses.rec) == 0.0
    assert float(losses.codebook) == 0.0
    assert float(losses.commit) == 0.0


def test_vq_losses_hand_case():
    """Test one cell against hand-computed squared errors."""
    z_e = torch.tensor([0.3, -0.2], dtype=torch.float64).view(1, 2, 1, 1)
    z_q = torch.tensor([0.5, 0.1], dtype=torch.float64).view(1, 2, 1, 1)
    rec = torch.tensor([0.25], dtype=torch.float64)
    target = torch.tensor([0.75], dtype=torch.float64)
    losses = vq_losses(z_e, z_q, rec, target, beta=0.5)
    squared = ((0.5 - 0.3) ** 2 + (0.1 + 0.2) ** 2) / 2
    assert float(losses.rec) == pytest.approx(0.25, abs=1e-9)
    assert float(losses.codebook) == pytest.approx(squared, abs=1e-9)
    assert float(losses.commit) == pytest.approx(squared, abs=1e-9)
    assert float(losses.total) == pytest.approx(0.25 + squared + 0.5 * squared, abs=1e-9)

    zero_beta = vq_losses(z_e, z_q, rec, target, beta=0.0)
    assert float(zero_beta.total) == pytest.approx(float(zero_beta.rec + zero_beta.codebook), abs=1e-12)


def test_codebook_loss_reaches_codebook():
    """Test the codebook term has a gradient on the lookup rows."""
    codebook = Codebook(4, 2)
    z_e = torch.randn(1, 2, 2, 2)
    grid = codebook(z_e)
    losses = vq_losses(z_e, codebook.lookup(grid.indices), torch.zeros(1), torch.zeros(1), beta=0.25)
    losses.total.backward()
    assert codebook.weight.grad is not None
    assert float(codebook.weight.grad.abs().sum()) > 0


def test_usage_counters():
    """Test entries hit in training mode are counted."""
    codebook = Codebook(4, 2)
    codebook.train()
    grid = codebook(torch.randn(1, 2, 3, 3))
    assert int(codebook.usage.sum()) == 9
    assert codebook.dead_entries() == 4 - len(set(grid.indices.reshape(-1).tolist()))


def test_adapter_shapes():
    """Test spatial pass-through and the flat lift to the latent grid."""
    spatial = ModalityAdapter(SPATIAL)(torch.randn(2, 1, 16, 16))
    assert spatial.shape == (2, 2, 16, 16)
    flat = ModalityAdapter(FLAT)(torch.randn(2, 64, 1, 1))
    assert flat.shape == (2, 2, 4, 4)
    assert torch.isfinite(flat).all()
    with pytest.raises(InputError):
        ModalityAdapter(SPATIAL)(torch.randn(2, 1, 8, 8))


@pytest.mark.parametrize("config", [SPATIAL, FLAT])
def test_calibrate_shape_and_determinism(config):
    """Test J is image-shaped and repeatable in eval mode."""
    calibrator = build_calibrator(config, seed=0)
    calibrator.eval()
    x = torch.randn(3, *config.input_shape)
    j, latent = calibrator(x)
    assert j.shape == (3, 3, 32, 32)
    assert latent.indices.shape == (3, 4, 4)
    assert torch.equal(calibrate(calibrator, x), j)
    assert calibrate(calibrator, x[0]).shape == (3, 32, 32)


def test_z_q_cells_are_codebook_rows():
    """Test every quantized cell equals a codebook entry exactly."""
    calibrator = build_calibrator(SPATIAL, seed=0)
    _, latent = calibrator(torch.randn(2, 1, 16, 16))
    cells = latent.z_q.detach().permute(0, 2, 3, 1).reshape(-1, SPATIAL.channel)
    rows = calibrator.codebook.weight.detach()[latent.indices.reshape(-1)]
    assert torch.equal(cells, rows)


def test_uninitialized_calibrator():
    """Test a calibrator without initialized parameters refuses to run."""
    with pytest.raises(StateError):
        Calibrator(SPATIAL)(torch.randn(1, 1, 16, 16))


def test_config_validation():
    """Test latent grid compatibility checks."""
    with pytest.raises(ConfigurationError):
        CalibratorConfig(image_size=32, input_shape=(1, 12, 12)).validate()
    with pytest.raises(ConfigurationError):
        CalibratorConfig(codebook_size=1).validate()
    assert SPATIAL.encoder_downsamples == 2
    assert FLAT.encoder_downsamples == 0


def test_parameter_groups_partition_parameters():
    """Test the four groups cover every parameter once."""
    calibrator = build_calibrator(SPATIAL, seed=0)
    grouped = [id(p) for params in calibrator.parameter_groups().values() for p in params]
    assert sorted(grouped) == sorted(id(p) for p in calibrator.parameters())


def test_checkpoint_round_trip(tmp_path):
    """Test save/load and codebook export."""
    calibrator = build_calibrator(FLAT, seed=2)
    save_calibrator(tmp_path / "cal.mckp", calibrator)
    loaded = load_calibrator(tmp_path / "cal.mckp")
    x = torch.randn(2, 64, 1, 1)
    calibrator.eval()
    assert torch.equal(loaded.calibrate(x), calibrator.calibrate(x))

    export_codebook(tmp_path / "codebook.bin", calibrator.codebook)
    assert torch.equal(read_tensor(tmp_path / "codebook.bin"), calibrator.codebook.weight.detach())
