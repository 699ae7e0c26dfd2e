import numpy as np
import pytest
import torch

from hoshape.autoencoder import AEConfig, ShapeAutoencoder
from hoshape.tsdf import GridSpec, PatchSpec, TsdfGrid

torch.set_num_threads(1)

SMALL_SPEC = GridSpec(16, 0.1, 0.025)
SMALL_PATCH = PatchSpec(4, 4)


def small_config(**kw) -> AEConfig:
    base = dict(num_codes=8, code_dim=4, encoder_widths=(8,), decoder_hidden=16, steps=10,
                batch_size=2, points_per_shape=64, learning_rate=1e-3, seed=0)
    base.update(kw)
    return AEConfig(**base)


def sphere_grid(spec, radius, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center)
    return TsdfGrid.from_sdf(spec, lambda p: np.linalg.norm(p - c, axis=1) - radius)


@pytest.fixture
def small_model():
    return ShapeAutoencoder(SMALL_SPEC, SMALL_PATCH, small_config(), "hand")


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
