import os

# single-threaded BLAS keeps repeated runs bit-identical
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from spheremoe.config import BackboneConfig, MoeConfig, RunConfig, SrstConfig, TrainConfig
from spheremoe.synth import gen_cohort


def tiny_config(variant="anatomy", dtype="f32", depth=1, **train) -> RunConfig:
    """A level-2 model small enough for finite differences and fast unit tests."""
    cfg = RunConfig()
    cfg.srst = SrstConfig(base_level=2, functional_target_level=1, functional_channels=(4, 6),
                          structural_target_level=0, structural_channels=(3, 4, 4), struct_dim=3,
                          model_dim=8, dropout=0.0)
    cfg.moe = MoeConfig(n_routed=4, n_shared=1, top_k=2, hidden=8, router_hidden=6, variant=variant)
    cfg.model = BackboneConfig(dim=8, depth=depth, heads=2, attn_dropout=0.0, d_image=32, d_text=32, d_latent=16)
    cfg.train = TrainConfig(lr=3e-3, grad_clip_norm=1.0, batch_semantic=8, batch_perception=8,
                            epochs_semantic=2, epochs_perception=2, dtype=dtype, **train)
    cfg.data.roi_fraction = 0.4
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_cohort():
    return gen_cohort(4, 24, seed=3, level=2, n_heldout=1, smoothing=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance report: one line per criterion, printed after the test summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
