import pytest
import torch

from pgseg.pipeline.config import ModelConfig, RunConfig, TrainConfig

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    # 64 px input keeps the full model under a second per step
    return ModelConfig(image_size=64, patch_size=16, enc_dim=32, dec_dim=64, dec_heads=4, d_text=16)


@pytest.fixture
def tiny_run(tiny_model_config):
    from pgseg.losses import LossConfig

    m = tiny_model_config
    return RunConfig(
        model=m,
        train=TrainConfig(epochs=2, batch_size=2, seed=3, warmup_steps=2, loss=LossConfig(low=m.low_res, high=m.high_res)),
    )


@pytest.fixture
def tiny_samples():
    import numpy as np

    from pgseg.pipeline.data import synth_slice
    from pgseg.vocab import ORGANS

    rng = np.random.default_rng(11)
    return [synth_slice(rng, 64, ORGANS, f"t{i}") for i in range(4)]


@pytest.fixture(autouse=True)
def _restore_torch_state():
    threads = torch.get_num_threads()
    det = torch.are_deterministic_algorithms_enabled()
    yield
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(det)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"ACCEPTANCE {'PASS' if ok else 'FAIL'}  {name}  {detail}")
