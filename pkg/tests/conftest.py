import pytest

TINY_CONFIG = """\
# small enough for CLI tests to run in seconds
seed = 7
image_size = 32
vae_ch = 8
vae_steps = 3
vae_batch = 2
d_model = 16
blocks = 1
heads = 2
fourier_m = 4
head_channels = 8
disc_ch = 8
max_res = 128
stage1_min = 32
stage1_max = 48
stage1_batch = 2
stage1_steps = 3
stage2_min = 32
stage2_max = 64
stage2_batch = 1
stage2_steps = 2
adv_warmup = 1
patch_size = 16
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
