import pytest

from glam.config import GlamConfig, TrainConfig
from glam.global_net import GlobalConfig
from glam.local_net import LocalConfig
from glam.synthdata import SynthConfig, generate


def tiny_config(**train) -> GlamConfig:
    """64x64 images, 32x32 patches, a few seconds per full pipeline."""
    t = dict(eta=1e-3, lam=1e-4, K=2, epochs_global=2, epochs_local=2, epochs_joint=1, batch_size=4)
    t.update(train)
    return GlamConfig(
        GlobalConfig(64, 64, channels=(4, 8, 8), stem_channels=4, blocks=(1, 1, 1)),
        LocalConfig(32, 32, backbone="hr18", width=2, attention_dim=4),
        TrainConfig(**t),
        SynthConfig(64, 64, n_train=10, n_val=4, n_test=4, radius_frac=(0.06, 0.1),
                    area_budget=0.05, p_malignant=0.5, p_benign=0.5),
    ).validate()


@pytest.fixture(scope="session")
def tiny_splits():
    return generate(tiny_config().synth)


# ---------------------------------------------------------------- acceptance lines

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, text): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label, text = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _criteria[label] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, (status, text) in sorted(_criteria.items(), key=lambda kv: _order(kv[0])):
        terminalreporter.write_line(f"criterion {label}: {status}  {text}")


def _order(label):
    head, _, tail = label.partition("-")
    return (int(head), tail)
