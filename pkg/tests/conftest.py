import pytest

from dskd.config import ExperimentConfig


@pytest.fixture
def tiny_cfg(tmp_path):
    """A configuration small enough to train in well under a second per epoch."""
    return ExperimentConfig(
        num_classes=3, per_class=10, image_size=8, teacher_arch="6:1,8:1:d", student_arch="4:1,4:1:d,6:1:d",
        epochs=2, teacher_epochs=2, batch_size=8, seeds=(0, 1), milestones=(1,), output_dir=str(tmp_path / "run"),
    )


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    lines = test_acceptance.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
