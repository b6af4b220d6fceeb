import pytest
from hypothesis import settings

from ssl_lab import data as D

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

TINY = D.DatasetSpec(train_per_class=8, test_per_class=3, background_train=10, background_test=3,
                     image_size=(16, 16), seed=11)


@pytest.fixture(scope="session")
def tiny_dataset():
    return D.generate(TINY)


def pytest_terminal_summary(terminalreporter):
    import acceptance_runs

    if acceptance_runs.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_runs.LINES):
            terminalreporter.write_line(line)
