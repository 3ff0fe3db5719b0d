import pytest

from ssmb.synthdata import generate_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """20 identities, 2 samples per identity and modality, seed 7."""
    return generate_dataset(7, 20, 2, tmp_path_factory.mktemp("small"))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
