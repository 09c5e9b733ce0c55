import pytest

from jfdal.synthdata import GenSpec, generate

TINY_SPEC = GenSpec(
    n_vis_ids=12,
    vis_per_id=6,
    n_hfr_ids=4,
    hfr_per_id_per_domain=6,
    input_dim=16,
    latent_dim=4,
    nuisance_dim=4,
    n_vis_test_ids=8,
    vis_test_per_id=3,
    n_vis_test_pairs=40,
    rotated_planes=2,
    seed=0,
)


@pytest.fixture(scope="session")
def tiny_spec():
    return TINY_SPEC


@pytest.fixture(scope="session")
def tiny_data():
    return generate(TINY_SPEC)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
