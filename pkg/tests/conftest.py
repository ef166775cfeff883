import pytest

from analogykg.synth import SynthConfig, generate_world


@pytest.fixture(scope="session")
def world():
    """Default acceptance-scale world (120 analogy entities, 8 relations, seed 7)."""
    return generate_world(SynthConfig())


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SynthConfig(num_entities=32, num_relations=4, pairs_per_relation=8, neighbor_triples=6,
                                      num_neighbor_relations=2, text_dim=8, image_dim=8, instances_per_relation=24,
                                      seed=3))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
