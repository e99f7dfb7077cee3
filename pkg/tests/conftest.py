import sys
from pathlib import Path

import numpy as np
import pytest

TESTS_DIR = Path(__file__).parent
REPO_ROOT = TESTS_DIR.parent

sys.path.insert(0, str(TESTS_DIR))


@pytest.fixture(scope="session")
def configs_dir() -> Path:
    return REPO_ROOT / "configs"


@pytest.fixture
def path_graph():
    """Three nodes in a line, ends designated as leaves."""
    from wisteria.ontology import LabelGraph

    return LabelGraph(num_nodes=3, edges=((0, 1), (1, 2)), leaf_ids=(0, 2))


@pytest.fixture
def small_records():
    """Deterministic 4-class records with zero feature noise."""
    from wisteria.synthgen import GenConfig, SiteSpec, generate_dataset

    config = GenConfig(
        num_records=40,
        num_classes=4,
        feature_dim=6,
        num_sites=2,
        prototype_separation=2.0,
        feature_noise_sd=0.0,
        seed=11,
    )
    sites = [
        SiteSpec(0, np.zeros(6), np.eye(4)),
        SiteSpec(1, np.zeros(6), np.eye(4)),
    ]
    return generate_dataset(config, sites), config
