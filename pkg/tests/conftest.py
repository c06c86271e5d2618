import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from epsim import ModelConfig, Topology, build_placement


@pytest.fixture
def topo2x8():
    """Two nodes, EP over all 16 GPU slots at pp=2: four-device domains."""
    return Topology(num_nodes=2, gpus_per_node=8, ep_degree=8, pp_degree=2)


@pytest.fixture
def topo1x8():
    return Topology(num_nodes=1, gpus_per_node=8, ep_degree=2, pp_degree=4)


@pytest.fixture
def model128(topo2x8):
    return ModelConfig(num_experts=128, top_k=2, dyn=4, tau=64)


@pytest.fixture
def placement128(model128, topo2x8):
    return build_placement(model128, topo2x8)
