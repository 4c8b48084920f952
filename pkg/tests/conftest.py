from pathlib import Path
from typing import Callable, Optional

import networkx as nx
import numpy as np
import pytest

from config import ScenarioConfig, load_config
from data_models import StateSpaceModel
from sim_core import EventEngine
from cps_agents.network_agents.network_agent import Fabric
from cps_agents.network_agents.network_tools import PN_CONTROLLER_TARGET, build_topology_graph

SCENARIOS = Path(__file__).resolve().parent.parent / 'data' / 'scenarios'


def scenario_path(name: str) -> Path:
    return SCENARIOS / f'{name}.json'


def edit_config(config: ScenarioConfig, change: Callable[[dict], None]) -> ScenarioConfig:
    """Apply an in-place edit to the JSON form of a config and re-validate it"""
    data = config.model_dump(mode='json')
    change(data)
    return ScenarioConfig.model_validate(data)


def short_scenario(name: str, duration_us: int, attack_start_us: Optional[int] = None,
                   attack_stop_us: Optional[int] = None, **attack_fields) -> ScenarioConfig:
    """A bundled scenario cut down to `duration_us`, with its attack and fault windows moved"""
    def change(data: dict) -> None:
        data['duration_us'] = duration_us
        for attack in data['attacks']:
            if attack_start_us is not None:
                attack['start_us'] = attack_start_us
            if attack_stop_us is not None:
                attack['stop_us'] = attack_stop_us
            attack.update(attack_fields)
        for fault in data['faults']:
            if attack_start_us is not None:
                fault['at_us'] = attack_start_us
    return edit_config(load_config(scenario_path(name)), change)


@pytest.fixture
def default_config() -> ScenarioConfig:
    return load_config(scenario_path('default'))


@pytest.fixture
def scalar_model() -> StateSpaceModel:
    return StateSpaceModel(A=[[0.9]], B=[[1.0]], C=[[1.0]], W=[[0.01]], V=[[0.01]])


@pytest.fixture
def diamond_graph() -> nx.Graph:
    """
    s1 -> s4 three ways: via s2 (200 us), via s3 (300 us, 2 hops) and direct (300 us, 1 hop)
    """
    graph = nx.Graph()
    for u, v, latency, bandwidth in (('s1', 's2', 100, 1_000_000), ('s2', 's4', 100, 1_000_000),
                                     ('s1', 's3', 150, 500_000), ('s3', 's4', 150, 1_000_000),
                                     ('s1', 's4', 300, 2_000_000)):
        graph.add_edge(u, v, latency_us=latency, bandwidth_bps=bandwidth, link_id=f'{u}-{v}', up=True)
    return graph


class ControllerInbox:
    """Collects whatever the fabric sends to the PN controller"""

    def __init__(self, engine: EventEngine):
        self.messages = []
        engine.register(PN_CONTROLLER_TARGET, lambda event: self.messages.append(event.payload))

    def of_kind(self, kind: str):
        return [m for m in self.messages if getattr(m, 'kind', None) == kind]


def line_fabric(engine: EventEngine, loss: float = 0.0, core_bandwidth: int = 1_000_000, **kwargs) -> Fabric:
    """h1 - s1 - s2 - h2 with 100 us access links and a 500 us core link"""
    nodes = [{'id': 's1', 'kind': 'switch'}, {'id': 's2', 'kind': 'switch'},
             {'id': 'h1', 'kind': 'host'}, {'id': 'h2', 'kind': 'host'}]
    links = [
        {'a': 'h1', 'b': 's1', 'latency_us': 100, 'bandwidth_bps': 10_000_000},
        {'a': 's1', 'b': 's2', 'latency_us': 500, 'bandwidth_bps': core_bandwidth, 'loss': loss},
        {'a': 'h2', 'b': 's2', 'latency_us': 100, 'bandwidth_bps': 10_000_000},
    ]
    return Fabric(engine, build_topology_graph(nodes, links), **kwargs)


@pytest.fixture
def engine() -> EventEngine:
    return EventEngine(seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
