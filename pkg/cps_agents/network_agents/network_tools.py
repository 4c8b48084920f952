"""
Network primitives
Control-plane messages, link serialization and flow-table lookup
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional

import networkx as nx

from data_models import FlowKey, FlowRule, Packet
from errors import DisconnectedTopologyError
from sim_core import RngStream

PN_CONTROLLER_TARGET = 'pn-controller'
FABRIC_TARGET = 'fabric'


def switch_target(switch_id: str) -> str:
    return f'switch:{switch_id}'


def host_target(host_id: str) -> str:
    return f'host:{host_id}'


def probe_id(switch_id: str) -> str:
    return f'probe:{switch_id}'


# Data-plane events

@dataclass
class PacketArrival:
    kind = 'packet-arrival'

    packet: Packet
    link_id: str
    epoch: int


@dataclass
class MissTimeout:
    kind = 'miss-timeout'

    packet_id: int


@dataclass
class ReevaluateBuffer:
    kind = 'reevaluate-buffer'


@dataclass
class LinkChange:
    kind = 'link-change'

    link_id: str
    up: bool


# Control-plane messages

@dataclass
class PacketIn:
    kind = 'packet-in'

    switch: str
    flow_key: FlowKey
    label: Optional[int]
    packet_id: int
    at: int


@dataclass
class LinkStatus:
    kind = 'link-status'

    link_id: str
    endpoints: tuple
    up: bool
    at: int


@dataclass
class RuleInstall:
    kind = 'rule-install'

    switch: str
    rule: FlowRule


@dataclass
class RuleRemove:
    kind = 'rule-remove'

    switch: str
    rule_id: str
    cause: Optional[str] = None


@dataclass
class ControlPlaneFault:
    kind = 'control-plane-error'

    switch: str
    operation: str
    reason: str


@dataclass
class LinkState:
    """One full-duplex link; serialization is FIFO per sending side"""
    link_id: str
    a: str
    b: str
    latency_us: int
    bandwidth_bps: int
    loss: float = 0.0
    up: bool = True
    epoch: int = 0
    busy_until: Dict[str, int] = field(default_factory=dict)
    in_flight: Dict[int, Packet] = field(default_factory=dict)
    transmitted: int = 0
    lost: int = 0

    def other_end(self, node: str) -> str:
        return self.b if node == self.a else self.a

    def to_dict(self) -> Dict[str, Any]:
        return {
            'link_id': self.link_id,
            'a': self.a,
            'b': self.b,
            'up': self.up,
            'transmitted': self.transmitted,
            'lost': self.lost
        }


def serialization_delay_us(size_bytes: int, bandwidth_bps: int) -> int:
    """ceil(8 * bytes / bits-per-microsecond), integer arithmetic only"""
    return -(-8 * size_bytes * 1_000_000 // bandwidth_bps)


def link_transmit(link: LinkState, packet: Packet, sender: str, now: int, rng: RngStream) -> Optional[int]:
    """
    Put a packet on the wire

    Args:
        link: Link to transmit on (must be up)
        packet: Packet to send
        sender: Endpoint the packet leaves from
        now: Current simulation time
        rng: The link's random stream, used for loss draws

    Returns:
        Arrival time at the other end, or None when the packet is lost
    """
    start = max(now, link.busy_until.get(sender, 0))
    finish = start + serialization_delay_us(packet.size, link.bandwidth_bps)
    link.busy_until[sender] = finish
    link.transmitted += 1

    if link.loss >= 1.0 or (link.loss > 0.0 and rng.random() < link.loss):
        link.lost += 1
        return None
    return finish + link.latency_us


def select_rule(rules: Iterable[FlowRule], packet: Packet, now: int) -> Optional[FlowRule]:
    """Highest priority active match; ties go to the newest installation"""
    best = None
    best_key = None
    for rule in rules:
        if not rule.match.matches(packet) or not rule.is_active(now):
            continue
        key = (rule.priority, rule.installed_at, rule.install_seq)
        if best_key is None or key > best_key:
            best, best_key = rule, key
    return best


def link_id_for(a: str, b: str) -> str:
    return f'{a}-{b}'


def build_topology_graph(nodes: List[Dict[str, Any]], links: List[Dict[str, Any]]) -> nx.Graph:
    """
    Topology graph with node kind/role and link attributes

    Args:
        nodes: Dicts with id, kind ('host' or 'switch') and role
        links: Dicts with a, b, latency_us, bandwidth_bps, loss and optional id

    Returns:
        Undirected graph; raises DisconnectedTopologyError when not connected
    """
    graph = nx.Graph()
    for node in nodes:
        graph.add_node(node['id'], kind=node['kind'], role=node.get('role', 'generic'))
    for link in links:
        graph.add_edge(
            link['a'], link['b'],
            link_id=link.get('id') or link_id_for(link['a'], link['b']),
            latency_us=int(link['latency_us']),
            bandwidth_bps=int(link['bandwidth_bps']),
            loss=float(link.get('loss', 0.0)),
            up=True
        )
    if graph.number_of_nodes() and not nx.is_connected(graph):
        parts = [sorted(c) for c in nx.connected_components(graph)]
        raise DisconnectedTopologyError(f'topology is not connected: components {parts}')
    return graph


def switch_graph(graph: nx.Graph, up_only: bool = True) -> nx.Graph:
    """Switch-only view, optionally without failed or degraded links"""
    switches = [n for n, d in graph.nodes(data=True) if d.get('kind') == 'switch']
    view = graph.subgraph(switches).copy()
    if up_only:
        view.remove_edges_from([(u, v) for u, v, d in view.edges(data=True)
                                if not d.get('up', True) or d.get('degraded', False)])
    return view


def attachment_switch(graph: nx.Graph, host: str) -> str:
    """The switch a host hangs off"""
    for neighbor in graph.neighbors(host):
        if graph.nodes[neighbor].get('kind') == 'switch':
            return neighbor
    raise DisconnectedTopologyError(f'host {host} is not attached to a switch')


def path_links(graph: nx.Graph, hops: Iterable[str]) -> List[str]:
    hops = list(hops)
    return [graph.edges[u, v]['link_id'] for u, v in zip(hops, hops[1:])]
