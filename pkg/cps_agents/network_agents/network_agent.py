"""
Network fabric
Programmable switches, full-duplex links and hosts driven by the event engine
"""

import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import networkx as nx

from data_models import (
    ActionType,
    FlowRule,
    Packet,
    ProbeReport,
    Proto,
    TABLE_MISS_ID,
    table_miss_rule,
)
from errors import ControlPlaneError
from sim_core import Event, EventEngine
from cps_agents.network_agents.network_tools import (
    FABRIC_TARGET,
    PN_CONTROLLER_TARGET,
    ControlPlaneFault,
    LinkChange,
    LinkState,
    LinkStatus,
    MissTimeout,
    PacketArrival,
    PacketIn,
    ReevaluateBuffer,
    RuleInstall,
    RuleRemove,
    host_target,
    link_transmit,
    select_rule,
    switch_target,
)
from cps_agents.scada_agents.scada_tools import digest_payload

logger = logging.getLogger(__name__)

DROP_CATEGORIES = ('dropped_loss', 'dropped_rule', 'dropped_failure', 'dropped_miss', 'dropped_attack')


@dataclass
class Delivery:
    at: int
    flow_key: str
    host: str
    packet_id: int
    label: Optional[int]
    delay_us: int


@dataclass
class Switch:
    """Flow table, table-miss buffer and per-switch counters"""
    switch_id: str
    ports: List[str]
    rules: List[FlowRule] = field(default_factory=lambda: [table_miss_rule()])
    buffer: 'OrderedDict[int, Packet]' = field(default_factory=OrderedDict)
    interceptors: List[Any] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)
    reevaluate_pending: bool = False
    _install_seq: int = 0
    _prune_after: Optional[int] = None

    def active_rule(self, rule_id: str) -> Optional[FlowRule]:
        for rule in self.rules:
            if rule.rule_id == rule_id and rule.removed_at is None:
                return rule
        return None

    def install(self, rule: FlowRule, now: int) -> None:
        """Takes effect for packets processed strictly after `now`; replaces a rule with the same id"""
        previous = self.active_rule(rule.rule_id)
        if previous is not None:
            previous.removed_at = now
            self._retire_at(now)
        self._install_seq += 1
        rule.installed_at = now
        rule.install_seq = self._install_seq
        rule.removed_at = None
        self.rules = [r for r in self.rules if r.removed_at is None or r.removed_at >= now]
        self.rules.append(rule)
        self.counters['rules_installed'] += 1

    def remove(self, rule_id: str, now: int) -> bool:
        rule = self.active_rule(rule_id)
        if rule is None or rule.rule_id == TABLE_MISS_ID:
            self.counters['unknown_rule_removals'] += 1
            return False
        rule.removed_at = now
        self._retire_at(now)
        self.counters['rules_removed'] += 1
        return True

    def _retire_at(self, now: int) -> None:
        if self._prune_after is None or now < self._prune_after:
            self._prune_after = now

    def lookup(self, packet: Packet, now: int) -> FlowRule:
        if self._prune_after is not None and now > self._prune_after:
            self.rules = [r for r in self.rules if r.removed_at is None or r.removed_at >= now]
            retired = [r.removed_at for r in self.rules if r.removed_at is not None]
            self._prune_after = min(retired) if retired else None
        return select_rule(self.rules, packet, now)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'switch': self.switch_id,
            'rules': len([r for r in self.rules if r.removed_at is None]),
            'buffered': len(self.buffer),
            **{k: int(v) for k, v in sorted(self.counters.items())}
        }


HostHandler = Callable[[Packet, int], None]


class Fabric:
    """
    The data domain

    Hosts inject packets, switches execute the winning rule of their flow
    table and links serialize FIFO per direction. Probe reports, packet-ins
    and link-status notifications reach the PN controller out of band after
    `control_plane_delay_us`.
    """

    def __init__(self, engine: EventEngine, graph: nx.Graph, miss_buffer_size: int = 64,
                 miss_timeout_us: int = 50_000, hop_limit: int = 64, control_plane_delay_us: int = 1000):
        self.engine = engine
        self.graph = graph
        self.miss_buffer_size = miss_buffer_size
        self.miss_timeout_us = miss_timeout_us
        self.hop_limit = hop_limit
        self.control_plane_delay_us = control_plane_delay_us

        self.switches: Dict[str, Switch] = {}
        self.hosts: Dict[str, str] = {}  # host -> attachment switch
        self.links: Dict[str, LinkState] = {}
        self._link_between: Dict[Tuple[str, str], str] = {}
        self._host_handlers: Dict[str, HostHandler] = {}

        self.counters: Counter = Counter()
        self.deliveries: List[Delivery] = []
        self._next_packet_id = 1

        self.on_rule_change: Optional[Callable[[Dict[str, Any]], None]] = None
        self.on_link_change: Optional[Callable[[Dict[str, Any]], None]] = None

        self._build()

    def _build(self) -> None:
        for node, data in sorted(self.graph.nodes(data=True)):
            if data['kind'] == 'switch':
                self.switches[node] = Switch(node, ports=sorted(self.graph.neighbors(node)))
                self.engine.register(switch_target(node), self._on_switch_event)
            else:
                self.engine.register(host_target(node), self._on_host_event)

        for a, b, data in sorted(self.graph.edges(data=True), key=lambda e: e[2]['link_id']):
            link = LinkState(
                link_id=data['link_id'], a=a, b=b,
                latency_us=data['latency_us'], bandwidth_bps=data['bandwidth_bps'], loss=data['loss']
            )
            self.links[link.link_id] = link
            self._link_between[(a, b)] = link.link_id
            self._link_between[(b, a)] = link.link_id
            for host, switch in ((a, b), (b, a)):
                if self.graph.nodes[host]['kind'] == 'host' and self.graph.nodes[switch]['kind'] == 'switch':
                    self.hosts[host] = switch

        self.engine.register(FABRIC_TARGET, self._on_fabric_event)

    # Hosts

    def attach_host(self, host_id: str, handler: HostHandler) -> None:
        if host_id not in self.hosts:
            raise ControlPlaneError(f'unknown host {host_id}')
        self._host_handlers[host_id] = handler

    def send(self, src: str, dst: str, proto: Proto, payload: bytes) -> Packet:
        """Inject a packet from a host onto its access link"""
        now = self.engine.now
        packet = Packet(
            id=self._next_packet_id, src=src, dst=dst, proto=proto,
            payload=bytes(payload), created_at=now
        )
        self._next_packet_id += 1
        self.counters['injected'] += 1
        switch = self.hosts.get(src)
        if switch is None:
            self._drop(packet, 'dropped_failure', None)
            return packet
        self._transmit(src, switch, packet, now)
        return packet

    # Links

    def link_between(self, a: str, b: str) -> Optional[LinkState]:
        link_id = self._link_between.get((a, b))
        return self.links[link_id] if link_id else None

    def _transmit(self, sender: str, receiver: str, packet: Packet, now: int) -> None:
        link = self.link_between(sender, receiver)
        if link is None or not link.up:
            self._drop(packet, 'dropped_failure', sender)
            return
        arrival = link_transmit(link, packet, sender, now, self.engine.rng(f'link:{link.link_id}'))
        if arrival is None:
            self._drop(packet, 'dropped_loss', sender)
            return
        link.in_flight[packet.id] = packet
        target = switch_target(receiver) if receiver in self.switches else host_target(receiver)
        self.engine.schedule_at(arrival, target, PacketArrival(packet, link.link_id, link.epoch))

    def _drop(self, packet: Packet, category: str, where: Optional[str]) -> None:
        self.counters[category] += 1
        if where in self.switches:
            self.switches[where].counters[category] += 1
        logger.debug('packet %d of %s %s at %s', packet.id, packet.flow_key, category, where)

    def inject_link_failure(self, link_id: str, at: int) -> None:
        self.engine.schedule_at(at, FABRIC_TARGET, LinkChange(link_id, up=False))

    def restore_link(self, link_id: str, at: int) -> None:
        self.engine.schedule_at(at, FABRIC_TARGET, LinkChange(link_id, up=True))

    def _apply_link_change(self, change: LinkChange) -> None:
        now = self.engine.now
        link = self.links[change.link_id]
        if link.up == change.up:
            return
        link.up = change.up
        link.epoch += 1
        if not change.up:
            lost = len(link.in_flight)
            self.counters['dropped_failure'] += lost
            link.in_flight.clear()
            link.busy_until.clear()
            logger.info('link %s down at t=%d (%d packets in flight dropped)', link.link_id, now, lost)
        else:
            logger.info('link %s restored at t=%d', link.link_id, now)
        self.graph.edges[link.a, link.b]['up'] = change.up

        if self.on_link_change:
            self.on_link_change({'t': now, 'link': link.link_id, 'up': change.up})
        self.send_to_controller(LinkStatus(link.link_id, (link.a, link.b), change.up, now))

    # Control plane

    def send_to_controller(self, message: Any) -> None:
        self.engine.schedule_in(self.control_plane_delay_us, PN_CONTROLLER_TARGET, message)

    def install_rule(self, switch_id: str, rule: FlowRule) -> None:
        """Install now; buffered table-miss packets are re-evaluated one microsecond later"""
        switch = self.switches.get(switch_id)
        if switch is None:
            raise ControlPlaneError(f'install on unknown switch {switch_id}')
        now = self.engine.now
        switch.install(rule, now)
        if self.on_rule_change:
            self.on_rule_change({'t': now, 'switch': switch_id, 'rule': rule.rule_id,
                                 'op': 'install', 'cause': rule.cause})
        if switch.buffer and not switch.reevaluate_pending:
            switch.reevaluate_pending = True
            self.engine.schedule_at(now + 1, switch_target(switch_id), ReevaluateBuffer())

    def remove_rule(self, switch_id: str, rule_id: str, cause: Optional[str] = None) -> None:
        switch = self.switches.get(switch_id)
        if switch is None:
            raise ControlPlaneError(f'remove on unknown switch {switch_id}')
        now = self.engine.now
        if not switch.remove(rule_id, now):
            logger.warning('remove of unknown rule %s at %s ignored', rule_id, switch_id)
            return
        if self.on_rule_change:
            self.on_rule_change({'t': now, 'switch': switch_id, 'rule': rule_id, 'op': 'remove', 'cause': cause})

    def add_interceptor(self, switch_id: str, interceptor: Any) -> None:
        self.switches[switch_id].interceptors.append(interceptor)

    def _on_fabric_event(self, event: Event) -> None:
        message = event.payload
        if isinstance(message, LinkChange):
            self._apply_link_change(message)
            return
        try:
            if isinstance(message, RuleInstall):
                self.install_rule(message.switch, message.rule)
            elif isinstance(message, RuleRemove):
                self.remove_rule(message.switch, message.rule_id, message.cause)
        except ControlPlaneError as exc:
            logger.warning('control-plane error: %s', exc)
            self.counters['control_plane_errors'] += 1
            self.send_to_controller(ControlPlaneFault(message.switch, message.kind, str(exc)))

    # Data plane

    def _on_switch_event(self, event: Event) -> None:
        switch_id = event.target.split(':', 1)[1]
        switch = self.switches[switch_id]
        message = event.payload
        if isinstance(message, PacketArrival):
            self._on_packet_arrival(switch, message)
        elif isinstance(message, MissTimeout):
            packet = switch.buffer.pop(message.packet_id, None)
            if packet is not None:
                self._drop(packet, 'dropped_miss', switch.switch_id)
        elif isinstance(message, ReevaluateBuffer):
            switch.reevaluate_pending = False
            self._reevaluate(switch)

    def _accept(self, arrival: PacketArrival) -> bool:
        link = self.links[arrival.link_id]
        if arrival.epoch != link.epoch:
            return False
        link.in_flight.pop(arrival.packet.id, None)
        return True

    def _on_packet_arrival(self, switch: Switch, arrival: PacketArrival) -> None:
        if not self._accept(arrival):
            return
        packet = arrival.packet
        now = self.engine.now
        packet.hops += 1
        if packet.hops > self.hop_limit:
            self._drop(packet, 'dropped_rule', switch.switch_id)
            return
        for interceptor in switch.interceptors:
            packet = interceptor.intercept(packet, now, switch.switch_id)
            if packet is None:
                self._drop(arrival.packet, 'dropped_attack', switch.switch_id)
                return
        self.switch_process(switch, packet, now)

    def switch_process(self, switch: Switch, packet: Packet, now: int) -> List[ActionType]:
        """
        Execute the actions of the single winning rule in order

        Returns:
            The action types executed
        """
        rule = switch.lookup(packet, now)
        executed: List[ActionType] = []
        for action in rule.actions:
            executed.append(action.type)
            if action.type is ActionType.SET_LABEL:
                packet.label = action.arg
            elif action.type is ActionType.MIRROR:
                self._mirror(switch, packet, action.arg, now)
            elif action.type is ActionType.FORWARD:
                switch.counters['forwarded'] += 1
                self._transmit(switch.switch_id, action.arg, packet, now)
                return executed
            elif action.type is ActionType.DROP:
                self._drop(packet, 'dropped_rule', switch.switch_id)
                return executed
            elif action.type is ActionType.SEND_TO_CONTROLLER:
                self._buffer_miss(switch, packet, now)
                return executed
        self._drop(packet, 'dropped_rule', switch.switch_id)
        return executed

    def _mirror(self, switch: Switch, packet: Packet, probe: str, now: int) -> None:
        digest = digest_payload(packet.payload) if packet.proto is Proto.SCADA else None
        report = ProbeReport(
            flow_key=packet.flow_key, probe_id=probe, switch=switch.switch_id,
            observed_at=now, label=packet.label, digest=digest
        )
        switch.counters['mirrored'] += 1
        self.send_to_controller(report)

    def _buffer_miss(self, switch: Switch, packet: Packet, now: int) -> None:
        if len(switch.buffer) >= self.miss_buffer_size:
            self._drop(packet, 'dropped_miss', switch.switch_id)
            return
        switch.buffer[packet.id] = packet
        switch.counters['packet_in'] += 1
        self.engine.schedule_at(now + self.miss_timeout_us, switch_target(switch.switch_id), MissTimeout(packet.id))
        self.send_to_controller(PacketIn(switch.switch_id, packet.flow_key, packet.label, packet.id, now))

    def _reevaluate(self, switch: Switch) -> None:
        now = self.engine.now
        for packet_id, packet in list(switch.buffer.items()):
            rule = switch.lookup(packet, now)
            if rule.rule_id == TABLE_MISS_ID:
                continue
            del switch.buffer[packet_id]
            self.switch_process(switch, packet, now)

    def _on_host_event(self, event: Event) -> None:
        arrival = event.payload
        if not isinstance(arrival, PacketArrival) or not self._accept(arrival):
            return
        host = event.target.split(':', 1)[1]
        packet = arrival.packet
        now = self.engine.now
        self.counters['delivered'] += 1
        self.deliveries.append(Delivery(now, str(packet.flow_key), host, packet.id, packet.label,
                                        now - packet.created_at))
        handler = self._host_handlers.get(host)
        if handler is not None:
            handler(packet, now)

    # Accounting

    def buffered(self) -> int:
        return sum(len(s.buffer) for s in self.switches.values())

    def in_flight(self) -> int:
        return sum(len(link.in_flight) for link in self.links.values())

    def conservation(self) -> Dict[str, int]:
        """Packet accounting; `balanced` is the exact conservation check"""
        totals = {'injected': self.counters['injected'], 'delivered': self.counters['delivered']}
        for category in DROP_CATEGORIES:
            totals[category] = self.counters[category]
        totals['buffered_at_end'] = self.buffered()
        totals['in_flight_at_end'] = self.in_flight()
        accounted = sum(v for k, v in totals.items() if k != 'injected')
        totals['balanced'] = int(accounted == totals['injected'])
        return totals

    def link_counters(self) -> Dict[str, Tuple[int, int]]:
        """(transmitted, lost) per link, as a port-statistics reply reports them"""
        return {link_id: (link.transmitted, link.lost) for link_id, link in sorted(self.links.items())}

    def deliveries_to(self, host: str) -> int:
        return sum(1 for d in self.deliveries if d.host == host)

    def snapshot(self) -> Dict[str, Any]:
        return {
            'totals': self.conservation(),
            'switches': [s.to_dict() for _, s in sorted(self.switches.items())],
            'links': [link.to_dict() for _, link in sorted(self.links.items())],
            'control_plane_errors': int(self.counters['control_plane_errors'])
        }
