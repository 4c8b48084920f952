"""
PN controller agent
Routes flows by class, escalates on probe evidence and turns physical alerts into verdicts
"""

import json
import logging
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np

from data_models import (
    AlertSignal,
    BehaviorEstimate,
    FlowKey,
    FlowRecord,
    FlowRule,
    MitigationAck,
    MitigationAction,
    Packet,
    ProbeReport,
    Proto,
    StateSpaceModel,
    TrafficClass,
    Verdict,
)
from errors import IdentificationError, ScadaEncodingError
from sim_core import Event, EventEngine
from cps_agents.network_agents.network_agent import Fabric
from cps_agents.network_agents.network_tools import (
    FABRIC_TARGET,
    PN_CONTROLLER_TARGET,
    ControlPlaneFault,
    LinkStatus,
    PacketIn,
    RuleInstall,
    RuleRemove,
    attachment_switch,
    path_links,
    switch_graph,
)
from cps_agents.pn_agents.pn_tools import (
    Assignment,
    EvidenceContext,
    LabelRegistry,
    NetworkEvidence,
    PathTable,
    QUARANTINE_MIDDLEBOX,
    TransactionHistory,
    assign_path,
    compute_paths,
    correlate_and_verify,
    egress_rule_id,
    escalation_steps,
    identify_from_transitions,
    ingest_probe_report,
    loss_rates,
    purge_rule_id,
    purge_rules,
)
from cps_agents.scada_agents.scada_tools import FunctionKind, RegisterCodec, unpack_measurement

logger = logging.getLogger(__name__)

ACK_FOR_CLASS = {
    TrafficClass.MALICIOUS: MitigationAction.SINKHOLED,
    TrafficClass.SUSPICIOUS: MitigationAction.REROUTED_QUARANTINE,
    TrafficClass.LEGITIMATE: MitigationAction.REROUTED,
}

IDENTIFY_CONTINUOUS = 'continuous'
IDENTIFY_ON_DEMAND = 'on_demand'

PN_STATS_TARGET = 'pn-stats'


@dataclass
class StatsPoll:
    kind = 'stats-poll'


@dataclass
class PnSettings:
    """Tunables of the PN controller"""
    k_paths: int = 3
    tau_s: int = 3
    tau_m: int = 10
    delta: float = 0.1
    evidence_rules: Sequence[str] = ('malformed-frame', 'unknown-pair', 'envelope', 'duplicate-transaction')
    quarantine_mode: str = QUARANTINE_MIDDLEBOX
    mitigation_enabled: bool = True
    deescalate_on_clear: bool = False
    identification_mode: str = IDENTIFY_CONTINUOUS
    identification_window: int = 500
    identification_interval: int = 10
    min_samples: int = 50
    condition_limit: float = 1e8
    measurement_envelope: float = 25.0
    actuation_envelope: float = 25.0
    fault_evidence_window_us: int = 1_000_000
    loss_threshold: float = 0.05
    loss_min_packets: int = 10
    stats_interval_us: int = 100_000
    transaction_history: int = 1024
    known_pairs: Set[Tuple[str, str]] = field(default_factory=set)


class PnController:
    """
    The programmable-networking controller

    Holds the path table and the flow-class table. Every flow-table change
    goes out through the fabric's control plane, so it takes effect one
    control-plane delay after the decision.
    """

    def __init__(self, engine: EventEngine, fabric: Fabric, graph: nx.Graph, nominal: StateSpaceModel,
                 plant_host: str, controller_host: str, pn_host: str,
                 sensor_codec: RegisterCodec, actuation_codec: RegisterCodec,
                 middlebox_host: Optional[str] = None, sinkhole_host: Optional[str] = None,
                 settings: Optional[PnSettings] = None,
                 on_record: Optional[Callable[[Dict[str, Any]], None]] = None):
        self.engine = engine
        self.fabric = fabric
        self.graph = graph.copy()
        self.nominal = nominal
        self.plant_host = plant_host
        self.controller_host = controller_host
        self.pn_host = pn_host
        self.sensor_codec = sensor_codec
        self.actuation_codec = actuation_codec
        self.middlebox_host = middlebox_host
        self.sinkhole_host = sinkhole_host
        self.settings = settings or PnSettings()
        self.on_record = on_record

        self.host_switch = {n: attachment_switch(self.graph, n)
                            for n, d in self.graph.nodes(data=True) if d['kind'] == 'host'}
        self.middlebox_switch = self.host_switch.get(middlebox_host) if middlebox_host else None
        self.sinkhole_switch = self.host_switch.get(sinkhole_host) if sinkhole_host else None
        self.middlebox_probe = f'probe:{middlebox_host}' if middlebox_host else None
        self.controller_switch = self.host_switch[controller_host]

        self.sensor_flow = FlowKey(plant_host, controller_host, Proto.SCADA)
        self.actuation_flow = FlowKey(controller_host, plant_host, Proto.SCADA)
        self.control_flows = [self.sensor_flow, self.actuation_flow]
        known = set(self.settings.known_pairs) | {
            (plant_host, controller_host), (controller_host, plant_host),
            (controller_host, pn_host), (pn_host, controller_host),
        }
        self.evidence = EvidenceContext(
            known_pairs=known,
            sensor_codec=sensor_codec,
            actuation_codec=actuation_codec,
            measurement_envelope=self.settings.measurement_envelope,
            actuation_envelope=self.settings.actuation_envelope,
            history=TransactionHistory(self.settings.transaction_history),
        )

        self.labels = LabelRegistry()
        self.table = PathTable()
        self.flows: Dict[FlowKey, FlowRecord] = {}
        self.routed: Set[FlowKey] = set()
        self.installed: Dict[Tuple[str, str], FlowRule] = {}
        self.purges: Dict[FlowKey, Dict[int, List[str]]] = {}
        self.down_links: Set[str] = set()
        self.last_failure: Dict[str, int] = {}
        self.degraded_links: Set[str] = set()
        self.link_stats: Deque[Tuple[int, Dict[str, Tuple[int, int]]]] = deque()

        self._y_by_tid: 'OrderedDict[int, np.ndarray]' = OrderedDict()
        self._u_by_tid: 'OrderedDict[int, np.ndarray]' = OrderedDict()
        self.samples: Deque[Tuple[np.ndarray, np.ndarray, np.ndarray]] = deque(
            maxlen=self.settings.identification_window)
        self._new_samples = 0
        self.behavior: Optional[BehaviorEstimate] = None

        self.transition_count = 0
        self.verdict_count = 0
        self.no_eligible_path = 0
        self.control_plane_faults = 0
        self.verdicts: List[Tuple[int, Verdict]] = []

        engine.register(PN_CONTROLLER_TARGET, self._on_control_plane)
        engine.register(PN_STATS_TARGET, self._on_stats_poll)
        fabric.attach_host(pn_host, self._on_channel_packet)

    # Setup

    def start(self) -> None:
        """Build the path table and pre-provision the control loop's flows"""
        self.recompute_paths()
        provisioned = self.control_flows + [
            FlowKey(self.controller_host, self.pn_host, Proto.CONTROL),
            FlowKey(self.pn_host, self.controller_host, Proto.CONTROL),
        ]
        for key in provisioned:
            record = self.flows.setdefault(key, FlowRecord(key=key))
            self._route(record, cause='provision')
        self._poll_link_stats()
        logger.info('PN controller provisioned %d flows over %d labels', len(provisioned), len(self.labels))

    def recompute_paths(self) -> PathTable:
        self.table = compute_paths(
            switch_graph(self.graph), self.settings.k_paths, self.labels,
            self.middlebox_switch, self.sinkhole_switch, self.settings.quarantine_mode
        )
        return self.table

    # Messages

    def _on_control_plane(self, event: Event) -> None:
        message = event.payload
        if isinstance(message, ProbeReport):
            self.handle_probe_report(message)
        elif isinstance(message, PacketIn):
            self.handle_packet_in(message)
        elif isinstance(message, LinkStatus):
            self.handle_link_status(message)
        elif isinstance(message, ControlPlaneFault):
            self.control_plane_faults += 1
            logger.warning('control-plane fault at %s (%s): %s', message.switch, message.operation, message.reason)

    def _on_channel_packet(self, packet: Packet, now: int) -> None:
        if packet.proto is not Proto.CONTROL or packet.src != self.controller_host:
            return
        try:
            message = json.loads(packet.payload.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError):
            logger.debug('unreadable control-channel message dropped')
            return
        if message.get('message') == 'alert':
            self.handle_alert(AlertSignal.from_dict(message))

    def handle_packet_in(self, message: PacketIn) -> None:
        key = message.flow_key
        record = self.flows.get(key)
        if record is None:
            record = FlowRecord(key=key, last_seen=message.at,
                                known=(key.src, key.dst) in self.evidence.known_pairs)
            self.flows[key] = record
        if key in self.routed:
            return
        if key.src not in self.host_switch:
            logger.warning('packet-in for %s from unknown source host', key)
            return
        self._route(record, cause='packet-in')

    def handle_probe_report(self, report: ProbeReport) -> None:
        outcome = ingest_probe_report(
            report, self.flows, self.evidence, self.settings.evidence_rules,
            self.settings.tau_s, self.settings.tau_m, escalate=self.settings.mitigation_enabled
        )
        if outcome.triggered:
            logger.debug('evidence %s on %s at %s', outcome.triggered, report.flow_key, report.switch)
        for _, new_class in outcome.transitions:
            self._transition(outcome.record, new_class, cause='evidence')
        self._observe_for_identification(report)

    def handle_link_status(self, message: LinkStatus) -> None:
        a, b = message.endpoints
        self.graph.edges[a, b]['up'] = message.up
        if message.up:
            self.down_links.discard(message.link_id)
        else:
            self.down_links.add(message.link_id)
            self.last_failure[message.link_id] = message.at
        self.recompute_paths()
        logger.info('path table recomputed after link %s %s', message.link_id, 'up' if message.up else 'down')

    def _on_stats_poll(self, event: Event) -> None:
        self._poll_link_stats()

    def _poll_link_stats(self) -> None:
        """Snapshot the link counters; keep enough history to span the fault-evidence window"""
        now = self.engine.now
        self.link_stats.append((now, self.fabric.link_counters()))
        horizon = now - self.settings.fault_evidence_window_us
        while len(self.link_stats) > 1 and self.link_stats[1][0] <= horizon:
            self.link_stats.popleft()
        self.engine.schedule_in(self.settings.stats_interval_us, PN_STATS_TARGET, StatsPoll())

    def recent_loss_rates(self) -> Dict[str, float]:
        baseline = self.link_stats[0][1] if self.link_stats else {}
        return loss_rates(baseline, self.fabric.link_counters(), self.settings.loss_min_packets)

    def degrade_links(self, link_ids: Sequence[str]) -> None:
        """Take lossy links out of the path table; they stay up in the fabric"""
        marked = set(link_ids) - self.degraded_links
        if not marked:
            return
        for _, _, data in self.graph.edges(data=True):
            if data.get('link_id') in marked:
                data['degraded'] = True
        self.degraded_links |= marked
        self.recompute_paths()
        logger.info('path table recomputed without lossy links %s', ', '.join(sorted(marked)))

    def handle_alert(self, alert: AlertSignal) -> Verdict:
        """Correlate a supervisor alert with network evidence and act on the verdict"""
        now = self.engine.now
        if self.settings.identification_mode == IDENTIFY_ON_DEMAND:
            self.identify()

        evidence = NetworkEvidence(
            now=now,
            down_links=set(self.down_links),
            last_failure=dict(self.last_failure),
            control_path_links=self._control_path_links(),
            fault_window_us=self.settings.fault_evidence_window_us,
            loss_rates=self.recent_loss_rates(),
            loss_threshold=self.settings.loss_threshold,
        )
        result = correlate_and_verify(alert, self.flows, self.behavior, self.nominal, evidence,
                                      self.control_flows, self.settings.delta)
        self.verdict_count += 1
        verdict_id = self.verdict_count
        cause = f'verdict:{verdict_id}'
        self.verdicts.append((now, result.verdict))
        self._emit({
            'type': 'verdict', 't': now, 'id': verdict_id, 'verdict': result.verdict.value,
            'alert_kind': alert.kind.value, 'alert_step': alert.step, 'deviation': result.deviation,
            'reason': result.reason,
            'behavior': self.behavior.to_dict() if self.behavior else None,
        })
        logger.info('verdict %d at t=%d: %s (%s)', verdict_id, now, result.verdict.value, result.reason)

        transitions = 0
        rerouted: List[FlowKey] = []
        if self.settings.mitigation_enabled:
            if result.verdict is Verdict.NOMINAL:
                if self.settings.deescalate_on_clear:
                    for key in result.deescalate:
                        self._transition(self.flows[key], TrafficClass.LEGITIMATE, cause, result.verdict)
                        transitions += 1
            else:
                for key, target in result.escalate:
                    for _, new_class in escalation_steps(self.flows[key].traffic_class, target):
                        self._transition(self.flows[key], new_class, cause, result.verdict)
                        transitions += 1
                if result.degraded:
                    self.degrade_links(result.degraded)
                for key in result.reroute:
                    self._route(self.flows[key], cause)
                    rerouted.append(key)

        if transitions == 0 and result.verdict is not Verdict.NOMINAL:
            action = MitigationAction.REROUTED if rerouted else MitigationAction.NONE
            target = rerouted[0] if rerouted else self.sensor_flow
            self._send_ack(MitigationAck(action, str(target), now, result.verdict))
        return result.verdict

    # Routing

    def _transition(self, record: FlowRecord, new_class: TrafficClass, cause: str,
                    verdict: Optional[Verdict] = None) -> int:
        old_class = record.traffic_class
        if new_class is old_class:
            return 0
        now = self.engine.now
        self.transition_count += 1
        transition_id = self.transition_count
        record.traffic_class = new_class
        rule_cause = cause if cause.startswith('verdict:') else f'transition:{transition_id}'
        self._emit({
            'type': 'transition', 't': now, 'id': transition_id, 'flow': str(record.key),
            'from': old_class.value, 'to': new_class.value, 'cause': rule_cause,
            'suspicion': record.suspicion,
        })
        logger.info('flow %s %s -> %s (%s)', record.key, old_class.value, new_class.value, rule_cause)
        self._route(record, rule_cause)
        self._send_ack(MitigationAck(ACK_FOR_CLASS[new_class], str(record.key), now, verdict, transition_id))
        return transition_id

    def _route(self, record: FlowRecord, cause: str) -> Assignment:
        key = record.key
        old_label, old_hops = record.current_label, record.hops
        assignment = assign_path(record, self.table, self.host_switch, self.sinkhole_host,
                                 self.middlebox_switch, self.middlebox_probe, cause)
        new_hops = assignment.entry.hops if assignment.entry else ()

        if old_hops and (not new_hops or old_hops[-1] != new_hops[-1]):
            self._remove(old_hops[-1], egress_rule_id(key, old_hops[-1]), cause)
        if (record.traffic_class is TrafficClass.MALICIOUS and old_label is not None
                and old_label != assignment.label and len(old_hops) > 1):
            for switch, rule in purge_rules(key, old_label, old_hops, cause):
                self._install(switch, rule)
            self.purges.setdefault(key, {})[old_label] = list(old_hops[1:])
        purged = self.purges.get(key, {}).pop(assignment.label, None) if assignment.label is not None else None
        for switch in purged or ():
            self._remove(switch, purge_rule_id(key, assignment.label, switch), cause)

        for switch, rule in assignment.rules:
            self._install(switch, rule)

        record.current_label = assignment.label
        record.hops = new_hops
        record.ingress = self.host_switch.get(key.src)
        self.routed.add(key)
        if assignment.undeliverable:
            self.no_eligible_path += 1
            logger.warning('no eligible path for %s as %s; dropping at ingress', key, record.traffic_class.value)
        return assignment

    def _install(self, switch: str, rule: FlowRule) -> None:
        current = self.installed.get((switch, rule.rule_id))
        if (current is not None and rule.rule_id.startswith('label:')
                and current.actions == rule.actions and current.match == rule.match):
            return
        self.installed[(switch, rule.rule_id)] = rule
        self.engine.schedule_in(self.fabric.control_plane_delay_us, FABRIC_TARGET, RuleInstall(switch, rule))

    def _remove(self, switch: str, rule_id: str, cause: str) -> None:
        if self.installed.pop((switch, rule_id), None) is None:
            return
        self.engine.schedule_in(self.fabric.control_plane_delay_us, FABRIC_TARGET, RuleRemove(switch, rule_id, cause))

    def _control_path_links(self) -> Dict[FlowKey, List[str]]:
        links: Dict[FlowKey, List[str]] = {}
        for key in self.control_flows:
            record = self.flows.get(key)
            if record is None or not record.hops:
                continue
            deliver_to = self.sinkhole_host if record.traffic_class is TrafficClass.MALICIOUS else key.dst
            route = [key.src] + list(record.hops) + ([deliver_to] if deliver_to else [])
            links[key] = path_links(self.graph, route)
        return links

    # Acks and records

    def _send_ack(self, ack: MitigationAck) -> None:
        self._emit({'type': 'ack', 't': self.engine.now, **ack.to_dict()})
        payload = json.dumps(ack.to_dict(), sort_keys=True).encode('utf-8')
        self.fabric.send(self.pn_host, self.controller_host, Proto.CONTROL, payload)

    def _emit(self, record: Dict[str, Any]) -> None:
        if self.on_record:
            self.on_record(record)

    # System identification

    def _observe_for_identification(self, report: ProbeReport) -> None:
        digest = report.digest
        if digest is None or digest.malformed or report.switch != self.controller_switch:
            return
        tid = digest.transaction_id
        try:
            if report.flow_key == self.sensor_flow and digest.function == FunctionKind.READ_HOLDING_RESPONSE.value:
                if tid in self._y_by_tid:
                    return
                y = unpack_measurement(digest.registers, self.sensor_codec)
                self._remember(self._y_by_tid, tid, y)
                previous = (tid - 1) & 0xFFFF
                if previous in self._y_by_tid and previous in self._u_by_tid:
                    self.samples.append((self._y_by_tid[previous], self._u_by_tid[previous], y))
                    self._new_samples += 1
            elif report.flow_key == self.actuation_flow and digest.function == FunctionKind.WRITE_MULTIPLE_REQUEST.value:
                self._remember(self._u_by_tid, tid, unpack_measurement(digest.registers, self.actuation_codec))
        except ScadaEncodingError:
            return

        if (self.settings.identification_mode == IDENTIFY_CONTINUOUS
                and self._new_samples >= self.settings.identification_interval):
            self._new_samples = 0
            self.identify()

    @staticmethod
    def _remember(store: 'OrderedDict[int, np.ndarray]', tid: int, value: np.ndarray, keep: int = 64) -> None:
        store[tid] = value
        while len(store) > keep:
            store.popitem(last=False)

    def identify(self) -> Optional[BehaviorEstimate]:
        """Re-estimate (A, B) from the sample window; None when the data cannot support it"""
        if len(self.samples) < self.settings.min_samples:
            return self.behavior
        try:
            self.behavior = identify_from_transitions(
                list(self.samples), self.nominal.C, self.settings.min_samples, self.settings.condition_limit
            )
        except IdentificationError as exc:
            logger.debug('identification skipped: %s', exc)
            self.behavior = None
        return self.behavior

    def snapshot(self) -> Dict[str, Any]:
        return {
            'flows': [r.to_dict() for _, r in sorted(self.flows.items(), key=lambda kv: str(kv[0]))],
            'labels': len(self.labels),
            'transitions': self.transition_count,
            'verdicts': self.verdict_count,
            'no_eligible_path': self.no_eligible_path,
            'control_plane_faults': self.control_plane_faults,
            'identification_samples': len(self.samples),
            'degraded_links': sorted(self.degraded_links),
        }
