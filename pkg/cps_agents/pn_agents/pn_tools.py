"""
PN controller operations
Path lookup, path assignment, evidence rules, system identification and verdicts
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np

from data_models import (
    Action,
    ActionType,
    AlertKind,
    AlertSignal,
    BehaviorEstimate,
    FlowKey,
    FlowRecord,
    FlowRule,
    Match,
    PathEntry,
    ProbeReport,
    Proto,
    StateSpaceModel,
    TrafficClass,
    Verdict,
)
from errors import (
    ControlPlaneError,
    InsufficientExcitationError,
    InsufficientSamplesError,
    ScadaEncodingError,
)
from cps_agents.network_agents.network_tools import probe_id
from cps_agents.scada_agents.scada_tools import FunctionKind, RegisterCodec, unpack_measurement

logger = logging.getLogger(__name__)

PRIORITY_TRANSIT = 100
PRIORITY_INGRESS = 200
PRIORITY_EGRESS = 300
PRIORITY_PURGE = 400

QUARANTINE_MIDDLEBOX = 'middlebox'
QUARANTINE_THROTTLED = 'throttled'


class LabelRegistry:
    """Persistent hop-sequence -> 16-bit label map; labels are never reused"""

    def __init__(self, first: int = 1):
        self._labels: Dict[Tuple[str, ...], int] = {}
        self._next = first

    def label_for(self, hops: Sequence[str]) -> int:
        hops = tuple(hops)
        label = self._labels.get(hops)
        if label is None:
            if self._next > 0xFFFF:
                raise ControlPlaneError('16-bit path label space exhausted')
            label = self._next
            self._labels[hops] = label
            self._next += 1
        return label

    def __len__(self) -> int:
        return len(self._labels)


@dataclass
class PathTable:
    entries: Dict[Tuple[str, str], List[PathEntry]] = field(default_factory=dict)

    def paths(self, ingress: str, egress: str) -> List[PathEntry]:
        return self.entries.get((ingress, egress), [])

    def best(self, ingress: str, egress: str, traffic_class: TrafficClass) -> Optional[PathEntry]:
        for entry in self.paths(ingress, egress):
            if traffic_class in entry.class_eligibility:
                return entry
        return None

    def labels(self) -> Set[int]:
        return {e.label for entries in self.entries.values() for e in entries}


def path_latency(graph: nx.Graph, hops: Sequence[str]) -> int:
    return int(sum(graph.edges[u, v]['latency_us'] for u, v in zip(hops, hops[1:])))


def path_bottleneck(graph: nx.Graph, hops: Sequence[str]) -> int:
    if len(hops) < 2:
        return 0
    return int(min(graph.edges[u, v]['bandwidth_bps'] for u, v in zip(hops, hops[1:])))


def path_order_key(graph: nx.Graph, hops: Sequence[str]) -> Tuple[int, int, Tuple[str, ...]]:
    """Latency first, then fewer hops, then the hop names for a total order"""
    return (path_latency(graph, hops), len(hops), tuple(hops))


def k_best_paths(graph: nx.Graph, source: str, target: str, k: int) -> List[Tuple[str, ...]]:
    """
    Up to k loop-free paths in (latency, hops) order

    Wraps networkx.shortest_simple_paths and keeps drawing while paths tie
    with the k-th latency, so the hop-count tie-break is exact.
    """
    if k < 1:
        raise ValueError('k must be at least 1')
    if source == target:
        return [(source,)]
    if source not in graph or target not in graph or not nx.has_path(graph, source, target):
        return []

    collected: List[Tuple[str, ...]] = []
    for path in nx.shortest_simple_paths(graph, source, target, weight='latency_us'):
        if len(collected) >= k and path_latency(graph, path) > path_latency(graph, collected[k - 1]):
            break
        collected.append(tuple(path))
    collected.sort(key=lambda hops: path_order_key(graph, hops))
    return collected[:k]


def compute_paths(graph: nx.Graph, k: int, labels: Optional[LabelRegistry] = None,
                  middlebox_switch: Optional[str] = None, sinkhole_switch: Optional[str] = None,
                  quarantine_mode: str = QUARANTINE_MIDDLEBOX) -> PathTable:
    """
    Pre-compute the path table for every ordered switch pair

    Args:
        graph: Switch graph with latency_us and bandwidth_bps on each edge
        k: Paths per pair
        labels: Label registry, shared across recomputations
        middlebox_switch: Switch the middlebox host hangs off
        sinkhole_switch: Switch the sinkhole host hangs off
        quarantine_mode: 'middlebox' or 'throttled'

    Returns:
        PathTable with entries sorted by qos_score descending
    """
    labels = labels if labels is not None else LabelRegistry()
    table = PathTable()
    switches = sorted(graph.nodes)
    for ingress in switches:
        for egress in switches:
            paths = k_best_paths(graph, ingress, egress, k)
            if not paths:
                table.entries[(ingress, egress)] = []
                continue
            entries = []
            for hops in paths:
                latency = path_latency(graph, hops)
                entries.append(PathEntry(
                    label=labels.label_for(hops),
                    hops=hops,
                    latency_us=latency,
                    qos_score=(1.0 / latency) if latency > 0 else float('inf'),
                    bottleneck_bps=path_bottleneck(graph, hops),
                ))
            _mark_eligibility(entries, middlebox_switch, sinkhole_switch, quarantine_mode)
            table.entries[(ingress, egress)] = entries
    return table


def _mark_eligibility(entries: List[PathEntry], middlebox_switch: Optional[str],
                      sinkhole_switch: Optional[str], quarantine_mode: str) -> None:
    if quarantine_mode == QUARANTINE_THROTTLED:
        narrow = min(e.bottleneck_bps for e in entries)
        longest = max(len(e.hops) for e in entries if e.bottleneck_bps == narrow)
        quarantine = {id(e) for e in entries if e.bottleneck_bps == narrow and len(e.hops) == longest}
    else:
        quarantine = {id(e) for e in entries if middlebox_switch is not None and middlebox_switch in e.hops}

    for entry in entries:
        eligible = {TrafficClass.LEGITIMATE}
        if id(entry) in quarantine:
            eligible.add(TrafficClass.SUSPICIOUS)
        if sinkhole_switch is not None and entry.egress == sinkhole_switch:
            eligible.add(TrafficClass.MALICIOUS)
        entry.class_eligibility = frozenset(eligible)


@dataclass
class Assignment:
    """A routing decision and the edge rules implementing it"""
    flow_key: FlowKey
    traffic_class: TrafficClass
    entry: Optional[PathEntry]
    deliver_to: Optional[str]
    rules: List[Tuple[str, FlowRule]]

    @property
    def label(self) -> Optional[int]:
        return self.entry.label if self.entry else None

    @property
    def undeliverable(self) -> bool:
        return self.entry is None


def ingress_rule_id(key: FlowKey, switch: str) -> str:
    return f'ingress:{key}@{switch}'


def egress_rule_id(key: FlowKey, switch: str) -> str:
    return f'egress:{key}@{switch}'


def transit_rule_id(label: int, switch: str) -> str:
    return f'label:{label}@{switch}'


def purge_rule_id(key: FlowKey, label: int, switch: str) -> str:
    return f'purge:{key}:{label}@{switch}'


def assign_path(flow: FlowRecord, table: PathTable, host_switch: Dict[str, str],
                sinkhole_host: Optional[str] = None, middlebox_switch: Optional[str] = None,
                middlebox_probe: Optional[str] = None, cause: Optional[str] = None) -> Assignment:
    """
    Choose the path for a flow's class and build its rules

    Legitimate flows take the best path to their destination, suspicious
    ones the best quarantine path, malicious ones the best path to the
    sinkhole. Without an eligible path the ingress drops the flow.
    """
    key = flow.key
    ingress = host_switch[key.src]
    if flow.traffic_class is TrafficClass.MALICIOUS:
        deliver_to = sinkhole_host
    else:
        deliver_to = key.dst
    egress = host_switch.get(deliver_to) if deliver_to else None
    entry = table.best(ingress, egress, flow.traffic_class) if egress else None

    if entry is None:
        drop = FlowRule(ingress_rule_id(key, ingress), PRIORITY_INGRESS, Match.for_flow(key),
                        [Action(ActionType.DROP)], cause=cause)
        return Assignment(key, flow.traffic_class, None, None, [(ingress, drop)])

    mirror = key.proto is not Proto.CONTROL and flow.traffic_class is not TrafficClass.MALICIOUS
    hops = entry.hops
    rules: List[Tuple[str, FlowRule]] = []

    def probe_actions(switch: str) -> List[Action]:
        return [Action(ActionType.MIRROR, probe_id(switch))] if mirror else []

    if len(hops) == 1:
        rules.append((hops[0], FlowRule(
            egress_rule_id(key, hops[0]), PRIORITY_EGRESS, Match.for_flow(key),
            probe_actions(hops[0]) + [Action(ActionType.FORWARD, deliver_to)], cause=cause)))
        return Assignment(key, flow.traffic_class, entry, deliver_to, rules)

    rules.append((hops[0], FlowRule(
        ingress_rule_id(key, hops[0]), PRIORITY_INGRESS, Match.for_flow(key),
        probe_actions(hops[0]) + [Action(ActionType.SET_LABEL, entry.label), Action(ActionType.FORWARD, hops[1])],
        cause=cause)))
    for i in range(1, len(hops) - 1):
        switch = hops[i]
        actions = [Action(ActionType.FORWARD, hops[i + 1])]
        if switch == middlebox_switch and middlebox_probe:
            actions.insert(0, Action(ActionType.MIRROR, middlebox_probe))
        rules.append((switch, FlowRule(
            transit_rule_id(entry.label, switch), PRIORITY_TRANSIT, Match(label=entry.label), actions, cause=cause)))
    rules.append((hops[-1], FlowRule(
        egress_rule_id(key, hops[-1]), PRIORITY_EGRESS, Match.for_flow(key),
        probe_actions(hops[-1]) + [Action(ActionType.FORWARD, deliver_to)], cause=cause)))
    return Assignment(key, flow.traffic_class, entry, deliver_to, rules)


def purge_rules(key: FlowKey, old_label: int, old_hops: Sequence[str], cause: Optional[str] = None) -> List[Tuple[str, FlowRule]]:
    """Drop rules for packets of a flow still carrying an abandoned label"""
    return [
        (switch, FlowRule(purge_rule_id(key, old_label, switch), PRIORITY_PURGE,
                          Match.for_flow(key, label=old_label), [Action(ActionType.DROP)], cause=cause))
        for switch in old_hops[1:]
    ]


class TransactionHistory:
    """Recently seen transaction ids per (flow, switch)"""

    def __init__(self, size: int = 1024):
        self.size = size
        self._order: Dict[Tuple[str, str], Deque[int]] = {}
        self._seen: Dict[Tuple[str, str], Set[int]] = {}

    def check_and_add(self, flow_key: FlowKey, switch: str, tid: int) -> bool:
        """True if tid was already seen here"""
        slot = (str(flow_key), switch)
        order = self._order.setdefault(slot, deque())
        seen = self._seen.setdefault(slot, set())
        if tid in seen:
            return True
        order.append(tid)
        seen.add(tid)
        if len(order) > self.size:
            seen.discard(order.popleft())
        return False


@dataclass
class EvidenceContext:
    known_pairs: Set[Tuple[str, str]]
    sensor_codec: RegisterCodec
    actuation_codec: RegisterCodec
    measurement_envelope: float = 25.0
    actuation_envelope: float = 25.0
    history: TransactionHistory = field(default_factory=TransactionHistory)


def _malformed_frame(report: ProbeReport, ctx: EvidenceContext) -> bool:
    return report.flow_key.proto is Proto.SCADA and report.digest is not None and report.digest.malformed


def _unknown_pair(report: ProbeReport, ctx: EvidenceContext) -> bool:
    return (report.flow_key.src, report.flow_key.dst) not in ctx.known_pairs


def _outside_envelope(report: ProbeReport, ctx: EvidenceContext) -> bool:
    digest = report.digest
    if digest is None or digest.malformed:
        return False
    if digest.function == FunctionKind.READ_HOLDING_RESPONSE.value:
        codec, bound = ctx.sensor_codec, ctx.measurement_envelope
    elif digest.function == FunctionKind.WRITE_MULTIPLE_REQUEST.value:
        codec, bound = ctx.actuation_codec, ctx.actuation_envelope
    else:
        return False
    try:
        values = unpack_measurement(digest.registers, codec)
    except ScadaEncodingError:
        return False
    return bool(np.any(np.abs(values) > bound))


def _duplicate_transaction(report: ProbeReport, ctx: EvidenceContext) -> bool:
    digest = report.digest
    if digest is None or digest.malformed or digest.transaction_id is None:
        return False
    return ctx.history.check_and_add(report.flow_key, report.switch, digest.transaction_id)


EvidenceRule = Callable[[ProbeReport, EvidenceContext], bool]

EVIDENCE_RULES: Dict[str, EvidenceRule] = {
    'malformed-frame': _malformed_frame,
    'unknown-pair': _unknown_pair,
    'envelope': _outside_envelope,
    'duplicate-transaction': _duplicate_transaction,
}


@dataclass
class ProbeOutcome:
    record: FlowRecord
    triggered: List[str]
    transitions: List[Tuple[TrafficClass, TrafficClass]]


def escalation_steps(current: TrafficClass, target: TrafficClass) -> List[Tuple[TrafficClass, TrafficClass]]:
    """One-level steps from current up to target; empty if target is not higher"""
    order = list(TrafficClass)
    steps = []
    for rank in range(current.rank, target.rank):
        steps.append((order[rank], order[rank + 1]))
    return steps


def ingest_probe_report(report: ProbeReport, flows: Dict[FlowKey, FlowRecord], ctx: EvidenceContext,
                        rule_names: Iterable[str], tau_s: int = 3, tau_m: int = 10,
                        escalate: bool = True) -> ProbeOutcome:
    """
    Apply the evidence rules to one report

    Each triggered rule adds one to the flow's suspicion. Crossing tau_s
    makes the flow suspicious, crossing tau_m malicious, one level at a time.
    The caller applies the returned transitions.
    """
    record = flows.get(report.flow_key)
    if record is None:
        record = FlowRecord(key=report.flow_key,
                            known=(report.flow_key.src, report.flow_key.dst) in ctx.known_pairs)
        flows[report.flow_key] = record
    record.last_seen = max(record.last_seen, report.observed_at)

    triggered = []
    for name in rule_names:
        if EVIDENCE_RULES[name](report, ctx):
            triggered.append(name)
            record.suspicion += 1
            record.evidence[name] = record.evidence.get(name, 0) + 1

    transitions: List[Tuple[TrafficClass, TrafficClass]] = []
    if escalate and triggered:
        if record.suspicion >= tau_m:
            target = TrafficClass.MALICIOUS
        elif record.suspicion >= tau_s:
            target = TrafficClass.SUSPICIOUS
        else:
            target = record.traffic_class
        transitions = escalation_steps(record.traffic_class, target)
    return ProbeOutcome(record, triggered, transitions)


def transitions_from_sequence(us: Sequence, ys: Sequence) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(y_k, u_k, y_k+1) triples from aligned input/output sequences"""
    triples = []
    for k in range(len(ys) - 1):
        triples.append((np.atleast_1d(np.asarray(ys[k], dtype=float)),
                        np.atleast_1d(np.asarray(us[k], dtype=float)),
                        np.atleast_1d(np.asarray(ys[k + 1], dtype=float))))
    return triples


def identify_from_transitions(transitions: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]],
                              C: Optional[np.ndarray] = None, min_samples: int = 50,
                              condition_limit: float = 1e8) -> BehaviorEstimate:
    """
    Least-squares fit of y_k+1 = Ay y_k + By u_k

    With a square invertible C the fit is mapped back to state coordinates,
    A = C^-1 Ay C and B = C^-1 By; otherwise the output-space matrices are
    returned.
    """
    if len(transitions) < min_samples:
        raise InsufficientSamplesError(f'{len(transitions)} samples, need {min_samples}')
    Y0 = np.vstack([t[0] for t in transitions])
    U = np.vstack([t[1] for t in transitions])
    Y1 = np.vstack([t[2] for t in transitions])
    p, m = Y0.shape[1], U.shape[1]

    centered = U - U.mean(axis=0)
    if np.linalg.matrix_rank(centered) < m:
        raise InsufficientExcitationError('input is not persistently exciting (constant input block)')
    regressors = np.hstack([Y0, U])
    condition = float(np.linalg.cond(regressors))
    if not np.isfinite(condition) or condition > condition_limit:
        raise InsufficientExcitationError(f'regressor condition number {condition:.3g} above {condition_limit:.3g}')

    theta, _, _, _ = np.linalg.lstsq(regressors, Y1, rcond=None)
    Ay, By = theta[:p].T, theta[p:].T
    residual = Y1 - regressors @ theta
    residual_norm = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))

    if C is not None:
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if C.shape[0] == C.shape[1] and abs(np.linalg.det(C)) > 1e-12:
            C_inv = np.linalg.inv(C)
            return BehaviorEstimate(C_inv @ Ay @ C, C_inv @ By, len(transitions), residual_norm)
    return BehaviorEstimate(Ay, By, len(transitions), residual_norm, state_space=False)


def identify_behavior(samples: Sequence[Tuple[Sequence[float], Sequence[float]]],
                      C: Optional[np.ndarray] = None, min_samples: int = 50,
                      condition_limit: float = 1e8) -> BehaviorEstimate:
    """
    Estimate (A, B) from consecutive (u_k, y_k) pairs

    Args:
        samples: Input/output pairs in step order
        C: Nominal output matrix
        min_samples: Minimum number of regression rows
        condition_limit: Largest accepted regressor condition number

    Returns:
        BehaviorEstimate; raises InsufficientSamplesError or InsufficientExcitationError
    """
    us = [s[0] for s in samples]
    ys = [s[1] for s in samples]
    return identify_from_transitions(transitions_from_sequence(us, ys), C, min_samples, condition_limit)


def loss_rates(before: Dict[str, Tuple[int, int]], after: Dict[str, Tuple[int, int]],
               min_packets: int = 10) -> Dict[str, float]:
    """
    Per-link loss ratio between two (transmitted, lost) counter snapshots

    Links that carried fewer than `min_packets` in between are left out.
    """
    rates = {}
    for link_id, (sent, lost) in after.items():
        sent_before, lost_before = before.get(link_id, (0, 0))
        if sent - sent_before >= min_packets:
            rates[link_id] = (lost - lost_before) / (sent - sent_before)
    return rates


@dataclass
class NetworkEvidence:
    """What the PN controller knows about the fabric when an alert arrives"""
    now: int
    down_links: Set[str]
    last_failure: Dict[str, int]
    control_path_links: Dict[FlowKey, List[str]]
    fault_window_us: int = 1_000_000
    loss_rates: Dict[str, float] = field(default_factory=dict)
    loss_threshold: float = 0.05

    def lossy(self, link: str) -> bool:
        return self.loss_rates.get(link, 0.0) >= self.loss_threshold

    def lossy_links(self, flow_key: FlowKey) -> List[str]:
        return [link for link in self.control_path_links.get(flow_key, []) if self.lossy(link)]

    def fault_links(self, flow_key: FlowKey) -> List[str]:
        links = self.control_path_links.get(flow_key, [])
        return [link for link in links
                if link in self.down_links
                or self.now - self.last_failure.get(link, -10 ** 18) <= self.fault_window_us
                or self.lossy(link)]

    def crosses_failed_link(self, flow_key: FlowKey) -> bool:
        return any(link in self.down_links or self.lossy(link)
                   for link in self.control_path_links.get(flow_key, []))


@dataclass
class Correlation:
    verdict: Verdict
    escalate: List[Tuple[FlowKey, TrafficClass]] = field(default_factory=list)
    reroute: List[FlowKey] = field(default_factory=list)
    deescalate: List[FlowKey] = field(default_factory=list)
    degraded: List[str] = field(default_factory=list)
    deviation: Optional[float] = None
    reason: str = ''


def correlate_and_verify(alert: AlertSignal, flows: Dict[FlowKey, FlowRecord],
                         behavior: Optional[BehaviorEstimate], nominal: StateSpaceModel,
                         evidence: NetworkEvidence, control_flows: Sequence[FlowKey],
                         delta: float = 0.1) -> Correlation:
    """
    Decide between nominal, fault and attack for one supervisor alert

    Network evidence of tampering (suspicion on a control flow, or an
    identified model off the nominal one by more than delta) means attack.
    Failed, recently failed or lossy links on the control path without such
    evidence mean fault. An alert with neither is treated as a suspected
    attack.
    """
    deviation = behavior.deviation(nominal) if behavior is not None else None
    present = [key for key in control_flows if key in flows]

    if alert.kind is AlertKind.CLEARED:
        cleared = [key for key in present if flows[key].traffic_class is not TrafficClass.LEGITIMATE]
        return Correlation(Verdict.NOMINAL, deescalate=cleared, deviation=deviation, reason='alert cleared')

    tampered = [key for key in present if flows[key].suspicion > 0]
    drifted = deviation is not None and deviation > delta
    if tampered or drifted:
        if tampered:
            targets = [(key, TrafficClass.MALICIOUS) for key in tampered]
            reason = 'suspicion on ' + ', '.join(str(k) for k in tampered)
        else:
            targets = [(key, list(TrafficClass)[min(flows[key].traffic_class.rank + 1, 2)])
                       for key in present]
            reason = f'identified model deviates by {deviation:.3f}'
        return Correlation(Verdict.ATTACK, escalate=targets, deviation=deviation, reason=reason)

    faulty = {key: evidence.fault_links(key) for key in present}
    if any(faulty.values()):
        reroute = [key for key in present if evidence.crosses_failed_link(key)]
        links = sorted({link for found in faulty.values() for link in found})
        degraded = sorted({link for key in present for link in evidence.lossy_links(key)})
        described = [f'{link} (loss {evidence.loss_rates[link]:.2f})' if link in degraded else link
                     for link in links]
        return Correlation(Verdict.FAULT, reroute=reroute, degraded=degraded, deviation=deviation,
                           reason='link failure on control path: ' + ', '.join(described))

    suspect = [(key, TrafficClass.SUSPICIOUS) for key in present
               if flows[key].traffic_class is TrafficClass.LEGITIMATE]
    return Correlation(Verdict.ATTACK_SUSPECTED, escalate=suspect, deviation=deviation,
                       reason='alert without network evidence')
