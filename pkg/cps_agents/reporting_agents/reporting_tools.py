"""
Run reporting
Summary builder, invariant audits, paired comparisons and batch statistics
"""

import math
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import binomtest, norm

from data_models import FlowKey, TrafficClass
from errors import ComparisonError
from cps_agents.reporting_agents.reporting_agent import SCHEMA_VERSION

ATTACK_VERDICTS = ('attack', 'attack-suspected')
DETECTION_HORIZON_STEPS = 100
MITIGATION_BOUND_US = 10_000

COMPARED_METRICS = (
    'steps',
    'detection_latency',
    'time_to_mitigate',
    'false_alarm_rate',
    'attack_alarm_rate',
    'alert_latency_steps',
    'control_cost',
    'packets_delivered',
    'packets_sinkholed',
    'mean_control_delay_us',
    'mean_actuation_delay_us',
    'missing_steps',
    'alerts',
    'transitions',
    'verdicts',
)


def _of_type(records: Iterable[Dict[str, Any]], record_type: str) -> List[Dict[str, Any]]:
    return [r for r in records if r.get('type') == record_type]


def _inside(t: int, windows: Sequence[Tuple[int, int]]) -> bool:
    return any(start <= t <= stop for start, stop in windows)


def _rate(hits: int, total: int) -> Optional[float]:
    return hits / total if total else None


def _mean(values: List[float]) -> Optional[float]:
    return float(sum(values) / len(values)) if values else None


def truth_label(truth: Dict[str, Any]) -> str:
    if truth.get('attacks'):
        return 'attack'
    if truth.get('faults'):
        return 'fault'
    return 'clean'


def verdict_label(verdict: Optional[str]) -> str:
    if verdict in ATTACK_VERDICTS:
        return 'attack'
    if verdict == 'fault':
        return 'fault'
    return 'clean'


def summarize_records(records: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """
    Build the run summary from the record stream alone

    Args:
        records: Records in emission order (header first)

    Returns:
        Summary dictionary; recomputing it from the written records gives the same result
    """
    header = _of_type(records, 'run')[0]
    steps = _of_type(records, 'step')
    truths = _of_type(records, 'truth')
    truth = truths[0] if truths else {'attacks': [], 'faults': []}
    networks = _of_type(records, 'network')
    network = networks[0] if networks else {}
    verdicts = _of_type(records, 'verdict')
    alerts = _of_type(records, 'alert')
    transitions = _of_type(records, 'transition')
    rules = _of_type(records, 'rule')

    attack_windows = [(a['start_us'], a['stop_us']) for a in truth['attacks']]
    fault_windows = [(f['at_us'], f['restore_us'] if f['restore_us'] is not None else header['duration_us'])
                     for f in truth['faults']]
    clean_scored = [s for s in steps if s['g'] is not None
                    and not _inside(s['t'], attack_windows) and not _inside(s['t'], fault_windows)]
    attack_scored = [s for s in steps if s['g'] is not None and _inside(s['t'], attack_windows)]

    attack_start = min((start for start, _ in attack_windows), default=None)
    start_step = None
    if attack_start is not None:
        start_step = next((s['k'] for s in steps if s['t'] >= attack_start), None)

    detection_latency = None
    time_to_mitigate = None
    alert_latency = None
    if start_step is not None:
        first = next((v for v in verdicts if v['verdict'] in ATTACK_VERDICTS and v['t'] >= attack_start), None)
        if first is not None:
            detection_latency = first['alert_step'] - start_step
            installs = [r['t'] for r in rules if r['op'] == 'install' and r['cause'] == f"verdict:{first['id']}"]
            if installs:
                time_to_mitigate = max(installs) - first['t']
        raised = next((a for a in alerts if a['kind'] == 'physical-anomaly' and a['t'] >= attack_start), None)
        if raised is not None:
            alert_latency = raised['step'] - start_step

    Q = np.asarray(header['Q'], dtype=float)
    R = np.asarray(header['R'], dtype=float)
    cost = 0.0
    for s in steps:
        x = np.asarray(s['x'], dtype=float)
        u = np.asarray(s['u_applied'], dtype=float)
        cost += float(x @ Q @ x) + float(u @ R @ u)

    decided = next((v['verdict'] for v in verdicts if v['verdict'] != 'nominal'), None)
    truth_kind = truth_label(truth)
    predicted = verdict_label(decided)
    totals = network.get('totals', {})

    return {
        'schema': SCHEMA_VERSION,
        'scenario': header['scenario'],
        'seed': header['seed'],
        'topology': header['topology'],
        'duration_us': header['duration_us'],
        'steps': len(steps),
        'detection_latency': detection_latency,
        'time_to_mitigate': time_to_mitigate,
        'false_alarm_rate': _rate(sum(1 for s in clean_scored if s['alarm']), len(clean_scored)),
        'attack_alarm_rate': _rate(sum(1 for s in attack_scored if s['alarm']), len(attack_scored)),
        'alert_latency_steps': alert_latency,
        'control_cost': cost,
        'packets_delivered': totals.get('delivered', 0),
        'packets_sinkholed': network.get('sinkholed', 0),
        'mean_control_delay_us': _mean([s['sensor_delay_us'] for s in steps if s['sensor_delay_us'] is not None]),
        'mean_actuation_delay_us': _mean([s['actuation_delay_us'] for s in steps
                                          if s['actuation_delay_us'] is not None]),
        'missing_steps': sum(1 for s in steps if s['missing']),
        'alerts': len(alerts),
        'transitions': len(transitions),
        'verdicts': len(verdicts),
        'verdict_confusion': {'truth': truth_kind, 'verdict': predicted, 'correct': truth_kind == predicted},
        'ground_truth': [a['kind'] for a in truth['attacks']] + ['link-failure'] * len(truth['faults']),
        'audits': {r['name']: r['passed'] for r in _of_type(records, 'audit')},
    }


# Audits

def audit_conservation(totals: Dict[str, int]) -> List[str]:
    """Every injected packet is delivered, dropped in a category, buffered or in flight"""
    if totals.get('balanced'):
        return []
    accounted = {k: v for k, v in totals.items() if k not in ('injected', 'balanced')}
    return [f"injected {totals.get('injected')} != accounted {sum(accounted.values())} ({accounted})"]


def audit_class_monotonicity(transitions: Sequence[Dict[str, Any]]) -> List[str]:
    """Escalation moves one level at a time; the only way down is to legitimate on a verdict"""
    problems = []
    current: Dict[str, str] = {}
    for t in transitions:
        flow, old, new = t['flow'], t['from'], t['to']
        expected = current.get(flow, TrafficClass.LEGITIMATE.value)
        if old != expected:
            problems.append(f"transition {t['id']} of {flow} starts from {old}, flow was {expected}")
        old_rank, new_rank = TrafficClass(old).rank, TrafficClass(new).rank
        upward = new_rank == old_rank + 1
        cleared = new == TrafficClass.LEGITIMATE.value and old_rank > 0 and str(t['cause']).startswith('verdict:')
        if not (upward or cleared):
            problems.append(f"transition {t['id']} of {flow} skips or reverses order: {old} -> {new}")
        current[flow] = new
    return problems


def _ack_identity(ack: Dict[str, Any]) -> Tuple:
    return (ack['action'], ack['flow_key'], ack['at'], ack.get('verdict'), ack.get('transition_id'))


def audit_ack_pairing(transitions: Sequence[Dict[str, Any]], sent: Sequence[Dict[str, Any]],
                      received: Sequence[Dict[str, Any]]) -> List[str]:
    """One ack per transition, and the controller receives acks in the order they were sent"""
    problems = []
    ids = [t['id'] for t in transitions]
    acked: Dict[int, int] = {}
    for ack in sent:
        tid = ack.get('transition_id')
        if tid is None:
            continue
        if tid not in ids:
            problems.append(f'ack for unknown transition {tid}')
        acked[tid] = acked.get(tid, 0) + 1
    for tid in ids:
        if acked.get(tid, 0) != 1:
            problems.append(f'transition {tid} has {acked.get(tid, 0)} acks')
    sent_order = [_ack_identity(a) for a in sent]
    received_order = [_ack_identity(a) for a in received]
    if received_order != sent_order[:len(received_order)]:
        problems.append('received acks are not an in-order prefix of sent acks')
    return problems


def audit_mitigation_completeness(transitions: Sequence[Dict[str, Any]], deliveries: Sequence[Dict[str, Any]],
                                  bound_us: int = MITIGATION_BOUND_US) -> List[str]:
    """
    No packet of a malicious flow reaches its original destination later
    than `bound_us` after the classification, until it is cleared again
    """
    problems = []
    for t in transitions:
        if t['to'] != TrafficClass.MALICIOUS.value:
            continue
        key = FlowKey.parse(t['flow'])
        cleared_at = next((c['t'] for c in transitions
                           if c['flow'] == t['flow'] and c['t'] >= t['t'] and c['id'] > t['id']
                           and c['to'] == TrafficClass.LEGITIMATE.value), None)
        late = [d for d in deliveries
                if d['flow_key'] == t['flow'] and d['host'] == key.dst and d['at'] > t['t'] + bound_us
                and (cleared_at is None or d['at'] <= cleared_at)]
        if late:
            problems.append(f"{len(late)} packets of {t['flow']} reached {key.dst} after sinkholing")
    return problems


# Paired comparison

def compare_runs(baseline: Dict[str, Any], treatment: Dict[str, Any]) -> pd.DataFrame:
    """
    Per-metric deltas between two run summaries

    Args:
        baseline: Summary of the reference run
        treatment: Summary of the run under test

    Returns:
        DataFrame with metric, baseline, treatment, delta, sign and percent columns
    """
    if baseline.get('schema') != treatment.get('schema') or set(baseline) != set(treatment):
        raise ComparisonError('summaries have different schemas')
    if baseline.get('topology') != treatment.get('topology'):
        raise ComparisonError('runs use different topologies')
    if baseline.get('duration_us') != treatment.get('duration_us'):
        raise ComparisonError(
            f"runs differ in duration ({baseline.get('duration_us')} vs {treatment.get('duration_us')})"
        )

    rows = []
    for metric in COMPARED_METRICS:
        a, b = baseline.get(metric), treatment.get(metric)
        if a is None or b is None:
            delta = percent = None
            sign = None
        else:
            delta = b - a
            sign = '+' if delta > 0 else '-' if delta < 0 else '0'
            percent = (delta / abs(a) * 100.0) if a else (0.0 if delta == 0 else None)
        rows.append({'metric': metric, 'baseline': a, 'treatment': b,
                     'delta': delta, 'sign': sign, 'percent': percent})
    return pd.DataFrame(rows, columns=['metric', 'baseline', 'treatment', 'delta', 'sign', 'percent'])


# Batch statistics

def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial rate"""
    if trials == 0:
        return 0.0, 1.0
    interval = binomtest(successes, trials).proportion_ci(confidence_level=confidence, method='wilson')
    return float(interval.low), float(interval.high)


def two_proportion_test(hits_a: int, n_a: int, hits_b: int, n_b: int) -> Dict[str, float]:
    """
    Pooled two-sided z-test for equal proportions

    Returns:
        difference (b - a), z statistic and p-value
    """
    if n_a == 0 or n_b == 0:
        raise ValueError('both samples need at least one trial')
    p_a, p_b = hits_a / n_a, hits_b / n_b
    pooled = (hits_a + hits_b) / (n_a + n_b)
    variance = pooled * (1 - pooled) * (1 / n_a + 1 / n_b)
    if variance == 0:
        return {'difference': p_b - p_a, 'z': 0.0, 'p_value': 1.0}
    z = (p_b - p_a) / math.sqrt(variance)
    return {'difference': p_b - p_a, 'z': z, 'p_value': float(2 * norm.sf(abs(z)))}


def detected(summary: Dict[str, Any], horizon: int = DETECTION_HORIZON_STEPS) -> bool:
    latency = summary.get('alert_latency_steps')
    return latency is not None and 0 <= latency <= horizon


def aggregate_batch(summaries: Sequence[Dict[str, Any]], confidence: float = 0.95) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """
    Per-seed table and pooled rates for a batch of runs

    Returns:
        (per-seed DataFrame, aggregate dictionary with Wilson intervals and the confusion matrix)
    """
    table = pd.DataFrame([
        {**{metric: s.get(metric) for metric in COMPARED_METRICS},
         'seed': s['seed'],
         'truth': s['verdict_confusion']['truth'],
         'verdict': s['verdict_confusion']['verdict'],
         'detected': detected(s)}
        for s in summaries
    ])
    n = len(summaries)
    hits = int(sum(detected(s) for s in summaries))
    verdict_hits = int(sum(s['verdict_confusion']['correct'] for s in summaries))
    alarms = [s['false_alarm_rate'] for s in summaries if s['false_alarm_rate'] is not None]
    confusion = pd.crosstab(table['truth'], table['verdict']) if n else pd.DataFrame()

    aggregate = {
        'runs': n,
        'detection_rate': _rate(hits, n),
        'detection_ci': list(wilson_interval(hits, n, confidence)),
        'detections': hits,
        'verdict_accuracy': _rate(verdict_hits, n),
        'verdict_accuracy_ci': list(wilson_interval(verdict_hits, n, confidence)),
        'mean_false_alarm_rate': _mean(alarms),
        'confusion': {truth: {verdict: int(count) for verdict, count in row.items()}
                      for truth, row in confusion.to_dict(orient='index').items()},
    }
    return table, aggregate
