import numpy as np
import pytest

from data_models import (
    AlertKind,
    AlertSignal,
    BehaviorEstimate,
    FlowKey,
    FlowRecord,
    FrameDigest,
    ProbeReport,
    Proto,
    StateSpaceModel,
    TrafficClass,
    Verdict,
)
from errors import DimensionError, InsufficientExcitationError, InsufficientSamplesError
from orchestrator import ScenarioOrchestrator
from cps_agents.pn_agents.pn_tools import (
    EVIDENCE_RULES,
    EvidenceContext,
    NetworkEvidence,
    TransactionHistory,
    correlate_and_verify,
    identify_behavior,
    ingest_probe_report,
    loss_rates,
)
from cps_agents.scada_agents.scada_tools import RegisterCodec, pack_measurement
from conftest import edit_config

SENSOR = FlowKey('plant', 'ctrl', Proto.SCADA)
ACTUATION = FlowKey('ctrl', 'plant', Proto.SCADA)
FLOOD = FlowKey('attacker', 'ctrl', Proto.OTHER)
RULES = list(EVIDENCE_RULES)


@pytest.fixture
def context():
    codec = RegisterCodec()
    return EvidenceContext(known_pairs={('plant', 'ctrl'), ('ctrl', 'plant')},
                           sensor_codec=codec, actuation_codec=codec)


def sensor_report(values, tid, switch='s6', at=0, flow=SENSOR):
    digest = FrameDigest(function='ReadHoldingRegistersResponse', transaction_id=tid,
                         registers=tuple(pack_measurement(values, RegisterCodec())))
    return ProbeReport(flow, f'probe:{switch}', switch, at, digest=digest)


def test_clean_reports_raise_no_suspicion(context):
    flows = {}
    for tid in range(20):
        outcome = ingest_probe_report(sensor_report([0.3], tid), flows, context, RULES)
        assert outcome.triggered == [] and outcome.transitions == []
    assert flows[SENSOR].suspicion == 0
    assert flows[SENSOR].last_seen == 0


def test_envelope_rule(context):
    outcome = ingest_probe_report(sensor_report([30.0], 1), {}, context, RULES)
    assert outcome.triggered == ['envelope']


def test_duplicate_transaction_is_per_switch(context):
    flows = {}
    assert ingest_probe_report(sensor_report([0.1], 5, 's1'), flows, context, RULES).triggered == []
    assert ingest_probe_report(sensor_report([0.1], 5, 's6'), flows, context, RULES).triggered == []
    assert ingest_probe_report(sensor_report([0.1], 5, 's6'), flows, context, RULES).triggered == [
        'duplicate-transaction']


def test_transaction_history_forgets_old_ids():
    history = TransactionHistory(size=2)
    for tid in (1, 2, 3):
        assert not history.check_and_add(SENSOR, 's6', tid)
    assert not history.check_and_add(SENSOR, 's6', 1)
    assert history.check_and_add(SENSOR, 's6', 3)


def test_malformed_frames_and_unknown_pairs(context):
    report = ProbeReport(FlowKey('attacker', 'plant', Proto.SCADA), 'probe:s1', 's1', 0,
                         digest=FrameDigest(error='short-buffer'))
    outcome = ingest_probe_report(report, {}, context, RULES)
    assert outcome.triggered == ['malformed-frame', 'unknown-pair']
    assert not outcome.record.known
    assert outcome.record.evidence == {'malformed-frame': 1, 'unknown-pair': 1}


def test_suspicion_escalates_one_level_at_a_time(context):
    flows = {}
    seen = []
    for i in range(10):
        outcome = ingest_probe_report(ProbeReport(FLOOD, 'probe:s1', 's1', i), flows, context, RULES,
                                      tau_s=3, tau_m=10)
        for old, new in outcome.transitions:
            flows[FLOOD].traffic_class = new
            seen.append((i + 1, old, new))
    assert seen == [(3, TrafficClass.LEGITIMATE, TrafficClass.SUSPICIOUS),
                    (10, TrafficClass.SUSPICIOUS, TrafficClass.MALICIOUS)]


def test_large_jump_is_split_into_single_steps(context):
    flows = {}
    outcome = ingest_probe_report(ProbeReport(FLOOD, 'probe:s1', 's1', 0), flows, context, RULES,
                                  tau_s=1, tau_m=1)
    assert outcome.transitions == [(TrafficClass.LEGITIMATE, TrafficClass.SUSPICIOUS),
                                   (TrafficClass.SUSPICIOUS, TrafficClass.MALICIOUS)]


def test_evidence_without_escalation(context):
    flows = {}
    for i in range(5):
        outcome = ingest_probe_report(ProbeReport(FLOOD, 'probe:s1', 's1', i), flows, context, RULES,
                                      escalate=False)
        assert outcome.transitions == []
    assert flows[FLOOD].suspicion == 5


def test_rule_set_is_configurable(context):
    outcome = ingest_probe_report(ProbeReport(FLOOD, 'probe:s1', 's1', 0), {}, context, ['envelope'])
    assert outcome.triggered == []


def simulate_samples(a, b, c, steps, rng, noise=1e-3):
    x = 0.0
    samples = []
    for _ in range(steps):
        u = rng.normal()
        samples.append((u, c * x))
        x = a * x + b * u + noise * rng.normal()
    return samples


def test_identification_recovers_the_model(rng):
    estimate = identify_behavior(simulate_samples(0.9, 1.0, 1.0, 400, rng), [[1.0]])
    np.testing.assert_allclose(estimate.A_hat, [[0.9]], atol=0.01)
    np.testing.assert_allclose(estimate.B_hat, [[1.0]], atol=0.01)
    assert estimate.sample_count == 399
    assert estimate.residual_norm < 0.01


def test_identification_maps_back_through_the_output_matrix(rng):
    estimate = identify_behavior(simulate_samples(0.9, 1.0, 2.0, 400, rng), [[2.0]])
    np.testing.assert_allclose(estimate.A_hat, [[0.9]], atol=0.01)
    np.testing.assert_allclose(estimate.B_hat, [[1.0]], atol=0.01)


def test_identification_needs_samples_and_excitation(rng):
    with pytest.raises(InsufficientSamplesError):
        identify_behavior(simulate_samples(0.9, 1.0, 1.0, 20, rng), [[1.0]])
    constant = [(1.0, float(k)) for k in range(100)]
    with pytest.raises(InsufficientExcitationError):
        identify_behavior(constant, [[1.0]])


def test_output_space_estimate_is_compared_in_output_coordinates():
    model = StateSpaceModel(A=[[0.9, 0.1], [0.0, 0.5]], B=[[0.0], [1.0]], C=[[1.0, 0.0]],
                            W=np.eye(2) * 0.01, V=[[0.01]])
    exact = BehaviorEstimate(np.array([[0.9]]), np.array([[0.0]]), 100, 0.0, state_space=False)
    assert exact.deviation(model) == pytest.approx(0.0)
    off = BehaviorEstimate(np.array([[0.7]]), np.array([[0.0]]), 100, 0.0, state_space=False)
    assert off.deviation(model) == pytest.approx(0.2)
    with pytest.raises(DimensionError):
        BehaviorEstimate(np.array([[0.9]]), np.array([[0.0]]), 100, 0.0).deviation(model)


def test_identification_without_output_matrix_stays_in_output_space(rng):
    estimate = identify_behavior(simulate_samples(0.9, 1.0, 2.0, 400, rng))
    assert not estimate.state_space
    np.testing.assert_allclose(estimate.B_hat, [[2.0]], atol=0.02)
    model = StateSpaceModel(A=[[0.9]], B=[[1.0]], C=[[2.0]], W=[[0.01]], V=[[0.01]])
    assert estimate.deviation(model) < 0.02


def nominal_estimate(scalar_model, shift=0.0):
    return BehaviorEstimate(scalar_model.A + shift, scalar_model.B.copy(), 100, 0.1)


def flow_table(**classes):
    flows = {SENSOR: FlowRecord(SENSOR), ACTUATION: FlowRecord(ACTUATION)}
    for record in flows.values():
        record.hops = ('s1', 's2', 's3', 's6')
    for name, value in classes.items():
        setattr(flows[SENSOR], name, value)
    return flows


def evidence(down=(), failures=None, now=1_000_000):
    links = {SENSOR: ['plant-s1', 's1-s2', 's2-s3', 's3-s6', 'ctrl-s6'],
             ACTUATION: ['ctrl-s6', 's3-s6', 's2-s3', 's1-s2', 'plant-s1']}
    return NetworkEvidence(now, set(down), dict(failures or {}), links)


ALERT = AlertSignal(AlertKind.PHYSICAL_ANOMALY, 40.0, 100, str(SENSOR))


def test_alert_with_tampering_evidence_is_an_attack(scalar_model):
    result = correlate_and_verify(ALERT, flow_table(suspicion=2), nominal_estimate(scalar_model),
                                  scalar_model, evidence(), [SENSOR, ACTUATION])
    assert result.verdict is Verdict.ATTACK
    assert result.escalate == [(SENSOR, TrafficClass.MALICIOUS)]


def test_model_drift_alone_is_an_attack(scalar_model):
    result = correlate_and_verify(ALERT, flow_table(), nominal_estimate(scalar_model, 0.3),
                                  scalar_model, evidence(), [SENSOR, ACTUATION], delta=0.1)
    assert result.verdict is Verdict.ATTACK
    assert result.deviation == pytest.approx(0.3)
    assert result.escalate == [(SENSOR, TrafficClass.SUSPICIOUS), (ACTUATION, TrafficClass.SUSPICIOUS)]


def test_failed_link_without_tampering_is_a_fault(scalar_model):
    result = correlate_and_verify(ALERT, flow_table(), nominal_estimate(scalar_model),
                                  scalar_model, evidence(down={'s2-s3'}, failures={'s2-s3': 900_000}),
                                  [SENSOR, ACTUATION])
    assert result.verdict is Verdict.FAULT
    assert result.reroute == [SENSOR, ACTUATION]
    assert 's2-s3' in result.reason


def test_recently_restored_link_still_counts_as_fault_evidence(scalar_model):
    result = correlate_and_verify(ALERT, flow_table(), None, scalar_model,
                                  evidence(failures={'s1-s2': 500_000}), [SENSOR, ACTUATION])
    assert result.verdict is Verdict.FAULT
    assert result.reroute == []

    stale = correlate_and_verify(ALERT, flow_table(), None, scalar_model,
                                 evidence(failures={'s1-s2': 500_000}, now=5_000_000), [SENSOR, ACTUATION])
    assert stale.verdict is Verdict.ATTACK_SUSPECTED


def test_lossy_link_on_control_path_is_a_fault(scalar_model):
    lossy = evidence()
    lossy.loss_rates = {'s2-s3': 0.3, 's4-s5': 0.5}
    result = correlate_and_verify(ALERT, flow_table(), nominal_estimate(scalar_model),
                                  scalar_model, lossy, [SENSOR, ACTUATION])
    assert result.verdict is Verdict.FAULT
    assert result.reroute == [SENSOR, ACTUATION]
    assert result.degraded == ['s2-s3']
    assert 's2-s3 (loss 0.30)' in result.reason

    quiet = evidence()
    quiet.loss_rates = {'s2-s3': 0.01}
    result = correlate_and_verify(ALERT, flow_table(), None, scalar_model, quiet, [SENSOR, ACTUATION])
    assert result.verdict is Verdict.ATTACK_SUSPECTED


def test_loss_rates_between_counter_snapshots():
    before = {'s1-s2': (100, 5), 's2-s3': (40, 0)}
    after = {'s1-s2': (200, 35), 's2-s3': (45, 5), 's3-s6': (50, 0)}
    assert loss_rates(before, after, min_packets=10) == {'s1-s2': 0.3, 's3-s6': 0.0}


def test_unexplained_alert_is_a_suspected_attack(scalar_model):
    result = correlate_and_verify(ALERT, flow_table(), nominal_estimate(scalar_model, 0.05),
                                  scalar_model, evidence(), [SENSOR, ACTUATION], delta=0.1)
    assert result.verdict is Verdict.ATTACK_SUSPECTED
    assert result.escalate == [(SENSOR, TrafficClass.SUSPICIOUS), (ACTUATION, TrafficClass.SUSPICIOUS)]


def test_cleared_alert_is_nominal(scalar_model):
    cleared = AlertSignal(AlertKind.CLEARED, 5.0, 200, str(SENSOR))
    result = correlate_and_verify(cleared, flow_table(traffic_class=TrafficClass.SUSPICIOUS), None,
                                  scalar_model, evidence(), [SENSOR, ACTUATION])
    assert result.verdict is Verdict.NOMINAL
    assert result.deescalate == [SENSOR]


def wired(config):
    orchestrator = ScenarioOrchestrator(config)
    orchestrator.pn.start()
    orchestrator.engine.run_until(5_000)
    return orchestrator


def active_rule(orchestrator, switch, rule_id):
    return orchestrator.fabric.switches[switch].active_rule(rule_id)


def test_provisioning_installs_the_control_loop_paths(default_config):
    orchestrator = wired(default_config)
    pn = orchestrator.pn
    assert pn.flows[SENSOR].hops == ('s1', 's2', 's3', 's6')
    assert pn.flows[ACTUATION].hops == ('s6', 's3', 's2', 's1')
    ingress = active_rule(orchestrator, 's1', f'ingress:{SENSOR}@s1')
    assert ingress.cause == 'provision'
    assert ingress.actions[-1].arg == 's2'
    assert active_rule(orchestrator, 's6', f'egress:{FlowKey("pnc", "ctrl", Proto.CONTROL)}@s6') is not None


def test_suspected_attack_moves_both_control_flows_to_quarantine(default_config):
    orchestrator = wired(default_config)
    pn = orchestrator.pn
    verdict = pn.handle_alert(ALERT)
    orchestrator.engine.run_until(20_000)

    assert verdict is Verdict.ATTACK_SUSPECTED
    assert pn.flows[SENSOR].traffic_class is TrafficClass.SUSPICIOUS
    assert pn.flows[SENSOR].hops == ('s1', 's4', 's5', 's6')
    assert active_rule(orchestrator, 's1', f'ingress:{SENSOR}@s1').actions[-1].arg == 's4'
    mirror = active_rule(orchestrator, 's5', f'label:{pn.flows[SENSOR].current_label}@s5').actions[0]
    assert mirror.arg == 'probe:mbox'

    records = orchestrator.recorder.records
    transitions = [r for r in records if r['type'] == 'transition']
    assert [(r['flow'], r['to'], r['cause']) for r in transitions] == [
        (str(SENSOR), 'suspicious', 'verdict:1'), (str(ACTUATION), 'suspicious', 'verdict:1')]
    received = [r for r in records if r['type'] == 'ack_received']
    assert [r['transition_id'] for r in received] == [1, 2]
    assert all(r['action'] == 'rerouted-quarantine' for r in received)


def test_link_failure_then_alert_is_a_fault_and_reroutes(default_config):
    orchestrator = wired(default_config)
    orchestrator.fabric.inject_link_failure('s2-s3', 6_000)
    orchestrator.engine.run_until(8_000)
    pn = orchestrator.pn
    assert pn.down_links == {'s2-s3'}

    assert pn.handle_alert(ALERT) is Verdict.FAULT
    orchestrator.engine.run_until(12_000)
    assert pn.flows[SENSOR].hops == ('s1', 's4', 's5', 's6')
    assert pn.flows[SENSOR].traffic_class is TrafficClass.LEGITIMATE
    assert active_rule(orchestrator, 's1', f'ingress:{SENSOR}@s1').actions[-1].arg == 's4'
    assert active_rule(orchestrator, 's6', f'egress:{SENSOR}@s6').actions[-1].arg == 'ctrl'
    acks = [r for r in orchestrator.recorder.records if r['type'] == 'ack']
    assert [a['action'] for a in acks] == ['rerouted']


def test_lossy_link_then_alert_is_a_fault_and_avoids_the_link(default_config):
    def lossy_core(data):
        link = data['topology']['links'][1]
        assert (link['a'], link['b']) == ('s2', 's3')
        link['loss'] = 0.3
        data['controller']['hysteresis'] = 1000

    orchestrator = ScenarioOrchestrator(edit_config(default_config, lossy_core))
    pn = orchestrator.pn
    pn.start()
    orchestrator.plant.start()
    orchestrator.controller.start()
    orchestrator.engine.run_until(500_000)
    assert pn.recent_loss_rates()['s2-s3'] > 0.05
    assert pn.down_links == set()

    assert pn.handle_alert(ALERT) is Verdict.FAULT
    orchestrator.engine.run_until(520_000)
    assert pn.degraded_links == {'s2-s3'}
    assert orchestrator.fabric.links['s2-s3'].up
    assert pn.flows[SENSOR].hops == ('s1', 's4', 's5', 's6')
    assert pn.flows[ACTUATION].hops == ('s6', 's5', 's4', 's1')
    assert pn.flows[SENSOR].traffic_class is TrafficClass.LEGITIMATE
    assert active_rule(orchestrator, 's1', f'ingress:{SENSOR}@s1').actions[-1].arg == 's4'

    verdict = [r for r in orchestrator.recorder.records if r['type'] == 'verdict'][-1]
    assert 's2-s3 (loss' in verdict['reason']
    acks = [r for r in orchestrator.recorder.records if r['type'] == 'ack']
    assert [a['action'] for a in acks] == ['rerouted']


def test_probe_evidence_sinkholes_an_unknown_flow(default_config):
    orchestrator = wired(default_config)
    pn = orchestrator.pn
    for i in range(3):
        pn.handle_probe_report(ProbeReport(FLOOD, 'probe:s1', 's1', 5_000 + i))
    assert pn.flows[FLOOD].traffic_class is TrafficClass.SUSPICIOUS
    assert pn.flows[FLOOD].hops == ('s1', 's4', 's5', 's6')

    for i in range(7):
        pn.handle_probe_report(ProbeReport(FLOOD, 'probe:s1', 's1', 6_000 + i))
    orchestrator.engine.run_until(10_000)
    record = pn.flows[FLOOD]
    assert record.traffic_class is TrafficClass.MALICIOUS
    assert record.hops == ('s1', 's4')
    assert active_rule(orchestrator, 's1', f'ingress:{FLOOD}@s1').actions[-1].arg == 's4'
    assert active_rule(orchestrator, 's4', f'egress:{FLOOD}@s4').actions[-1].arg == 'sink'
    assert active_rule(orchestrator, 's6', f'egress:{FLOOD}@s6') is None
    purge = active_rule(orchestrator, 's5', f'purge:{FLOOD}:{pn.labels.label_for(("s1", "s4", "s5", "s6"))}@s5')
    assert purge is not None and purge.actions[0].type.value == 'drop'

    transitions = [r for r in orchestrator.recorder.records if r['type'] == 'transition']
    assert [(r['from'], r['to']) for r in transitions] == [('legitimate', 'suspicious'), ('suspicious', 'malicious')]
    assert all(r['cause'].startswith('transition:') for r in transitions)


def test_on_demand_identification_runs_at_alert_time(default_config):
    orchestrator = wired(default_config.model_copy(update={
        'pnctrl': default_config.pnctrl.model_copy(update={'identification_mode': 'on_demand'})}))
    assert orchestrator.pn.identify() is None
    assert orchestrator.pn.handle_alert(ALERT) is Verdict.ATTACK_SUSPECTED
