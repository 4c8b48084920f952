import json

import pandas as pd
import pytest

import orchestrator
from data_models import FlowKey, Proto
from errors import AuditFailure, ComparisonError
from orchestrator import (
    RECORDS_FILE,
    SUMMARY_FILE,
    TRACE_FILE,
    ScenarioOrchestrator,
    load_summary,
    main,
    run_batch,
    run_scenario,
)
from cps_agents.reporting_agents.reporting_tools import compare_runs, two_proportion_test
from conftest import edit_config, scenario_path, short_scenario

SENSOR = str(FlowKey('plant', 'ctrl', Proto.SCADA))
FLOOD = str(FlowKey('attacker', 'ctrl', Proto.OTHER))

NOMINAL_US = 2_000_000
SCENARIO_US = 3_000_000
ATTACK_START_US = 1_000_000
ATTACK_STOP_US = 2_500_000


def nominal(seed=None):
    config = short_scenario('default', NOMINAL_US)
    if seed is not None:
        config = config.model_copy(update={'seed': seed})
    return config


def attacked(name, **fields):
    return short_scenario(name, SCENARIO_US, ATTACK_START_US, ATTACK_STOP_US, **fields)


def of_type(records, record_type):
    return [r for r in records if r['type'] == record_type]


def write_config(path, config):
    path.write_text(config.model_dump_json(), encoding='utf-8')
    return path


def test_nominal_run():
    sim = ScenarioOrchestrator(nominal())
    result = sim.run()
    summary = result.summary
    assert result.failed_audits == []
    assert all(summary['audits'].values())
    assert summary['summary_recomputed']
    assert summary['steps'] == 199
    assert summary['missing_steps'] == 0
    assert summary['alerts'] == 0 and summary['verdicts'] == 0
    assert summary['detection_latency'] is None
    assert summary['verdict_confusion'] == {'truth': 'clean', 'verdict': 'clean', 'correct': True}
    assert summary['mean_control_delay_us'] > 0

    header = result.records[0]
    assert header['type'] == 'run' and header['tau'] == pytest.approx(18.307, abs=1e-3)
    assert sim.pn.behavior is not None
    assert sim.pn.behavior.deviation(sim.model) < 0.1


def slow_core(data):
    for link in data['topology']['links']:
        if link['a'].startswith('s') and link['b'].startswith('s'):
            link['latency_us'] = 2000
    data['controller']['missing_as_alarm'] = False


def test_late_measurements_are_missing_not_reused():
    sim = ScenarioOrchestrator(edit_config(nominal(), slow_core))
    summary = sim.run().summary
    steps = of_type(sim.recorder.records, 'step')
    assert summary['missing_steps'] == summary['steps'] == len(steps)
    assert all(s['y'] is None and s['g'] is None for s in steps)
    assert summary['alerts'] == 0 and summary['verdicts'] == 0
    assert summary['verdict_confusion']['correct']
    assert sim.controller.stale_frames >= summary['steps'] - 1


def test_same_seed_same_run():
    first = ScenarioOrchestrator(nominal(), trace=True)
    second = ScenarioOrchestrator(nominal(), trace=True)
    assert first.run().records == second.run().records
    assert first.engine.trace_lines == second.engine.trace_lines
    assert len(first.engine.trace_lines) == first.engine.stats.processed

    other = run_scenario(nominal(seed=2))
    assert of_type(other.records, 'step') != of_type(first.recorder.records, 'step')


def test_outputs_and_self_comparison(tmp_path):
    result = run_scenario(nominal(), tmp_path / 'a', trace=True)
    for name in (RECORDS_FILE, SUMMARY_FILE, TRACE_FILE):
        assert (tmp_path / 'a' / name).exists()
    assert load_summary(tmp_path / 'a') == json.loads(json.dumps(result.summary))

    lines = (tmp_path / 'a' / RECORDS_FILE).read_text(encoding='utf-8').splitlines()
    assert len(lines) == len(result.records)
    assert json.loads(lines[0])['type'] == 'run'

    deltas = compare_runs(result.summary, result.summary)
    known = deltas.dropna(subset=['delta'])
    assert (known['delta'] == 0).all()
    assert set(known['sign']) == {'0'}


def test_comparison_refuses_mismatched_runs():
    summary = run_scenario(nominal()).summary
    with pytest.raises(ComparisonError):
        compare_runs(summary, {**summary, 'duration_us': 1})
    with pytest.raises(ComparisonError):
        compare_runs(summary, {**summary, 'topology': 'other'})
    with pytest.raises(ComparisonError):
        compare_runs(summary, {k: v for k, v in summary.items() if k != 'steps'})


def test_cli_validate_and_schema_error(tmp_path, capsys):
    assert main(['validate', str(scenario_path('default'))]) == 0
    assert 'ok (default)' in capsys.readouterr().out

    text = scenario_path('default').read_text(encoding='utf-8').replace('"bandwidth_bps"', '"bandwith_bps"', 1)
    broken = tmp_path / 'broken.json'
    broken.write_text(text, encoding='utf-8')
    assert main(['validate', str(broken)]) == 2
    assert 'topology.links[0].bandwith_bps' in capsys.readouterr().err


def test_cli_run_and_compare(tmp_path):
    config_file = write_config(tmp_path / 'short.json', nominal())
    assert main(['run', str(config_file), '--out', str(tmp_path / 'a')]) == 0
    assert main(['run', str(config_file), '--seed', '3', '--out', str(tmp_path / 'b')]) == 0
    assert load_summary(tmp_path / 'b')['seed'] == 3

    deltas_file = tmp_path / 'deltas.csv'
    assert main(['compare', str(tmp_path / 'a'), str(tmp_path / 'b'), '--out', str(deltas_file)]) == 0
    deltas = pd.read_csv(deltas_file)
    assert 'control_cost' in set(deltas['metric'])


def test_cli_rejects_a_negative_seed(tmp_path, capsys):
    config_file = write_config(tmp_path / 'short.json', nominal())
    assert main(['run', str(config_file), '--seed', '-1', '--out', str(tmp_path / 'out')]) == 2
    assert "'seed'" in capsys.readouterr().err
    assert not (tmp_path / 'out' / SUMMARY_FILE).exists()


def test_cli_divergence_exit_code(tmp_path):
    config = edit_config(nominal(), lambda d: d['plant'].update(divergence_bound=1e-6))
    assert main(['run', str(write_config(tmp_path / 'unstable.json', config)), '--out', str(tmp_path / 'out')]) == 4


def test_cli_audit_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(orchestrator, 'audit_conservation', lambda totals: ['forced'])
    config_file = write_config(tmp_path / 'short.json', nominal())
    assert main(['run', str(config_file), '--out', str(tmp_path / 'out')]) == 3
    assert (tmp_path / 'out' / SUMMARY_FILE).exists()

    with pytest.raises(AuditFailure) as err:
        run_scenario(nominal())
    assert err.value.failed == ['conservation']
    assert run_scenario(nominal(), raise_on_audit=False).failed_audits == ['conservation']


def test_batch_is_independent_of_worker_count(tmp_path):
    config = short_scenario('default', 500_000)
    serial_table, serial = run_batch(config, seeds=2, jobs=1)
    parallel_table, parallel = run_batch(config, seeds=2, jobs=2, out_dir=tmp_path)
    pd.testing.assert_frame_equal(serial_table, parallel_table)
    assert serial == parallel
    assert list(serial_table['seed']) == [1, 2]
    assert serial['runs'] == 2
    assert (tmp_path / 'seed-1' / SUMMARY_FILE).exists()
    assert (tmp_path / orchestrator.BATCH_FILE).exists()


# Closed-loop scenarios

def sensor_transitions(records, flow=SENSOR):
    return [r for r in of_type(records, 'transition') if r['flow'] == flow]


@pytest.mark.slow
def test_watermarked_replay_is_detected():
    result = run_scenario(attacked('replay'))
    summary = result.summary
    assert summary['ground_truth'] == ['replay']
    assert summary['alert_latency_steps'] is not None and 0 <= summary['alert_latency_steps'] <= 100
    assert summary['detection_latency'] is not None
    assert summary['verdict_confusion']['correct']
    assert [r['to'] for r in sensor_transitions(result.records)][:1] == ['suspicious']


@pytest.mark.slow
def test_replay_with_recorded_ids_is_caught_by_probes():
    result = run_scenario(attacked('replay_preserve_ids'))
    transitions = sensor_transitions(result.records)
    assert transitions and transitions[0]['to'] == 'suspicious'
    assert transitions[0]['cause'].startswith('transition:')

    network = of_type(result.records, 'network')[0]
    sensor = next(f for f in network['pn']['flows'] if f['key'] == SENSOR)
    assert sensor['evidence'].get('duplicate-transaction', 0) >= 3
    replay = of_type(result.records, 'truth')[0]['attacks'][0]
    assert replay['actions'] <= 10


@pytest.mark.slow
def test_actuation_rewrite_is_detected():
    summary = run_scenario(attacked('mitm')).summary
    assert summary['ground_truth'] == ['mitm-rewrite']
    assert summary['alerts'] >= 1
    assert summary['verdict_confusion'] == {'truth': 'attack', 'verdict': 'attack', 'correct': True}


@pytest.mark.slow
def test_injected_bias_trips_the_envelope():
    result = run_scenario(attacked('fdi'))
    transitions = sensor_transitions(result.records)
    assert transitions and transitions[0]['to'] == 'suspicious'
    network = of_type(result.records, 'network')[0]
    sensor = next(f for f in network['pn']['flows'] if f['key'] == SENSOR)
    assert sensor['evidence'].get('envelope', 0) >= 3


@pytest.mark.slow
def test_flood_is_sinkholed():
    result = run_scenario(attacked('dos'))
    assert [r['to'] for r in sensor_transitions(result.records, FLOOD)] == ['suspicious', 'malicious']
    assert result.summary['packets_sinkholed'] > 0
    assert result.summary['audits']['mitigation-completeness']
    acks = [r for r in of_type(result.records, 'ack_received') if r['flow_key'] == FLOOD]
    assert [a['action'] for a in acks] == ['rerouted-quarantine', 'sinkholed']


@pytest.mark.slow
def test_unmitigated_flood_delays_the_loop():
    baseline = run_scenario(short_scenario('default', SCENARIO_US)).summary
    flooded = run_scenario(attacked('dos_unmitigated'))
    assert sensor_transitions(flooded.records, FLOOD) == []
    assert flooded.summary['packets_sinkholed'] == 0
    assert flooded.summary['mean_control_delay_us'] > baseline['mean_control_delay_us']


@pytest.mark.slow
def test_link_failure_is_a_fault():
    result = run_scenario(attacked('fault'))
    verdicts = of_type(result.records, 'verdict')
    assert verdicts and verdicts[0]['verdict'] == 'fault'
    assert 's2-s3' in verdicts[0]['reason']
    assert result.summary['verdict_confusion'] == {'truth': 'fault', 'verdict': 'fault', 'correct': True}
    network = of_type(result.records, 'network')[0]
    sensor = next(f for f in network['pn']['flows'] if f['key'] == SENSOR)
    assert sensor['hops'] == ['s1', 's4', 's5', 's6']
    assert sensor['class'] == 'legitimate'


@pytest.mark.slow
def test_watermark_makes_replay_detectable():
    _, with_watermark = run_batch(attacked('replay'), seeds=100, jobs=4)
    _, without = run_batch(attacked('replay_no_watermark'), seeds=100, jobs=4)
    assert with_watermark['detections'] >= 95
    assert without['detections'] <= 5
    test = two_proportion_test(without['detections'], 100, with_watermark['detections'], 100)
    assert test['difference'] >= 0.9
    assert test['p_value'] < 1e-20


def without_attacks(config):
    return edit_config(config, lambda d: d.update(attacks=[]))


@pytest.mark.slow
@pytest.mark.parametrize('name, fields', [('fdi', {'bias': [0.0]}), ('mitm', {'gain': 1.0})])
def test_null_attack_leaves_the_run_unchanged(name, fields):
    config = attacked(name, **fields)
    assert run_scenario(config).records == run_scenario(without_attacks(config)).records


@pytest.mark.slow
@pytest.mark.parametrize('name', ['replay', 'fdi', 'mitm', 'dos'])
def test_attack_effects_start_inside_the_window(name):
    config = attacked(name)
    steps = of_type(run_scenario(config).records, 'step')
    clean = of_type(run_scenario(without_attacks(config)).records, 'step')
    assert len(steps) == len(clean)
    differing = [s['t'] for s, c in zip(steps, clean) if s != c]
    assert differing
    assert ATTACK_START_US <= differing[0] <= ATTACK_STOP_US


@pytest.mark.slow
def test_sinkholed_flood_no_longer_delays_the_sensor_flow():
    config = attacked('dos')
    flooded = run_scenario(config).records
    baseline = of_type(run_scenario(without_attacks(config)).records, 'step')
    sinkholed_at = next(r['t'] for r in of_type(flooded, 'ack_received')
                        if r['flow_key'] == FLOOD and r['action'] == 'sinkholed')
    assert sinkholed_at < ATTACK_STOP_US - 300_000

    def mean_delay(steps):
        delays = [s['sensor_delay_us'] for s in steps
                  if sinkholed_at + 100_000 < s['t'] < ATTACK_STOP_US and s['sensor_delay_us'] is not None]
        assert len(delays) > 10
        return sum(delays) / len(delays)

    assert mean_delay(of_type(flooded, 'step')) == pytest.approx(mean_delay(baseline), rel=0.10)


@pytest.mark.slow
def test_verdicts_separate_faults_attacks_and_clean_runs():
    scenarios = [attacked('fault'), attacked('replay'), attacked('mitm'), short_scenario('default', SCENARIO_US)]
    table = pd.concat([run_batch(config, seeds=10, jobs=4)[0] for config in scenarios], ignore_index=True)
    assert len(table) == 40
    assert sorted(table['truth'].unique()) == ['attack', 'clean', 'fault']
    assert (table['truth'] == table['verdict']).mean() >= 0.9
