"""
Scenario orchestrator
Wires plant, controller, fabric, PN controller and attacks; runs, audits and reports
"""

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from config import ScenarioConfig, load_config, validate_scenario, with_seed
from data_models import FlowKey, MitigationAck, NodeRole, Proto
from errors import AuditFailure, PlantDivergenceError, SimulationError, exit_code_for
from sim_core import EventEngine
from cps_agents.attack_agents.attack_agent import Attack, build_attacks
from cps_agents.control_agents.control_agent import ControlTickResult, FeedbackController
from cps_agents.control_agents.control_tools import lqr_gain
from cps_agents.network_agents.network_agent import Fabric
from cps_agents.plant_agents.plant_agent import PlantAgent
from cps_agents.pn_agents.pn_agent import PnController, PnSettings
from cps_agents.reporting_agents.reporting_agent import (
    SCHEMA_VERSION,
    MetricsRecorder,
    dump_record,
    read_jsonl,
    write_json,
)
from cps_agents.reporting_agents.reporting_tools import (
    aggregate_batch,
    audit_ack_pairing,
    audit_class_monotonicity,
    audit_conservation,
    audit_mitigation_completeness,
    compare_runs,
    summarize_records,
)

logger = logging.getLogger(__name__)

RECORDS_FILE = 'records.jsonl'
SUMMARY_FILE = 'summary.json'
TRACE_FILE = 'trace.log'
DELTAS_FILE = 'deltas.csv'
BATCH_FILE = 'batch.csv'
BATCH_SUMMARY_FILE = 'batch_summary.json'


def topology_digest(config: ScenarioConfig) -> str:
    canonical = json.dumps(config.topology.model_dump(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


@dataclass
class RunResult:
    summary: Dict[str, Any]
    records: List[Dict[str, Any]]
    out_dir: Optional[Path]
    failed_audits: List[str]


class ScenarioOrchestrator:
    """
    One simulation instance

    Builds every component on a shared event engine, runs to the configured
    duration and turns the outcome into records, a summary and audits.
    """

    def __init__(self, config: ScenarioConfig, out_dir: Optional[Path] = None, trace: Optional[bool] = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.trace = config.outputs.trace if trace is None else trace
        self.recorder = MetricsRecorder()

        self.model = validate_scenario(config)
        controller_cfg = config.controller
        self.L = lqr_gain(self.model.A, self.model.B, controller_cfg.Q, controller_cfg.R)
        self.tau = controller_cfg.threshold(self.model.p)

        topology = config.topology
        self.plant_host = topology.host_for(NodeRole.PLANT)
        self.controller_host = topology.host_for(NodeRole.CONTROLLER)
        self.pn_host = topology.host_for(NodeRole.PN_CONTROLLER)
        self.middlebox_host = topology.host_for(NodeRole.MIDDLEBOX)
        self.sinkhole_host = topology.host_for(NodeRole.SINKHOLE)
        self.sensor_codec = config.scada.sensor.codec()
        self.actuation_codec = config.scada.actuation.codec()

        self.engine = EventEngine(seed=config.seed, trace=self.trace)
        self.fabric = Fabric(
            self.engine, topology.graph(),
            miss_buffer_size=topology.miss_buffer_size,
            miss_timeout_us=topology.miss_timeout_us,
            hop_limit=topology.hop_limit,
            control_plane_delay_us=topology.control_plane_delay_us,
        )
        self.fabric.on_rule_change = lambda change: self.recorder.emit({'type': 'rule', **change})
        self.fabric.on_link_change = lambda change: self.recorder.emit({'type': 'link', **change})

        x0 = config.plant.x0 if config.plant.x0 is not None else [0.0] * self.model.n
        self.plant = PlantAgent(
            self.engine, self.fabric, self.model, x0,
            host=self.plant_host, controller_host=self.controller_host,
            period_us=controller_cfg.period_us,
            sensor_codec=self.sensor_codec, actuation_codec=self.actuation_codec,
            unit_id=config.scada.unit_id, divergence_bound=config.plant.divergence_bound,
        )
        self.controller = FeedbackController(
            self.engine, self.fabric, self.model, self.L,
            host=self.controller_host, plant_host=self.plant_host, pn_host=self.pn_host,
            period_us=controller_cfg.period_us,
            sensor_codec=self.sensor_codec, actuation_codec=self.actuation_codec,
            Qw=controller_cfg.Qw, window=controller_cfg.window, tau=self.tau,
            hysteresis=controller_cfg.hysteresis, reference=controller_cfg.reference,
            missing_as_alarm=controller_cfg.missing_as_alarm,
            unit_id=config.scada.unit_id, actuation_address=config.scada.actuation_address,
            flow_hint=str(FlowKey(self.plant_host, self.controller_host, Proto.SCADA)),
            on_tick=self._on_step, on_ack=self._on_ack,
        )
        settings = PnSettings(**{
            **config.pnctrl.model_dump(exclude={'known_pairs'}),
            'known_pairs': {tuple(pair) for pair in config.pnctrl.known_pairs},
        })
        self.pn = PnController(
            self.engine, self.fabric, self.fabric.graph, self.model,
            plant_host=self.plant_host, controller_host=self.controller_host, pn_host=self.pn_host,
            sensor_codec=self.sensor_codec, actuation_codec=self.actuation_codec,
            middlebox_host=self.middlebox_host, sinkhole_host=self.sinkhole_host,
            settings=settings, on_record=self.recorder.emit,
        )
        self.attacks: List[Attack] = build_attacks(
            config.attacks, config.attack_names(), self.plant_host, self.controller_host,
            self.sensor_codec, self.actuation_codec,
        )

    # Callbacks

    def _on_step(self, result: ControlTickResult) -> None:
        self.recorder.emit({
            'type': 'step',
            'k': result.k,
            't': result.t,
            'x': self.plant.state.x.tolist(),
            'u': result.u.tolist(),
            'u_applied': self.plant.u_applied.tolist(),
            'y': None if result.y is None else result.y.tolist(),
            'g': None if result.g is None else float(result.g),
            'alarm': result.alarm,
            'missing': result.missing,
            'sensor_delay_us': result.sensor_delay_us,
            'actuation_delay_us': self.plant.last_actuation_delay_us,
        })
        if result.alert is not None:
            self.recorder.emit({
                'type': 'alert', 't': result.t, 'step': result.alert.step, 'kind': result.alert.kind.value,
                'statistic': None if result.alert.statistic is None else float(result.alert.statistic),
            })

    def _on_ack(self, ack: MitigationAck, now: int) -> None:
        self.recorder.emit({'type': 'ack_received', 't': now, **ack.to_dict()})

    # Run

    def _header(self) -> Dict[str, Any]:
        controller_cfg = self.config.controller
        return {
            'type': 'run',
            'schema': SCHEMA_VERSION,
            'scenario': self.config.name,
            'seed': self.config.seed,
            'duration_us': self.config.duration_us,
            'period_us': controller_cfg.period_us,
            'steps': self.config.duration_us // controller_cfg.period_us,
            'Q': controller_cfg.Q,
            'R': controller_cfg.R,
            'tau': self.tau,
            'L': self.L.tolist(),
            'topology': topology_digest(self.config),
        }

    def run(self, raise_on_audit: bool = True) -> RunResult:
        """
        Execute the scenario to its duration

        Raises:
            PlantDivergenceError: the plant state left the divergence bound
            AuditFailure: an invariant audit failed (after outputs are written)
        """
        config = self.config
        logger.info('running %s (seed %d, %d us)', config.name, config.seed, config.duration_us)
        self.recorder.emit(self._header())

        for attack in self.attacks:
            attack.install(self.engine, self.fabric)
        for fault in config.faults:
            self.fabric.inject_link_failure(fault.link, fault.at_us)
            if fault.restore_us is not None:
                self.fabric.restore_link(fault.link, fault.restore_us)
        self.pn.start()
        self.plant.start()
        self.controller.start()

        try:
            self.engine.run_until(config.duration_us)
        except PlantDivergenceError:
            logger.error('plant diverged at t=%d', self.engine.now)
            raise

        self._finish_records()
        failed = self._audit()
        summary = summarize_records(self.recorder.records)

        recomputed = summarize_records([json.loads(dump_record(r)) for r in self.recorder.records])
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.recorder.write_jsonl(self.out_dir / RECORDS_FILE)
            if self.trace:
                self.engine.write_trace(self.out_dir / TRACE_FILE)
            recomputed = summarize_records(read_jsonl(self.out_dir / RECORDS_FILE))
        if recomputed != summary:
            failed.append('summary-recomputation')
        summary['summary_recomputed'] = 'summary-recomputation' not in failed
        if self.out_dir is not None:
            write_json(self.out_dir / SUMMARY_FILE, summary)

        logger.info('finished %s: %d steps, %d verdicts, audits %s', config.name, summary['steps'],
                    summary['verdicts'], 'failed' if failed else 'passed')
        if failed and raise_on_audit:
            raise AuditFailure(failed)
        return RunResult(summary, self.recorder.records, self.out_dir, failed)

    def _finish_records(self) -> None:
        deliveries = Counter(d.host for d in self.fabric.deliveries)
        self.recorder.emit({
            'type': 'network',
            **self.fabric.snapshot(),
            'sinkholed': self.fabric.deliveries_to(self.sinkhole_host),
            'deliveries_by_host': dict(sorted(deliveries.items())),
            'pn': self.pn.snapshot(),
        })
        self.recorder.emit({
            'type': 'truth',
            'attacks': [a.activity.to_dict() for a in self.attacks if a.activity.actions > 0],
            'faults': [{'link': f.link, 'at_us': f.at_us, 'restore_us': f.restore_us}
                       for f in self.config.faults if f.at_us <= self.config.duration_us],
        })

    def _audit(self) -> List[str]:
        records = self.recorder.records
        transitions = [r for r in records if r['type'] == 'transition']
        sent = [r for r in records if r['type'] == 'ack']
        received = [r for r in records if r['type'] == 'ack_received']
        deliveries = [{'at': d.at, 'flow_key': d.flow_key, 'host': d.host} for d in self.fabric.deliveries]
        checks = {
            'conservation': audit_conservation(self.fabric.conservation()),
            'class-monotonicity': audit_class_monotonicity(transitions),
            'ack-pairing': audit_ack_pairing(transitions, sent, received),
            'mitigation-completeness': audit_mitigation_completeness(transitions, deliveries),
        }
        failed = []
        for name, problems in checks.items():
            self.recorder.emit({'type': 'audit', 'name': name, 'passed': not problems, 'detail': problems})
            if problems:
                failed.append(name)
                logger.error('audit %s failed: %s', name, '; '.join(problems))
        return failed


def run_scenario(config: ScenarioConfig, out_dir: Optional[Path] = None, trace: Optional[bool] = None,
                 raise_on_audit: bool = True) -> RunResult:
    return ScenarioOrchestrator(config, out_dir, trace).run(raise_on_audit=raise_on_audit)


# Batch

def _run_seed(job: Tuple[Dict[str, Any], int, Optional[str]]) -> Dict[str, Any]:
    """Process-pool worker: one seed of a config given as a plain dict"""
    config_data, seed, out_dir = job
    config = ScenarioConfig.model_validate({**config_data, 'seed': seed})
    result = run_scenario(config, Path(out_dir) / f'seed-{seed}' if out_dir else None, trace=False,
                          raise_on_audit=False)
    return result.summary


def run_batch(config: ScenarioConfig, seeds: int, jobs: int = 1,
              out_dir: Optional[Path] = None) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """
    Run `seeds` consecutive seeds starting at the config's seed

    Returns:
        (per-seed table, aggregate rates with Wilson intervals)
    """
    data = config.model_dump(mode='json')
    work = [(data, config.seed + i, str(out_dir) if out_dir else None) for i in range(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_run_seed, work))
    else:
        summaries = [_run_seed(job) for job in work]
    summaries.sort(key=lambda s: s['seed'])
    table, aggregate = aggregate_batch(summaries)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / BATCH_FILE, index=False)
        write_json(out_dir / BATCH_SUMMARY_FILE, aggregate)
    return table, aggregate


def load_summary(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / SUMMARY_FILE
    return json.loads(path.read_text(encoding='utf-8'))


# CLI

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cps-sim', description='Deterministic CPS + programmable-network simulator')
    parser.add_argument('--log-level', default='WARNING', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='run one scenario')
    run.add_argument('config', type=Path)
    run.add_argument('--seed', type=int)
    run.add_argument('--out', type=Path)
    run.add_argument('--trace', action='store_true')

    batch = commands.add_parser('batch', help='run many seeds of one scenario')
    batch.add_argument('config', type=Path)
    batch.add_argument('--seeds', type=int, required=True)
    batch.add_argument('--jobs', type=int, default=1)
    batch.add_argument('--out', type=Path)

    compare = commands.add_parser('compare', help='per-metric deltas between two runs')
    compare.add_argument('a', type=Path)
    compare.add_argument('b', type=Path)
    compare.add_argument('--out', type=Path)

    validate = commands.add_parser('validate', help='check a scenario file')
    validate.add_argument('config', type=Path)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format='%(levelname)s %(name)s: %(message)s')
    try:
        if args.command == 'validate':
            config = load_config(args.config)
            print(f'{args.config}: ok ({config.name})')
        elif args.command == 'run':
            config = load_config(args.config)
            if args.seed is not None:
                config = with_seed(config, args.seed)
            out_dir = args.out or Path(config.outputs.directory)
            result = run_scenario(config, out_dir, trace=args.trace or config.outputs.trace)
            print(json.dumps(result.summary, sort_keys=True, indent=2))
        elif args.command == 'batch':
            config = load_config(args.config)
            out_dir = args.out or Path(config.outputs.directory) / 'batch'
            _, aggregate = run_batch(config, args.seeds, args.jobs, out_dir)
            print(json.dumps(aggregate, sort_keys=True, indent=2))
        elif args.command == 'compare':
            deltas = compare_runs(load_summary(args.a), load_summary(args.b))
            out = args.out or (args.b if args.b.is_dir() else args.b.parent) / DELTAS_FILE
            deltas.to_csv(out, index=False)
            print(deltas.to_string(index=False))
    except PlantDivergenceError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return exit_code_for(exc)
    except SimulationError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return exit_code_for(exc)
    return 0


if __name__ == '__main__':
    sys.exit(main())
