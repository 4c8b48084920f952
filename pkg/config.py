"""
Scenario configuration
JSON scenario files validated by pydantic models, plus the model-level checks
"""

import json
import logging
from pathlib import Path
from typing import Annotated, Any, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from data_models import NodeRole, StateSpaceModel
from errors import ConfigurationError, CovarianceError, DimensionError, SchemaError, ScadaEncodingError
from cps_agents.control_agents.control_tools import chi2_threshold, lqr_gain
from cps_agents.network_agents.network_tools import build_topology_graph, link_id_for
from cps_agents.scada_agents.scada_tools import RegisterCodec

logger = logging.getLogger(__name__)

Matrix = List[List[float]]

EVIDENCE_RULE_NAMES = ('malformed-frame', 'unknown-pair', 'envelope', 'duplicate-transaction')
REQUIRED_ROLES = (NodeRole.PLANT, NodeRole.CONTROLLER, NodeRole.PN_CONTROLLER, NodeRole.MIDDLEBOX, NodeRole.SINKHOLE)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid')


class PlantConfig(StrictModel):
    A: Matrix
    B: Matrix
    C: Matrix
    W: Matrix
    V: Matrix
    x0: Optional[List[float]] = None
    divergence_bound: float = Field(1e6, gt=0)

    def model(self) -> StateSpaceModel:
        return StateSpaceModel(A=self.A, B=self.B, C=self.C, W=self.W, V=self.V)


class ControllerConfig(StrictModel):
    Q: Matrix
    R: Matrix
    Qw: Matrix
    period_us: int = Field(10_000, ge=2)
    window: int = Field(10, ge=1)
    tau: Optional[float] = Field(None, gt=0)
    percentile: float = Field(0.95, gt=0, lt=1)
    hysteresis: int = Field(3, ge=1)
    missing_as_alarm: bool = True
    reference: Optional[List[float]] = None

    def threshold(self, p: int) -> float:
        """Explicit tau, or the chi-square quantile for p * window degrees of freedom"""
        return self.tau if self.tau is not None else chi2_threshold(p * self.window, self.percentile)


class CodecConfig(StrictModel):
    scale: float = Field(0.001, gt=0)
    offset: float = -32.768
    registers_per_value: Literal[1, 2] = 1

    def codec(self) -> RegisterCodec:
        return RegisterCodec(self.scale, self.offset, self.registers_per_value)


class ScadaConfig(StrictModel):
    unit_id: int = Field(1, ge=0, le=255)
    actuation_address: int = Field(0, ge=0, le=0xFFFF)
    sensor: CodecConfig = CodecConfig()
    actuation: CodecConfig = CodecConfig()


class NodeConfig(StrictModel):
    id: str = Field(min_length=1)
    kind: Literal['host', 'switch']
    role: Literal['plant', 'controller', 'pn-controller', 'middlebox', 'sinkhole', 'generic'] = 'generic'


class LinkConfig(StrictModel):
    a: str
    b: str
    id: Optional[str] = None
    latency_us: int = Field(ge=0)
    bandwidth_bps: int = Field(gt=0)
    loss: float = Field(0.0, ge=0, le=1)

    @property
    def link_id(self) -> str:
        return self.id or link_id_for(self.a, self.b)


class TopologyConfig(StrictModel):
    nodes: List[NodeConfig]
    links: List[LinkConfig]
    miss_buffer_size: int = Field(64, ge=1)
    miss_timeout_us: int = Field(50_000, gt=0)
    hop_limit: int = Field(64, ge=1)
    control_plane_delay_us: int = Field(1000, ge=0)

    def host_for(self, role: NodeRole) -> Optional[str]:
        for node in self.nodes:
            if node.kind == 'host' and node.role == role.value:
                return node.id
        return None

    def graph(self):
        return build_topology_graph(
            [n.model_dump() for n in self.nodes],
            [{**link.model_dump(), 'id': link.link_id} for link in self.links],
        )


class PnConfig(StrictModel):
    k_paths: int = Field(3, ge=1)
    tau_s: int = Field(3, ge=1)
    tau_m: int = Field(10, ge=1)
    delta: float = Field(0.1, gt=0)
    evidence_rules: List[Literal['malformed-frame', 'unknown-pair', 'envelope', 'duplicate-transaction']] = list(EVIDENCE_RULE_NAMES)
    quarantine_mode: Literal['middlebox', 'throttled'] = 'middlebox'
    mitigation_enabled: bool = True
    deescalate_on_clear: bool = False
    identification_mode: Literal['continuous', 'on_demand'] = 'continuous'
    identification_window: int = Field(500, ge=2)
    identification_interval: int = Field(10, ge=1)
    min_samples: int = Field(50, ge=2)
    condition_limit: float = Field(1e8, gt=1)
    measurement_envelope: float = Field(25.0, gt=0)
    actuation_envelope: float = Field(25.0, gt=0)
    fault_evidence_window_us: int = Field(1_000_000, ge=0)
    loss_threshold: float = Field(0.05, gt=0, le=1)
    loss_min_packets: int = Field(10, ge=1)
    stats_interval_us: int = Field(100_000, ge=1)
    transaction_history: int = Field(1024, ge=1)
    known_pairs: List[Tuple[str, str]] = []

    @model_validator(mode='after')
    def _thresholds_ordered(self) -> 'PnConfig':
        if self.tau_m < self.tau_s:
            raise ValueError('tau_m must not be below tau_s')
        return self


class AttackBase(StrictModel):
    name: Optional[str] = None
    start_us: int = Field(ge=0)
    stop_us: int = Field(ge=0)
    locus: str

    @model_validator(mode='after')
    def _window_ordered(self) -> 'AttackBase':
        if self.start_us >= self.stop_us:
            raise ValueError('attack start_us must be before stop_us')
        return self


class ReplayAttackConfig(AttackBase):
    kind: Literal['replay']
    record_window_us: int = Field(1_000_000, gt=0)
    preserve_transaction_ids: bool = False


class FdiAttackConfig(AttackBase):
    kind: Literal['false-data-injection']
    bias: List[float]


class MitmAttackConfig(AttackBase):
    kind: Literal['mitm-rewrite']
    gain: float = 1.0


class DosAttackConfig(AttackBase):
    kind: Literal['dos-flood']
    rate_pps: float = Field(ge=0)
    frame_size: int = Field(125, ge=1, le=65_535)
    destination: Optional[str] = None


AttackConfig = Annotated[
    Union[ReplayAttackConfig, FdiAttackConfig, MitmAttackConfig, DosAttackConfig],
    Field(discriminator='kind'),
]


class FaultConfig(StrictModel):
    link: str
    at_us: int = Field(ge=0)
    restore_us: Optional[int] = None

    @model_validator(mode='after')
    def _restore_after_failure(self) -> 'FaultConfig':
        if self.restore_us is not None and self.restore_us <= self.at_us:
            raise ValueError('restore_us must be after at_us')
        return self


class OutputConfig(StrictModel):
    directory: str = 'runs/default'
    trace: bool = False


class ScenarioConfig(StrictModel):
    """One experiment: plant, loop, network, PN controller, attacks and faults"""
    name: str = 'scenario'
    seed: int = Field(0, ge=0)
    duration_us: int = Field(gt=0)
    plant: PlantConfig
    controller: ControllerConfig
    scada: ScadaConfig = ScadaConfig()
    topology: TopologyConfig
    pnctrl: PnConfig = PnConfig()
    attacks: List[AttackConfig] = []
    faults: List[FaultConfig] = []
    outputs: OutputConfig = OutputConfig()

    def attack_names(self) -> List[str]:
        return [a.name or f'{a.kind}-{i}' for i, a in enumerate(self.attacks)]


def _dotted(loc: Sequence[Any]) -> str:
    key = ''
    for part in loc:
        if isinstance(part, int):
            key += f'[{part}]'
        else:
            key += ('.' if key else '') + str(part)
    return key


def _line_of(text: str, loc: Sequence[Any]) -> Optional[int]:
    """Line of the deepest key of `loc` that can be found in the source text"""
    position = 0
    found = None
    for part in loc:
        if isinstance(part, int):
            continue
        index = text.find(f'"{part}"', position)
        if index < 0:
            break
        position = found = index
    return None if found is None else text.count('\n', 0, found) + 1


def parse_config(text: str) -> ScenarioConfig:
    """Parse and schema-validate JSON text"""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.msg, key='<document>', line=exc.lineno) from exc
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        errors = sorted(exc.errors(), key=lambda e: e['type'] != 'extra_forbidden')
        error = errors[0]
        loc = _strip_discriminator(error['loc'])
        raise SchemaError(error['msg'], key=_dotted(loc), line=_line_of(text, loc)) from exc


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    """Copy of the config with another seed, validated like a loaded file"""
    return parse_config(json.dumps({**config.model_dump(mode='json'), 'seed': seed}))


def _strip_discriminator(loc: Sequence[Any]) -> List[Any]:
    """Drop the union tag pydantic inserts after a list index of attacks"""
    tags = {'replay', 'false-data-injection', 'mitm-rewrite', 'dos-flood'}
    return [part for part in loc if part not in tags]


def load_config(path: Union[str, Path], validate: bool = True) -> ScenarioConfig:
    """
    Load a scenario file

    Args:
        path: JSON scenario file
        validate: Also run the model-level checks

    Returns:
        ScenarioConfig; raises a ConfigurationError subclass naming the key
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigurationError(f'cannot read {path}: {exc}') from exc
    config = parse_config(text)
    if validate:
        validate_scenario(config)
    logger.info('loaded scenario %s from %s', config.name, path)
    return config


def _check_shape(key: str, matrix: Matrix, shape: Tuple[int, int]) -> np.ndarray:
    array = np.atleast_2d(np.asarray(matrix, dtype=float))
    if array.shape != shape:
        raise DimensionError(f'{key} has shape {array.shape}, expected {shape}')
    return array


def validate_scenario(config: ScenarioConfig) -> StateSpaceModel:
    """
    Checks that need more than the schema

    Returns:
        The validated plant model
    """
    try:
        model = config.plant.model().validate()
    except ValueError as exc:
        raise DimensionError(f'plant matrices are ragged: {exc}') from exc
    n, m, p = model.n, model.m, model.p

    if config.plant.x0 is not None and len(config.plant.x0) != n:
        raise DimensionError(f'plant.x0 has length {len(config.plant.x0)}, expected {n}')
    if config.controller.reference is not None and len(config.controller.reference) != n:
        raise DimensionError(f'controller.reference has length {len(config.controller.reference)}, expected {n}')

    Q = _check_shape('controller.Q', config.controller.Q, (n, n))
    R = _check_shape('controller.R', config.controller.R, (m, m))
    Qw = _check_shape('controller.Qw', config.controller.Qw, (m, m))
    if not np.allclose(Qw, Qw.T) or float(np.min(np.linalg.eigvalsh(Qw))) < -1e-12:
        raise CovarianceError('controller.Qw must be symmetric positive semidefinite')
    lqr_gain(model.A, model.B, Q, R)

    for key, codec in (('scada.sensor', config.scada.sensor), ('scada.actuation', config.scada.actuation)):
        try:
            codec.codec()
        except ScadaEncodingError as exc:
            raise SchemaError(str(exc), key=key) from exc

    topology = config.topology
    ids = [node.id for node in topology.nodes]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise SchemaError(f'duplicate node ids {duplicates}', key='topology.nodes')
    kinds = {node.id: node.kind for node in topology.nodes}
    pairs, link_ids = set(), set()
    for i, link in enumerate(topology.links):
        for end in (link.a, link.b):
            if end not in kinds:
                raise SchemaError(f'unknown node {end!r}', key=f'topology.links[{i}]')
        if link.a == link.b:
            raise SchemaError('self-loop link', key=f'topology.links[{i}]')
        pair = frozenset((link.a, link.b))
        if pair in pairs:
            raise SchemaError(f'parallel link between {link.a} and {link.b}', key=f'topology.links[{i}]')
        if link.link_id in link_ids:
            raise SchemaError(f'duplicate link id {link.link_id}', key=f'topology.links[{i}].id')
        pairs.add(pair)
        link_ids.add(link.link_id)
        if kinds[link.a] == 'host' and kinds[link.b] == 'host':
            raise SchemaError('hosts must attach to switches', key=f'topology.links[{i}]')

    for host in (h for h, kind in kinds.items() if kind == 'host'):
        attached = sum(1 for link in topology.links if host in (link.a, link.b))
        if attached != 1:
            raise SchemaError(f'host {host} must have exactly one link, has {attached}', key='topology.links')
    for role in REQUIRED_ROLES:
        hosts = [node.id for node in topology.nodes if node.kind == 'host' and node.role == role.value]
        if len(hosts) != 1:
            raise SchemaError(f'need exactly one {role.value} host, found {len(hosts)}', key='topology.nodes')
    topology.graph()

    names = config.attack_names()
    if len(set(names)) != len(names):
        raise SchemaError('attack names must be unique', key='attacks')
    for i, attack in enumerate(config.attacks):
        wanted = 'host' if attack.kind == 'dos-flood' else 'switch'
        if kinds.get(attack.locus) != wanted:
            raise SchemaError(f'locus {attack.locus!r} is not a {wanted}', key=f'attacks[{i}].locus')
        if attack.start_us >= config.duration_us:
            raise SchemaError('attack starts after the run ends', key=f'attacks[{i}].start_us')
        if attack.kind == 'false-data-injection' and len(attack.bias) not in (1, p):
            raise DimensionError(f'attacks[{i}].bias has length {len(attack.bias)}, expected {p}')
        if attack.kind == 'dos-flood' and attack.destination is not None and attack.destination not in kinds:
            raise SchemaError(f'unknown destination {attack.destination!r}', key=f'attacks[{i}].destination')

    for i, fault in enumerate(config.faults):
        if fault.link not in link_ids:
            raise SchemaError(f'unknown link {fault.link!r}', key=f'faults[{i}].link')
    for host in (h for pair in config.pnctrl.known_pairs for h in pair):
        if kinds.get(host) != 'host':
            raise SchemaError(f'unknown host {host!r}', key='pnctrl.known_pairs')
    return model
