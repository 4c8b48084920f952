from dataclasses import dataclass, field
from typing import Dict, List, Any, Optional, NamedTuple, Tuple
from enum import Enum

import numpy as np

from errors import CovarianceError, DimensionError


class TrafficClass(Enum):
    """Flow classes, in escalation order"""
    LEGITIMATE = "legitimate"
    SUSPICIOUS = "suspicious"
    MALICIOUS = "malicious"

    @property
    def rank(self) -> int:
        return _CLASS_ORDER.index(self)


_CLASS_ORDER = [TrafficClass.LEGITIMATE, TrafficClass.SUSPICIOUS, TrafficClass.MALICIOUS]


class Proto(Enum):
    """Packet protocol field"""
    SCADA = "scada"
    CONTROL = "control-channel"
    OTHER = "other"


class AlertKind(Enum):
    PHYSICAL_ANOMALY = "physical-anomaly"
    CLEARED = "cleared"


class Verdict(Enum):
    """Outcome of correlating a physical alert with network evidence"""
    NOMINAL = "nominal"
    FAULT = "fault"
    ATTACK = "attack"
    ATTACK_SUSPECTED = "attack-suspected"


class MitigationAction(Enum):
    REROUTED_QUARANTINE = "rerouted-quarantine"
    SINKHOLED = "sinkholed"
    REROUTED = "rerouted"
    NONE = "none"


class AttackKind(Enum):
    REPLAY = "replay"
    FALSE_DATA_INJECTION = "false-data-injection"
    MITM_REWRITE = "mitm-rewrite"
    DOS_FLOOD = "dos-flood"


class NodeRole(Enum):
    PLANT = "plant"
    CONTROLLER = "controller"
    PN_CONTROLLER = "pn-controller"
    MIDDLEBOX = "middlebox"
    SINKHOLE = "sinkhole"
    GENERIC = "generic"


def _matrix(data: Any, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(data, dtype=float))
    if arr.ndim != 2:
        raise DimensionError(f'{name} must be a matrix, got shape {arr.shape}')
    return arr


@dataclass
class StateSpaceModel:
    """Discrete-time linear plant x+ = A x + B u + w, y = C x + v"""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    W: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.A = _matrix(self.A, 'A')
        self.B = _matrix(self.B, 'B')
        self.C = _matrix(self.C, 'C')
        self.W = _matrix(self.W, 'W')
        self.V = _matrix(self.V, 'V')

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def validate(self, tol: float = 1e-9) -> 'StateSpaceModel':
        """Check dimensions and noise covariances; returns self"""
        n, m, p = self.n, self.m, self.p
        expected = {
            'A': (self.A, (n, n)),
            'B': (self.B, (n, m)),
            'C': (self.C, (p, n)),
            'W': (self.W, (n, n)),
            'V': (self.V, (p, p)),
        }
        for name, (mat, shape) in expected.items():
            if mat.shape != shape:
                raise DimensionError(f'plant.{name} has shape {mat.shape}, expected {shape}')

        for name, mat, definite in (('W', self.W, False), ('V', self.V, True)):
            if not np.allclose(mat, mat.T, atol=tol):
                raise CovarianceError(f'plant.{name} is not symmetric')
            lowest = float(np.min(np.linalg.eigvalsh(mat)))
            if definite and lowest <= tol:
                raise CovarianceError(f'plant.{name} must be positive definite (min eigenvalue {lowest:.3g})')
            if lowest < -tol:
                raise CovarianceError(f'plant.{name} must be positive semidefinite (min eigenvalue {lowest:.3g})')
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            'A': self.A.tolist(),
            'B': self.B.tolist(),
            'C': self.C.tolist(),
            'W': self.W.tolist(),
            'V': self.V.tolist()
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'StateSpaceModel':
        return cls(A=data['A'], B=data['B'], C=data['C'], W=data['W'], V=data['V'])


@dataclass
class PlantState:
    x: np.ndarray
    k: int = 0


@dataclass
class Estimate:
    """Kalman state estimate and its covariance at step k"""
    xhat: np.ndarray
    P: np.ndarray
    k: int = 0


class FlowKey(NamedTuple):
    src: str
    dst: str
    proto: Proto

    def __str__(self) -> str:
        return f'{self.src}>{self.dst}/{self.proto.value}'

    @classmethod
    def parse(cls, text: str) -> 'FlowKey':
        pair, proto = text.rsplit('/', 1)
        src, dst = pair.split('>', 1)
        return cls(src, dst, Proto(proto))


@dataclass
class AlertSignal:
    """Supervisor message on a detector edge"""
    kind: AlertKind
    statistic: Optional[float]
    step: int
    flow_hint: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'message': 'alert',
            'kind': self.kind.value,
            'statistic': self.statistic,
            'step': self.step,
            'flow_hint': self.flow_hint
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AlertSignal':
        return cls(
            kind=AlertKind(data['kind']),
            statistic=data.get('statistic'),
            step=data['step'],
            flow_hint=data['flow_hint']
        )


@dataclass
class MitigationAck:
    """PN controller report that a corrective action was taken"""
    action: MitigationAction
    flow_key: str
    at: int
    verdict: Optional[Verdict] = None
    transition_id: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'message': 'ack',
            'action': self.action.value,
            'flow_key': self.flow_key,
            'at': self.at,
            'verdict': self.verdict.value if self.verdict else None,
            'transition_id': self.transition_id
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MitigationAck':
        return cls(
            action=MitigationAction(data['action']),
            flow_key=data['flow_key'],
            at=data['at'],
            verdict=Verdict(data['verdict']) if data.get('verdict') else None,
            transition_id=data.get('transition_id')
        )


@dataclass
class Packet:
    """A simulated packet; `label` changes only through a set-label action"""
    id: int
    src: str
    dst: str
    proto: Proto
    payload: bytes
    created_at: int
    label: Optional[int] = None
    hops: int = 0

    @property
    def flow_key(self) -> FlowKey:
        return FlowKey(self.src, self.dst, self.proto)

    @property
    def size(self) -> int:
        return len(self.payload)


class ActionType(Enum):
    FORWARD = "forward"
    SET_LABEL = "set_label"
    MIRROR = "mirror_to_probe"
    DROP = "drop"
    SEND_TO_CONTROLLER = "send_to_controller"


@dataclass(frozen=True)
class Action:
    type: ActionType
    arg: Any = None

    def to_dict(self) -> Dict[str, Any]:
        return {'type': self.type.value, 'arg': self.arg}


@dataclass(frozen=True)
class Match:
    """Predicate over packet headers; None fields are wildcards"""
    src: Optional[str] = None
    dst: Optional[str] = None
    proto: Optional[Proto] = None
    label: Optional[int] = None

    def matches(self, packet: Packet) -> bool:
        return ((self.src is None or self.src == packet.src)
                and (self.dst is None or self.dst == packet.dst)
                and (self.proto is None or self.proto == packet.proto)
                and (self.label is None or self.label == packet.label))

    @classmethod
    def for_flow(cls, key: FlowKey, label: Optional[int] = None) -> 'Match':
        return cls(src=key.src, dst=key.dst, proto=key.proto, label=label)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'src': self.src,
            'dst': self.dst,
            'proto': self.proto.value if self.proto else None,
            'label': self.label
        }


TABLE_MISS_ID = 'table-miss'


@dataclass
class FlowRule:
    rule_id: str
    priority: int
    match: Match
    actions: List[Action]
    installed_at: int = 0
    install_seq: int = 0
    removed_at: Optional[int] = None
    cause: Optional[str] = None

    def is_active(self, now: int) -> bool:
        if self.installed_at >= now and self.rule_id != TABLE_MISS_ID:
            return False
        return self.removed_at is None or now <= self.removed_at

    def to_dict(self) -> Dict[str, Any]:
        return {
            'rule_id': self.rule_id,
            'priority': self.priority,
            'match': self.match.to_dict(),
            'actions': [a.to_dict() for a in self.actions],
            'installed_at': self.installed_at
        }


def table_miss_rule() -> FlowRule:
    return FlowRule(
        rule_id=TABLE_MISS_ID,
        priority=0,
        match=Match(),
        actions=[Action(ActionType.SEND_TO_CONTROLLER)],
        installed_at=0
    )


@dataclass
class PathEntry:
    label: int
    hops: Tuple[str, ...]
    latency_us: int
    qos_score: float
    bottleneck_bps: int
    class_eligibility: frozenset = frozenset()

    @property
    def ingress(self) -> str:
        return self.hops[0]

    @property
    def egress(self) -> str:
        return self.hops[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'label': self.label,
            'hops': list(self.hops),
            'latency_us': self.latency_us,
            'qos_score': self.qos_score,
            'bottleneck_bps': self.bottleneck_bps,
            'class_eligibility': sorted(c.value for c in self.class_eligibility)
        }


@dataclass
class FlowRecord:
    key: FlowKey
    traffic_class: TrafficClass = TrafficClass.LEGITIMATE
    suspicion: int = 0
    current_label: Optional[int] = None
    last_seen: int = 0
    ingress: Optional[str] = None
    hops: Tuple[str, ...] = ()
    known: bool = True
    evidence: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'key': str(self.key),
            'class': self.traffic_class.value,
            'suspicion': self.suspicion,
            'current_label': self.current_label,
            'last_seen': self.last_seen,
            'hops': list(self.hops),
            'evidence': dict(self.evidence)
        }


@dataclass
class FrameDigest:
    """What a probe could read from a payload: decoded registers or an error tag"""
    function: Optional[str] = None
    transaction_id: Optional[int] = None
    registers: Tuple[int, ...] = ()
    error: Optional[str] = None

    @property
    def malformed(self) -> bool:
        return self.error is not None


@dataclass
class ProbeReport:
    kind = 'probe-report'

    flow_key: FlowKey
    probe_id: str
    switch: str
    observed_at: int
    label: Optional[int] = None
    digest: Optional[FrameDigest] = None


@dataclass
class BehaviorEstimate:
    """
    Identified plant matrices

    In state coordinates when the output matrix could be inverted,
    otherwise the output-space pair y_k+1 = A_hat y_k + B_hat u_k.
    """
    A_hat: np.ndarray
    B_hat: np.ndarray
    sample_count: int
    residual_norm: float
    state_space: bool = True

    def reference(self, nominal: StateSpaceModel) -> Tuple[np.ndarray, np.ndarray]:
        """The nominal (A, B) in the coordinates of this estimate"""
        if self.state_space:
            return nominal.A, nominal.B
        C_pinv = np.linalg.pinv(nominal.C)
        return nominal.C @ nominal.A @ C_pinv, nominal.C @ nominal.B

    def deviation(self, nominal: StateSpaceModel) -> float:
        """Max-norm distance from the nominal (A, B)"""
        A_ref, B_ref = self.reference(nominal)
        if self.A_hat.shape != A_ref.shape or self.B_hat.shape != B_ref.shape:
            raise DimensionError(
                f'estimate {self.A_hat.shape}/{self.B_hat.shape} does not match nominal '
                f'{A_ref.shape}/{B_ref.shape}'
            )
        return float(max(np.max(np.abs(self.A_hat - A_ref)),
                         np.max(np.abs(self.B_hat - B_ref))))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'A_hat': self.A_hat.tolist(),
            'B_hat': self.B_hat.tolist(),
            'sample_count': self.sample_count,
            'residual_norm': self.residual_norm,
            'state_space': self.state_space
        }
