"""
Attack agents
Interceptors on compromised switches and flood sources on compromised hosts
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence

from data_models import AttackKind, FlowKey, Packet, Proto
from sim_core import Event, EventEngine
from cps_agents.attack_agents.attack_tools import (
    ReplayBuffer,
    inject_bias,
    live_transaction_id,
    restamp,
    scale_actuation,
)
from cps_agents.network_agents.network_agent import Fabric
from cps_agents.scada_agents.scada_tools import FunctionKind, RegisterCodec, decode_frame, encode_frame
from errors import FrameDecodeError

logger = logging.getLogger(__name__)


def attack_target(name: str) -> str:
    return f'attack:{name}'


@dataclass
class AttackActivity:
    """What an attack actually did; the ground-truth channel reads only this"""
    name: str
    kind: AttackKind
    locus: str
    start_us: int
    stop_us: int
    actions: int = 0
    dropped: int = 0
    first_action_at: Optional[int] = None

    def touch(self, now: int) -> None:
        self.actions += 1
        if self.first_action_at is None:
            self.first_action_at = now

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'kind': self.kind.value,
            'locus': self.locus,
            'start_us': self.start_us,
            'stop_us': self.stop_us,
            'actions': self.actions,
            'dropped': self.dropped,
            'first_action_at': self.first_action_at
        }


class Attack:
    """Base class: an attack window and its activity counter"""

    kind: AttackKind

    def __init__(self, name: str, locus: str, start_us: int, stop_us: int):
        self.activity = AttackActivity(name, self.kind, locus, start_us, stop_us)

    @property
    def name(self) -> str:
        return self.activity.name

    def active(self, now: int) -> bool:
        return self.activity.start_us <= now <= self.activity.stop_us

    def install(self, engine: EventEngine, fabric: Fabric) -> None:
        raise NotImplementedError


class Interceptor(Attack):
    """Sees every packet arriving at the compromised switch before its flow table does"""

    def __init__(self, name: str, locus: str, start_us: int, stop_us: int, flow: FlowKey):
        super().__init__(name, locus, start_us, stop_us)
        self.flow = flow

    def install(self, engine: EventEngine, fabric: Fabric) -> None:
        fabric.add_interceptor(self.activity.locus, self)

    def intercept(self, packet: Packet, now: int, switch_id: str) -> Optional[Packet]:
        if packet.flow_key != self.flow:
            return packet
        return self.on_flow_packet(packet, now)

    def on_flow_packet(self, packet: Packet, now: int) -> Optional[Packet]:
        raise NotImplementedError


class ReplayAttack(Interceptor):
    """
    Records sensor frames for `record_window_us` before the attack starts,
    then substitutes the recording for live frames, cycling through it at
    the recorded pace; a live frame with no recorded frame due is dropped
    """

    kind = AttackKind.REPLAY

    def __init__(self, name: str, locus: str, start_us: int, stop_us: int, flow: FlowKey,
                 record_window_us: int, preserve_transaction_ids: bool = False):
        super().__init__(name, locus, start_us, stop_us, flow)
        self.record_from = max(0, start_us - record_window_us)
        self.preserve_transaction_ids = preserve_transaction_ids
        self.buffer = ReplayBuffer()
        self._warned_empty = False

    def on_flow_packet(self, packet: Packet, now: int) -> Optional[Packet]:
        if self.record_from <= now < self.activity.start_us:
            try:
                frame = decode_frame(packet.payload)
            except FrameDecodeError:
                return packet
            if frame.function is FunctionKind.READ_HOLDING_RESPONSE:
                self.buffer.record(frame, now)
            return packet
        if not self.active(now):
            return packet

        recorded = self.buffer.next_frame(now)
        if recorded is None:
            if not self.buffer and not self._warned_empty:
                logger.warning('replay %s has an empty recording; dropping sensor frames instead', self.name)
                self._warned_empty = True
            self.activity.touch(now)
            self.activity.dropped += 1
            return None
        if not self.preserve_transaction_ids:
            live = live_transaction_id(packet.payload)
            if live is not None:
                recorded = restamp(recorded, live)
        self.activity.touch(now)
        return replace(packet, payload=encode_frame(recorded))


class FalseDataInjection(Interceptor):
    """Adds a bias to measured values in transit"""

    kind = AttackKind.FALSE_DATA_INJECTION

    def __init__(self, name: str, locus: str, start_us: int, stop_us: int, flow: FlowKey,
                 bias: Sequence[float], codec: RegisterCodec):
        super().__init__(name, locus, start_us, stop_us, flow)
        self.bias = list(bias)
        self.codec = codec
        self.clamped = 0

    def on_flow_packet(self, packet: Packet, now: int) -> Optional[Packet]:
        if not self.active(now):
            return packet
        payload, changed, clamped = inject_bias(packet.payload, self.bias, self.codec)
        if clamped:
            self.clamped += 1
            if self.clamped == 1:
                logger.warning('%s: biased measurement clamped to the register range', self.name)
        if not changed:
            return packet
        self.activity.touch(now)
        return replace(packet, payload=payload)


class MitmRewrite(Interceptor):
    """Scales actuation commands in transit"""

    kind = AttackKind.MITM_REWRITE

    def __init__(self, name: str, locus: str, start_us: int, stop_us: int, flow: FlowKey,
                 gain: float, codec: RegisterCodec):
        super().__init__(name, locus, start_us, stop_us, flow)
        self.gain = gain
        self.codec = codec

    def on_flow_packet(self, packet: Packet, now: int) -> Optional[Packet]:
        if not self.active(now):
            return packet
        payload, changed, clamped = scale_actuation(packet.payload, self.gain, self.codec)
        if clamped:
            logger.debug('%s: rewritten command clamped', self.name)
        if not changed:
            return packet
        self.activity.touch(now)
        return replace(packet, payload=payload)


class DosFlood(Attack):
    """Constant-rate flood of zero-filled frames from a compromised host"""

    kind = AttackKind.DOS_FLOOD

    def __init__(self, name: str, locus: str, start_us: int, stop_us: int, destination: str,
                 rate_pps: float, frame_size: int):
        super().__init__(name, locus, start_us, stop_us)
        self.destination = destination
        self.rate_pps = rate_pps
        self.frame_size = frame_size
        self.interval_us = max(1, round(1_000_000 / rate_pps)) if rate_pps > 0 else None
        self.fabric: Optional[Fabric] = None
        self.engine: Optional[EventEngine] = None

    def install(self, engine: EventEngine, fabric: Fabric) -> None:
        self.engine = engine
        self.fabric = fabric
        if self.interval_us is None:
            return
        engine.register(attack_target(self.name), self._on_tick)
        engine.schedule_at(self.activity.start_us, attack_target(self.name), None)

    def _on_tick(self, event: Event) -> None:
        now = event.fire_at
        self.fabric.send(self.activity.locus, self.destination, Proto.OTHER, bytes(self.frame_size))
        self.activity.touch(now)
        following = now + self.interval_us
        if following <= self.activity.stop_us:
            self.engine.schedule_at(following, attack_target(self.name), None)


def build_attacks(configs: Sequence[Any], names: Sequence[str], plant_host: str, controller_host: str,
                  sensor_codec: RegisterCodec, actuation_codec: RegisterCodec) -> List[Attack]:
    """
    Turn attack configs into attack objects

    Args:
        configs: Attack configs, tagged by `kind`
        names: One unique name per config
        plant_host: Host of the sensor/actuator
        controller_host: Host of the feedback controller
        sensor_codec: Codec of measurement registers
        actuation_codec: Codec of command registers

    Returns:
        Attacks in config order, not yet installed
    """
    sensor_flow = FlowKey(plant_host, controller_host, Proto.SCADA)
    actuation_flow = FlowKey(controller_host, plant_host, Proto.SCADA)
    attacks: List[Attack] = []
    for cfg, name in zip(configs, names):
        window = (name, cfg.locus, cfg.start_us, cfg.stop_us)
        if cfg.kind == AttackKind.REPLAY.value:
            attacks.append(ReplayAttack(*window, sensor_flow, cfg.record_window_us, cfg.preserve_transaction_ids))
        elif cfg.kind == AttackKind.FALSE_DATA_INJECTION.value:
            attacks.append(FalseDataInjection(*window, sensor_flow, cfg.bias, sensor_codec))
        elif cfg.kind == AttackKind.MITM_REWRITE.value:
            attacks.append(MitmRewrite(*window, actuation_flow, cfg.gain, actuation_codec))
        elif cfg.kind == AttackKind.DOS_FLOOD.value:
            attacks.append(DosFlood(*window, cfg.destination or controller_host, cfg.rate_pps, cfg.frame_size))
    return attacks
