"""
Feedback controller agent
LQG loop with watermarking and a supervisor talking to the PN controller
"""

import json
import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

from data_models import AlertSignal, Estimate, MitigationAck, Packet, Proto, StateSpaceModel
from errors import FrameDecodeError, ScadaEncodingError
from sim_core import Event, EventEngine
from cps_agents.control_agents.control_tools import (
    SupervisorState,
    chi2_detect,
    controller_tick,
    kalman_predict,
    kalman_step,
    supervisor_tick,
    watermark_input,
)
from cps_agents.network_agents.network_agent import Fabric
from cps_agents.scada_agents.scada_tools import (
    FunctionKind,
    RegisterCodec,
    decode_frame,
    encode_frame,
    pack_measurement,
    unpack_measurement,
    write_request,
)

logger = logging.getLogger(__name__)

CONTROLLER_TARGET = 'controller'


@dataclass
class ControlTick:
    kind = 'control-tick'

    k: int


@dataclass
class Measurement:
    y: np.ndarray
    transaction_id: int
    sent_at: int
    received_at: int


@dataclass
class ControlTickResult:
    """What the controller saw and did at one step"""
    k: int
    t: int
    y: Optional[np.ndarray]
    g: Optional[float]
    alarm: bool
    missing: bool
    u: np.ndarray
    delta: np.ndarray
    sensor_delay_us: Optional[int]
    alert: Optional[AlertSignal]


class FeedbackController:
    """
    Controller host

    Ticks half a period after each plant sample, so a measurement sent at
    k*T is used at k*T + T/2 if it arrived in time. Frames are matched to
    the step by transaction id (k mod 2^16); a frame for any other step is
    discarded. Without a fresh frame it predicts only and the step counts
    as missing.
    """

    def __init__(self, engine: EventEngine, fabric: Fabric, model: StateSpaceModel, L: np.ndarray,
                 host: str, plant_host: str, pn_host: str, period_us: int,
                 sensor_codec: RegisterCodec, actuation_codec: RegisterCodec,
                 Qw, window: int, tau: float, hysteresis: int = 3,
                 reference=None, missing_as_alarm: bool = True,
                 x0_hat=None, P0=None, unit_id: int = 1, actuation_address: int = 0,
                 flow_hint: str = '', on_tick: Optional[Callable[[ControlTickResult], None]] = None,
                 on_ack: Optional[Callable[[MitigationAck, int], None]] = None):
        self.engine = engine
        self.fabric = fabric
        self.model = model
        self.L = np.atleast_2d(L)
        self.host = host
        self.plant_host = plant_host
        self.pn_host = pn_host
        self.period_us = period_us
        self.sensor_codec = sensor_codec
        self.actuation_codec = actuation_codec
        self.Qw = np.atleast_2d(np.asarray(Qw, dtype=float))
        self.window = window
        self.tau = tau
        self.hysteresis = hysteresis
        self.reference = None if reference is None else np.asarray(reference, dtype=float)
        self.missing_as_alarm = missing_as_alarm
        self.unit_id = unit_id
        self.actuation_address = actuation_address
        self.flow_hint = flow_hint
        self.on_tick = on_tick
        self.on_ack = on_ack
        self.rng = engine.rng('watermark')

        xhat = np.zeros(model.n) if x0_hat is None else np.asarray(x0_hat, dtype=float)
        P = np.eye(model.n) if P0 is None else np.asarray(P0, dtype=float)
        self.estimate = Estimate(xhat=xhat, P=P, k=0)
        self.u_prev = np.zeros(model.m)
        self.residuals: Deque[np.ndarray] = deque(maxlen=window)
        self.covariances: Deque[np.ndarray] = deque(maxlen=window)
        self.supervisor = SupervisorState()
        self.pending: Dict[int, Measurement] = {}
        self.stale_frames = 0
        self.alerts: List[AlertSignal] = []
        self.acks: List[Tuple[int, MitigationAck]] = []
        self.deltas: List[np.ndarray] = []

        engine.register(CONTROLLER_TARGET, self._on_tick)
        fabric.attach_host(host, self.on_packet)

    def start(self) -> None:
        self.engine.schedule_at(self.period_us + self.period_us // 2, CONTROLLER_TARGET, ControlTick(1))

    def on_packet(self, packet: Packet, now: int) -> None:
        if packet.proto is Proto.SCADA and packet.src == self.plant_host:
            self._on_measurement(packet, now)
        elif packet.proto is Proto.CONTROL and packet.src == self.pn_host:
            self._on_control_message(packet, now)

    def _on_measurement(self, packet: Packet, now: int) -> None:
        try:
            frame = decode_frame(packet.payload)
            if frame.function is not FunctionKind.READ_HOLDING_RESPONSE:
                return
            y = unpack_measurement(frame.register_values, self.sensor_codec)
        except (FrameDecodeError, ScadaEncodingError) as exc:
            logger.debug('controller dropped malformed measurement: %s', exc)
            return
        if y.shape != (self.model.p,):
            return
        self.pending[frame.transaction_id] = Measurement(y, frame.transaction_id, packet.created_at, now)

    def _on_control_message(self, packet: Packet, now: int) -> None:
        try:
            message = json.loads(packet.payload.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return
        if message.get('message') != 'ack':
            return
        ack = MitigationAck.from_dict(message)
        self.acks.append((now, ack))
        logger.info('mitigation ack at t=%d: %s on %s', now, ack.action.value, ack.flow_key)
        if self.on_ack:
            self.on_ack(ack, now)

    def _on_tick(self, event: Event) -> None:
        tick: ControlTick = event.payload
        measurement = self.pending.pop(tick.k & 0xFFFF, None)
        if self.pending:
            self.stale_frames += len(self.pending)
            logger.debug('step %d ignores %d frame(s) for other steps', tick.k, len(self.pending))
            self.pending.clear()
        missing = measurement is None

        if missing:
            self.estimate = kalman_predict(self.model, self.estimate, self.u_prev)
        else:
            update = kalman_step(self.model, self.estimate, self.u_prev, measurement.y)
            self.estimate = update.estimate
            self.residuals.append(update.residual)
            self.covariances.append(update.innovation_cov)

        alarm, g = chi2_detect(self.residuals, self.covariances, self.window, self.tau)
        if missing and self.missing_as_alarm:
            alarm = True

        alert = None
        if tick.k >= self.window:
            self.supervisor, alert = supervisor_tick(
                self.supervisor, alarm, self.hysteresis, tick.k, g, self.flow_hint
            )
        if alert is not None:
            self._send_alert(alert)

        u_star = controller_tick(self.estimate, self.L, self.reference)
        u, delta = watermark_input(u_star, self.Qw, self.rng)
        u = self._representable(u)
        self.u_prev = u
        self.deltas.append(delta)
        self._send_actuation(tick.k, u)

        if self.on_tick:
            self.on_tick(ControlTickResult(
                k=tick.k, t=event.fire_at,
                y=None if missing else measurement.y,
                g=g, alarm=bool(alarm), missing=missing, u=u, delta=delta,
                sensor_delay_us=None if missing else measurement.received_at - measurement.sent_at,
                alert=alert
            ))
        self.engine.schedule_at(event.fire_at + self.period_us, CONTROLLER_TARGET, ControlTick(tick.k + 1))

    def _representable(self, u: np.ndarray) -> np.ndarray:
        """Saturate and quantize to the actuation registers so the filter predicts with what is sent"""
        clipped = [self.actuation_codec.clamp(v)[0] for v in u]
        return unpack_measurement(pack_measurement(clipped, self.actuation_codec), self.actuation_codec)

    def _send_actuation(self, k: int, u: np.ndarray) -> None:
        frame = write_request(k & 0xFFFF, self.unit_id, self.actuation_address,
                              pack_measurement(u, self.actuation_codec))
        self.fabric.send(self.host, self.plant_host, Proto.SCADA, encode_frame(frame))

    def _send_alert(self, alert: AlertSignal) -> None:
        self.alerts.append(alert)
        logger.info('supervisor %s at step %d (g=%s)', alert.kind.value, alert.step, alert.statistic)
        payload = json.dumps(alert.to_dict(), sort_keys=True).encode('utf-8')
        self.fabric.send(self.host, self.pn_host, Proto.CONTROL, payload)
