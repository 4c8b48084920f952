"""
Plant agent
Physical process with its sensor and actuator attached to the fabric
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from data_models import Packet, PlantState, Proto, StateSpaceModel
from errors import FrameDecodeError, ScadaEncodingError
from sim_core import Event, EventEngine
from cps_agents.network_agents.network_agent import Fabric
from cps_agents.plant_agents.plant_tools import plant_step
from cps_agents.scada_agents.scada_tools import (
    FunctionKind,
    RegisterCodec,
    decode_frame,
    encode_frame,
    pack_measurement,
    read_response,
    unpack_measurement,
)

logger = logging.getLogger(__name__)

PLANT_TARGET = 'plant'


@dataclass
class PlantTick:
    kind = 'plant-tick'

    k: int


class PlantAgent:
    """
    Steps the plant every control period with the last received input
    (zero-order hold) and pushes the measurement to the controller host
    """

    def __init__(self, engine: EventEngine, fabric: Fabric, model: StateSpaceModel, x0,
                 host: str, controller_host: str, period_us: int,
                 sensor_codec: RegisterCodec, actuation_codec: RegisterCodec,
                 unit_id: int = 1, divergence_bound: Optional[float] = 1e6):
        self.engine = engine
        self.fabric = fabric
        self.model = model
        self.host = host
        self.controller_host = controller_host
        self.period_us = period_us
        self.sensor_codec = sensor_codec
        self.actuation_codec = actuation_codec
        self.unit_id = unit_id
        self.divergence_bound = divergence_bound
        self.rng = engine.rng('plant')

        self.state = PlantState(x=np.atleast_1d(np.asarray(x0, dtype=float)).copy(), k=0)
        self.u_held = np.zeros(model.m)
        self.u_applied = np.zeros(model.m)
        self.last_y: Optional[np.ndarray] = None
        self.last_actuation_delay_us: Optional[int] = None
        self.last_command_tid: Optional[int] = None
        self.saturations = 0
        self.rejected_commands = 0

        engine.register(PLANT_TARGET, self._on_tick)
        fabric.attach_host(host, self.on_packet)

    def start(self) -> None:
        self.engine.schedule_at(self.period_us, PLANT_TARGET, PlantTick(1))

    def _on_tick(self, event: Event) -> None:
        tick: PlantTick = event.payload
        self.u_applied = self.u_held.copy()
        self.state, y = plant_step(self.model, self.state, self.u_applied, self.rng, self.divergence_bound)
        self.last_y = y
        self._send_measurement(tick.k, y)
        self.engine.schedule_at(event.fire_at + self.period_us, PLANT_TARGET, PlantTick(tick.k + 1))

    def _send_measurement(self, k: int, y: np.ndarray) -> None:
        readings = []
        for value in y:
            clipped, moved = self.sensor_codec.clamp(value)
            if moved:
                self.saturations += 1
                logger.warning('sensor saturated at step %d (%.4g)', k, value)
            readings.append(clipped)
        frame = read_response(k & 0xFFFF, self.unit_id, pack_measurement(readings, self.sensor_codec))
        self.fabric.send(self.host, self.controller_host, Proto.SCADA, encode_frame(frame))

    def on_packet(self, packet: Packet, now: int) -> None:
        if packet.proto is not Proto.SCADA:
            return
        try:
            frame = decode_frame(packet.payload)
            if frame.function is not FunctionKind.WRITE_MULTIPLE_REQUEST:
                return
            u = unpack_measurement(frame.register_values, self.actuation_codec)
        except (FrameDecodeError, ScadaEncodingError) as exc:
            self.rejected_commands += 1
            logger.debug('actuator rejected frame: %s', exc)
            return
        if u.shape != (self.model.m,):
            self.rejected_commands += 1
            return
        self.u_held = u
        self.last_command_tid = frame.transaction_id
        self.last_actuation_delay_us = now - packet.created_at
