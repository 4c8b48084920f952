"""
Simulation Errors
Exception hierarchy shared by every component, and the CLI exit-code contract
"""

from typing import Optional


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_AUDIT = 3
EXIT_DIVERGENCE = 4


class SimulationError(Exception):
    """Base class for every error raised by the simulator"""


class ConfigurationError(SimulationError):
    """Invalid scenario, model or controller parameters"""


class SchemaError(ConfigurationError):
    """Scenario file violates the schema"""

    def __init__(self, message: str, key: str = '', line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f" at '{key}'" if key else ''
        if line is not None:
            where += f' (line {line})'
        super().__init__(f'config error{where}: {message}')


class DimensionError(ConfigurationError):
    """Matrix or vector dimensions do not agree"""


class CovarianceError(ConfigurationError):
    """Covariance matrix is not symmetric positive (semi)definite"""


class UnstabilizableError(ConfigurationError):
    """Riccati recursion did not converge or the closed loop is unstable"""


class DisconnectedTopologyError(ConfigurationError):
    """Topology graph is not connected at load time"""


class SchedulingError(SimulationError):
    """Event scheduled in the past or dequeued out of order"""


class PlantDivergenceError(SimulationError):
    """Plant state left the configured bound or became non-finite"""

    def __init__(self, step: int, norm: float):
        self.step = step
        self.norm = norm
        super().__init__(f'plant diverged at step {step} (|x| = {norm:.3g})')


class ScadaError(SimulationError):
    """SCADA frame or register codec failure"""


class ScadaEncodingError(ScadaError):
    """Frame or value cannot be represented on the wire"""


class FrameDecodeError(ScadaError):
    """Structured decode failure naming the offending byte offset"""

    kind = 'decode-error'

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f'{message} at offset {offset}')


class ShortBufferError(FrameDecodeError):
    kind = 'short-buffer'


class LengthMismatchError(FrameDecodeError):
    kind = 'length-mismatch'


class ProtocolIdError(FrameDecodeError):
    kind = 'protocol-id'


class UnknownFunctionError(FrameDecodeError):
    kind = 'unknown-function'


class RegisterCountError(FrameDecodeError):
    kind = 'register-count'


class ControlPlaneError(SimulationError):
    """Rule operation addressed to a switch that does not exist"""


class IdentificationError(SimulationError):
    """System identification could not produce an estimate"""


class InsufficientSamplesError(IdentificationError):
    pass


class InsufficientExcitationError(IdentificationError):
    pass


class ComparisonError(SimulationError):
    """Two runs cannot be compared"""


class AuditFailure(SimulationError):
    """A per-run invariant audit failed"""

    def __init__(self, failed: list):
        self.failed = list(failed)
        super().__init__(f"invariant audit failed: {', '.join(self.failed)}")


def exit_code_for(exc: BaseException) -> int:
    """Map an exception onto the stable CLI exit-code contract"""
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, AuditFailure):
        return EXIT_AUDIT
    if isinstance(exc, PlantDivergenceError):
        return EXIT_DIVERGENCE
    return 1
