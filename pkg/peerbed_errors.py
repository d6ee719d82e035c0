"""
Exception hierarchy shared by every peerbed module.
"""


class PeerbedError(Exception):
    """Base class for testbed errors"""


class LifecycleError(PeerbedError):
    """A peer or peerlet operation was attempted in the wrong lifecycle state"""


class DuplicatePeerError(PeerbedError, ValueError):
    pass


class ModeMismatchError(PeerbedError, ValueError):
    pass


class FrameError(PeerbedError, ValueError):
    """Malformed, truncated or oversize wire frame"""


class AddressError(PeerbedError, ValueError):
    pass


class BackpressureError(PeerbedError):
    """Outbound queue full under BLOCK_SENDER where blocking is impossible (SIM) or timed out"""


class ProtocolError(PeerbedError, ValueError):
    """Bootstrap protocol guard violated (wrong phase, unknown service, ...)"""


class CapacityError(ProtocolError):
    """No free service agent left to bind a device to"""


class ServiceError(PeerbedError, ValueError):
    """Precondition of an EPOS or DIAS operation not met"""


class TopologyError(ServiceError):
    pass


class MonitoringError(PeerbedError, ValueError):
    pass


class ConfigError(PeerbedError, ValueError):
    """Invalid scenario configuration; carries the file and line when known"""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.message = message


class ScenarioAbort(PeerbedError):
    """A running scenario could not complete"""
