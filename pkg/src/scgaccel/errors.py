"""Exception hierarchy shared across the accelerator twin."""


class AccelError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AccelError):
    """Tensor or parameter dimensions do not match the layer contract."""


class ConfigError(AccelError):
    """A layer or network configuration violates a hardware constraint."""


class AccumulatorOverflow(AccelError):
    """A 32-bit accumulator would overflow; never silently wrapped."""


class CapacityError(AccelError):
    """A memory image exceeds the physical capacity of its target."""


class SerializationError(AccelError):
    """Malformed or truncated model byte stream."""


class TruncationError(SerializationError):
    """Byte stream ended before the declared content."""


class BadMagicError(SerializationError):
    """Byte stream does not start with the expected magic."""


class StateError(AccelError):
    """Operation issued while the machine is in the wrong state."""


class MemoryFault(AccelError):
    """Illegal memory access detected by the simulator."""


class SimFault(AccelError):
    """Internal simulator invariant breached; carries cycle context."""


class FramingError(AccelError):
    """Wire frame violates the framing rules (size, SOF)."""


class CrcError(FramingError):
    """Frame CRC check failed."""


class ProtocolError(AccelError):
    """Host/device exchange violated the protocol contract."""


class VerificationError(ProtocolError):
    """Device memory readback digest does not match the host's."""


class TransportError(AccelError):
    """Transport-level failure (closed stream, timeout)."""
