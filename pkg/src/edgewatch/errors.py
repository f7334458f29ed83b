"""Exception hierarchy shared by every edgewatch module."""


class EdgewatchError(Exception):
    """Base class for all errors raised by this package."""


# quantkit
class EmptyInput(EdgewatchError, ValueError):
    pass


class NonFiniteValue(EdgewatchError, ValueError):
    pass


# detector
class DimensionMismatch(EdgewatchError, ValueError):
    pass


# dss
class TimeRegression(EdgewatchError, ValueError):
    pass


# vault / envelope format
class MalformedEnvelope(EdgewatchError, ValueError):
    """Envelope bytes cannot be parsed (too short, bad length, bad header)."""


class BadMagic(MalformedEnvelope):
    pass


class UnsupportedVersion(MalformedEnvelope):
    pass


class KeyMismatch(EdgewatchError):
    pass


class IntegrityFailure(EdgewatchError):
    """CRC-32 of the decrypted payload does not match: wrong key or corruption."""


class StorageFull(EdgewatchError):
    pass


class DuplicateIncident(EdgewatchError):
    pass


# transport
class QueueFull(EdgewatchError):
    pass


# agent
class UnknownKeyId(EdgewatchError, KeyError):
    pass


class UnknownVehicle(EdgewatchError, KeyError):
    pass


class UnknownIncident(EdgewatchError, KeyError):
    pass


class InvalidRecord(EdgewatchError, ValueError):
    pass


# metrics
class ZeroDenominator(EdgewatchError, ZeroDivisionError):
    def __init__(self, score):
        super().__init__(f"{score} is undefined: zero denominator")
        self.score = score


class EmptySampleSet(EdgewatchError, ValueError):
    pass


# simcore
class ConsentWithheld(EdgewatchError):
    pass


class InvalidScenario(EdgewatchError, ValueError):
    pass
