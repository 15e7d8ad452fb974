"""Exception hierarchy shared by every fedload module."""


class FedloadError(Exception):
    """Base class for all errors raised by fedload."""


# dataset ---------------------------------------------------------------------
class DataError(FedloadError):
    pass


class MalformedHeader(DataError):
    pass


class DuplicateReading(DataError):
    pass


class WeatherCoverageGap(DataError):
    pass


class EmptyHousehold(DataError):
    pass


class SeriesTooShort(DataError):
    pass


class BadFractions(DataError):
    pass


class EmptyTrainingSet(DataError):
    pass


class BadDimensions(DataError):
    pass


# model -----------------------------------------------------------------------
class ModelError(FedloadError):
    pass


class LayoutMismatch(ModelError):
    pass


class NonFiniteInput(ModelError):
    pass


class EmptyBatch(ModelError):
    pass


# federation ------------------------------------------------------------------
class FederationError(FedloadError):
    pass


class EmptyRound(FederationError):
    pass


class ClientFailure(FederationError):
    def __init__(self, client_id, cause=None):
        super().__init__(f"client {client_id} failed: {cause!r}")
        self.client_id = client_id
        self.cause = cause


class EmptyDataset(FederationError):
    pass


# privacy ---------------------------------------------------------------------
class PrivacyError(FedloadError):
    pass


class MissingPairSeed(PrivacyError):
    pass


class ParticipantMissing(PrivacyError):
    pass


# clustering ------------------------------------------------------------------
class ClusteringError(FedloadError):
    pass


class TooFewClients(ClusteringError):
    pass


class EmptyCluster(ClusteringError):
    pass


# metrics ---------------------------------------------------------------------
class MetricError(FedloadError):
    pass


class AllPointsExcluded(MetricError):
    pass


class ZeroMeanTarget(MetricError):
    pass


class SchemaMismatch(MetricError):
    pass


# net -------------------------------------------------------------------------
class CodecError(FedloadError):
    """Raised by the frame decoder; subclasses classify the failure."""


class BadMagic(CodecError):
    pass


class CrcMismatch(CodecError):
    pass


class Truncated(CodecError):
    pass


class UnknownType(CodecError):
    pass


class MalformedMessage(CodecError):
    """Frame is intact but its payload is not something encode() emits."""


class ConnectionLost(FedloadError):
    pass
