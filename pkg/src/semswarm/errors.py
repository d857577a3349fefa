"""Exception types shared across the engine."""


class SemswarmError(Exception):
    """Base class for all engine errors."""


class InvalidParameter(SemswarmError):
    pass


class EmptyWorld(SemswarmError):
    pass


class EmptyTrajectory(SemswarmError):
    pass


class ImageTooSmall(SemswarmError):
    pass


class DimensionError(SemswarmError):
    pass


class EmptyInput(SemswarmError):
    pass


class InsufficientAgents(SemswarmError):
    pass


class EmptyPrompt(SemswarmError):
    pass


class EmbedServiceError(SemswarmError):
    pass


class ProtocolError(SemswarmError):
    pass


class DatasetTooSmall(SemswarmError):
    pass


class SingularSystem(SemswarmError):
    pass


class BoundaryValue(SemswarmError):
    pass


class CovarianceError(SemswarmError):
    pass


class InvalidFitness(SemswarmError):
    pass


class PopulationMismatch(SemswarmError):
    pass


class TooManyClusters(SemswarmError):
    pass


class InsufficientData(SemswarmError):
    pass


class CapacityExceeded(SemswarmError):
    pass


class NotFound(SemswarmError):
    pass


class ParseError(SemswarmError):
    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number
