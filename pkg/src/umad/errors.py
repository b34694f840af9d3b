class UmadError(Exception):
    pass


class FormatError(UmadError, ValueError):
    """A file on disk does not follow the expected binary or JSON layout."""


class FlowStateError(UmadError, RuntimeError):
    """Refinement was requested after the iteration budget was spent."""


class TopologyError(UmadError, ValueError):
    """Checkpoint parameters do not fit the model they are loaded into."""


class TrainingError(UmadError, RuntimeError):
    """Raised when a loss term turns non-finite.

    ``term`` names the offending loss component and ``checkpoint`` points at
    the last checkpoint written before the failure (if any).
    """

    def __init__(self, message, term=None, checkpoint=None):
        super().__init__(message)
        self.term = term
        self.checkpoint = checkpoint
