class TrainerError(Exception):
    """Base class for every failure this package raises deliberately."""


class CorpusError(TrainerError):
    """Corpus file missing, unparseable, or violating the conversation schema."""


class ResourceError(TrainerError):
    """Training aborted on memory exhaustion."""
