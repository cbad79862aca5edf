"""Exception hierarchy shared across the package."""


class PhraseDubError(Exception):
    """Base class for all errors raised by phrasedub."""


class SchemaError(PhraseDubError, ValueError):
    """A manifest, request or config record does not follow its schema."""


class DuplicateIdError(PhraseDubError, ValueError):
    pass


class AlignmentError(PhraseDubError, ValueError):
    pass


class ContiguityError(AlignmentError):
    """Alignment tokens overlap or leave a gap."""


class EmptyAlignmentError(AlignmentError):
    pass


class NoSpeechError(AlignmentError):
    """An alignment contains only silence."""


class SampleRateError(PhraseDubError, ValueError):
    pass


class InputError(PhraseDubError, ValueError):
    pass


class ShapeError(PhraseDubError, ValueError):
    pass


class CountError(PhraseDubError, ValueError):
    """Two sequences that must share a phrase count do not."""


class PhraseMismatchError(CountError):
    """Source phrase count differs from the target phrase count."""

    def __init__(self, source_count: int, target_count: int):
        self.source_count = source_count
        self.target_count = target_count
        super().__init__(
            f"source reference has {source_count} phrase(s) but target text has "
            f"{target_count} phrase(s); phrase breaks must align one-to-one"
        )


class CleanReferenceError(PhraseDubError, ValueError):
    """The clean noise reference does not contain exactly one phrase."""


class PluginError(PhraseDubError, ValueError):
    """A pluggable component broke its contract."""


class ConfigurationError(PhraseDubError, ValueError):
    pass


class ModeError(ConfigurationError):
    pass


class NumericError(PhraseDubError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    pass


class PairingError(PhraseDubError, ValueError):
    pass


class CheckpointError(PhraseDubError, ValueError):
    pass
