"""Exception hierarchy for MedKGRec.

Every error carries a ``category`` that the command line prints as
``error[<category>]: <message>``.
"""

from typing import Optional


class MedRecError(Exception):
    """Base class for all MedKGRec errors."""

    category = 'error'


class ConfigError(MedRecError, ValueError):
    """Invalid or inconsistent configuration."""

    category = 'config'


class SpecError(ConfigError):
    """Invalid synthetic dataset specification."""


class BadRatiosError(ConfigError):
    """Split ratios that are not positive or do not sum to one."""


class ParseError(MedRecError, ValueError):
    """Malformed line in an input file."""

    category = 'parse'

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        location = ''
        if path is not None:
            location += f"{path}:"
        if line is not None:
            location += f"{line}:"
        super().__init__(f"{location} {message}" if location else message)


class UnknownClassError(ParseError):
    """Entity class tag outside {patient, disease, medicine, other}."""


class ClassConflictError(MedRecError, ValueError):
    """A known entity name re-interned with a different class."""

    category = 'data'


class UnknownIdError(MedRecError, KeyError):
    """Entity or relation id (or name) that was never interned."""

    category = 'data'

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else 'unknown id'


class SaturatedError(MedRecError, ValueError):
    """Fewer valid corruptions exist than negatives requested."""

    category = 'sampling'


class EmptyUniverseError(MedRecError, ValueError):
    """Softmax requested over an empty item universe."""

    category = 'sampling'


class EmptySamplerError(EmptyUniverseError):
    """Noise sampler with no item of positive mass."""


class NonFiniteError(MedRecError, ArithmeticError):
    """Non-finite value, or divergence detected during training."""

    category = 'numeric'

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class EmptyDiagnosesError(MedRecError, ValueError):
    """New-patient query without diagnoses."""

    category = 'query'


class EmptyCandidatesError(MedRecError, ValueError):
    """Recommendation requested over an empty candidate pool."""

    category = 'query'


class EmptyReferenceError(MedRecError, ValueError):
    """Jaccard against an empty reference set."""

    category = 'evaluation'


class EmptyHeldOutError(MedRecError, ValueError):
    """Evaluation protocol run on an empty held-out set."""

    category = 'evaluation'


class LeakageError(MedRecError, ValueError):
    """Cold-start target that has a training edge."""

    category = 'evaluation'


class IoError(MedRecError, OSError):
    """Filesystem failure while reading or writing artifacts."""

    category = 'io'
