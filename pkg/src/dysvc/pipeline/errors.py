"""Error types shared by the orchestration layer.

``ValidationError`` subclasses map to CLI exit code 2; integrity failures
(:class:`dysvc.nncore.IntegrityError`) map to exit code 3.
"""


class ValidationError(ValueError):
    pass


class ConfigError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class DependencyError(ValidationError):
    """A stage was requested before the artifacts it consumes exist."""


class MissingArtifactError(ValidationError):
    pass
