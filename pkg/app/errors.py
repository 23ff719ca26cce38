"""
Exception hierarchy for the pipeline.
Every error carries the process exit code the CLI reports for it.
"""


class GeometryError(Exception):
    exit_code: int = 1

    def __init__(self, detail: str, exit_code: int | None = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(GeometryError):
    exit_code = 2


class MissingArtifactError(GeometryError):
    exit_code = 3

    def __init__(self, path: str, producer: str):
        super().__init__(f"Missing artifact {path}; run `{producer}` first")
        self.path = path
        self.producer = producer


class CheckpointError(GeometryError):
    exit_code = 3


class NumericalError(GeometryError):
    exit_code = 4


class DivergenceError(NumericalError):
    def __init__(self, detail: str, checkpoint: str | None = None):
        super().__init__(detail)
        self.checkpoint = checkpoint


class CalibrationError(NumericalError):
    pass


class ShootingError(NumericalError):
    pass


class NonFiniteInputError(NumericalError, ValueError):
    pass


class ShapeError(GeometryError, ValueError):
    pass


class BackwardError(GeometryError, RuntimeError):
    pass


class PathMismatchError(GeometryError, ValueError):
    pass
