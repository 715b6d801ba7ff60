class SingalignError(Exception):
    exit_code = 2


class ValidationError(SingalignError):
    exit_code = 1


class SingalignRuntimeError(SingalignError):
    exit_code = 2


class ManifestError(ValidationError):
    pass


class LexiconError(ValidationError):
    pass


class ArpaFormatError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class AlignmentInfeasibleError(SingalignRuntimeError):
    pass


class StageError(SingalignRuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
