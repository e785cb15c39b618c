""" failure type exceptions
    these exceptions mark a stage that ran but produced an invalid outcome
"""


class MyBaseFailure(Exception):
    pass


class TrainingDiverged(MyBaseFailure):
    """non-finite loss or gradient, the last good checkpoint is kept on disk"""

    def __init__(self, message: str, last_good_checkpoint: str = None):
        super(TrainingDiverged, self).__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


""" error type exceptions
    these exceptions mark invalid inputs, configs or artifacts
"""


class MyBaseError(Exception):
    pass


class ConfigError(MyBaseError):
    pass


class DimensionError(MyBaseError):
    pass


class ContractError(MyBaseError):
    pass


class CorpusError(MyBaseError):
    pass


class FileFormatError(MyBaseError):
    pass


class NotFoundError(MyBaseError):
    pass


class FileNotFound(FileNotFoundError, NotFoundError):
    pass


class ArtifactNotFound(NotFoundError):
    """a prerequisite artifact is missing, message names the stage to run first"""

    def __init__(self, message: str, stage: str = None):
        super(ArtifactNotFound, self).__init__(message)
        self.stage = stage


class CheckpointMismatch(MyBaseError):
    pass


class DigestMismatch(MyBaseError):
    pass
