"""Shared exception types."""


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class VocabularyError(KeyError):
    """Instruction token outside the closed vocabulary."""


class TrainingDiverged(RuntimeError):
    """Loss became NaN or stayed above the divergence threshold."""


class MissingArtifact(FileNotFoundError):
    """An upstream pipeline stage has not produced its artifact yet."""

    def __init__(self, path, producing_stage: str):
        super().__init__(f"missing artifact {path}; run `{producing_stage}` first")
        self.path = path
        self.producing_stage = producing_stage
