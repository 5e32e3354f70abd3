class KddLoamError(Exception):
    pass


class InsufficientNeighbors(KddLoamError):
    pass


class SidecarError(KddLoamError):
    pass


class CountMismatch(SidecarError):
    pass


class MalformedHeader(SidecarError):
    pass


class TruncatedPayload(SidecarError):
    pass


class EmptyResult(KddLoamError):
    pass


class EmptyNegatives(KddLoamError):
    pass


class EmptyCorrespondences(KddLoamError):
    pass


class NonPositiveSigma(KddLoamError):
    pass


class LengthMismatch(KddLoamError):
    pass


class NoValidDescriptors(KddLoamError):
    pass


class DegenerateConfiguration(KddLoamError):
    pass


class TooFewCandidates(KddLoamError):
    pass


class NoConsensus(KddLoamError):
    pass


class NotFull(KddLoamError):
    pass


class NoSuchVoxel(KddLoamError):
    pass


class NonUnitNormal(KddLoamError):
    pass


class SingularSystem(KddLoamError):
    pass


class NoCorrespondences(KddLoamError):
    pass


class MissingSaliency(KddLoamError):
    pass


class ScanFormatError(KddLoamError):
    pass


class SizeNotMultipleOf16(ScanFormatError):
    pass


class IoFailure(KddLoamError):
    pass


class PoseFileError(KddLoamError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class FieldCountMismatch(PoseFileError):
    pass


class NonNumeric(PoseFileError):
    pass


class NotARotation(PoseFileError):
    pass


class TooShort(KddLoamError):
    pass


class EmptyPairList(KddLoamError):
    pass


class ConfigError(KddLoamError):
    pass


class MissingConfigKey(ConfigError):
    def __init__(self, key: str) -> None:
        super().__init__(f"missing config key: {key}")
        self.key = key


class UnknownConfigKey(ConfigError):
    def __init__(self, key: str) -> None:
        super().__init__(f"unknown config key: {key}")
        self.key = key


class InvalidConfigValue(ConfigError):
    pass


class ScanIngestError(KddLoamError):
    def __init__(self, index: int, cause: Exception) -> None:
        super().__init__(f"scan {index}: {cause}")
        self.index = index


class PipelineFailure(KddLoamError):
    def __init__(self, index: int, cause: Exception) -> None:
        super().__init__(f"scan {index}: {cause}")
        self.index = index
