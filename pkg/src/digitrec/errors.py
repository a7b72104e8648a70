"""Exception hierarchy shared by every module."""


class DigitRecError(Exception):
    """Base class; ``kind`` is the short machine-readable error name."""

    @property
    def kind(self):
        return type(self).__name__


# audio_io
class NotPcm(DigitRecError):
    pass


class CorruptHeader(DigitRecError):
    pass


class UnsupportedDepth(DigitRecError):
    pass


class IoFailure(DigitRecError):
    pass


class InvalidRate(DigitRecError):
    pass


class SilentNoise(DigitRecError):
    pass


class RateMismatch(DigitRecError):
    pass


# frontend / features
class InvalidFftSize(DigitRecError):
    pass


class LagTooLarge(DigitRecError):
    pass


class NegativeFrequency(DigitRecError):
    pass


class TooFewBins(DigitRecError):
    pass


class CorruptFeatureFile(DigitRecError):
    pass


class KindMismatch(DigitRecError):
    pass


# hmm
class EmptyTrainingSet(DigitRecError):
    pass


class DimMismatch(DigitRecError):
    pass


class SignatureMismatch(DigitRecError):
    pass


class EmptyObservation(DigitRecError):
    pass


class NoLegalPath(DigitRecError):
    pass


class CorruptModel(DigitRecError):
    pass


class VersionMismatch(DigitRecError):
    pass


# scoring / reports
class ZeroReference(DigitRecError):
    pass


class EmptyResults(DigitRecError):
    pass


class EmptyReport(DigitRecError):
    pass


class ConfigError(DigitRecError):
    pass
