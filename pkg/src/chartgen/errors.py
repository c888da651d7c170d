"""Exception hierarchy shared by every chartgen module.

The CLI reports ``type(exc).__name__`` so class names double as error codes.
"""


class ChartgenError(Exception):
    """Base class for all domain errors."""


# chart_io
class MissingSection(ChartgenError):
    pass


class MalformedLine(ChartgenError):
    def __init__(self, line_no: int, line: str = "", reason: str = ""):
        self.line_no = line_no
        self.line = line
        msg = f"line {line_no}: {line!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class NonMonotonicTempo(ChartgenError):
    pass


class UnknownFretIndex(ChartgenError):
    pass


# tokenizer
class EmptyFretSet(ChartgenError):
    pass


class NotANoteToken(ChartgenError):
    pass


# time_grid
class BinCollision(ChartgenError):
    def __init__(self, bin_index: int, events):
        self.bin_index = bin_index
        self.events = list(events)
        super().__init__(f"bin {bin_index} receives {len(self.events)} onsets: {self.events}")


class WindowEmpty(ChartgenError):
    pass


class TooFewNotes(ChartgenError):
    pass


class BadMagic(ChartgenError):
    pass


class ShapeMismatch(ChartgenError):
    pass


# stats
class EmptyCorpus(ChartgenError):
    pass


# audio
class UnsupportedEncoding(ChartgenError):
    pass


class CorruptHeader(ChartgenError):
    pass


class TooShort(ChartgenError):
    pass


# model
class SequenceTooLong(ChartgenError):
    pass


class MissingCodes(ChartgenError):
    pass


# training
class EmptyAfterFilter(ChartgenError):
    pass


class DivergedLoss(ChartgenError):
    pass


class BatchTooSmall(ChartgenError):
    pass


class RegimeMismatch(ChartgenError):
    pass


# metrics
class EmptyEvalSet(ChartgenError):
    pass


# synth
class InfeasibleDensity(ChartgenError):
    pass


# generate
class PolicyInvalid(ChartgenError):
    pass
