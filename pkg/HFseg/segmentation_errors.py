#!/usr/bin/env python3
"""
Exception types raised by the HF segmentation modules

Every error derives from HFSegError so the CLI can report library failures
with one except clause. File-system problems are left as the builtin OSError.
"""


class HFSegError(Exception):
    """Base class for all segmentation errors"""


class DimensionError(HFSegError, ValueError):
    """Array or file dimensions disagree with what was declared"""


class FormatError(HFSegError, ValueError):
    """Image file decodes, but not as 8-bit single-channel grayscale"""


class ParameterError(HFSegError, ValueError):
    """A parameter is outside its allowed range"""


class PreconditionError(HFSegError, ValueError):
    """An operation's input ordering requirement is violated"""


class DegenerateDataError(HFSegError):
    """Data carries too little information for the requested computation"""


class ConsistencyError(HFSegError):
    """Two inputs that must describe the same thing do not"""


class UndefinedCorrelationError(HFSegError):
    """Correlation requested for a constant series"""


class DegenerateRegionError(HFSegError):
    """Image region has zero spread"""


class SampleSizeError(HFSegError, ValueError):
    """Too few paired samples"""


class DegenerateStatisticError(HFSegError):
    """Mean squares leave a statistic undefined"""
