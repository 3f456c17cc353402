"""Error taxonomy for the export adapter."""


class AdapterError(Exception):
    """Base class for adapter failures."""


class BadSpec(AdapterError):
    """Extraction parameters are invalid or inconsistent."""


class EncoderUnavailable(AdapterError):
    """The requested encoder id is not registered."""


class UndecodableImage(AdapterError):
    """Pillow could not decode an input file."""


class ExportFailure(AdapterError):
    """An output file could not be written."""
