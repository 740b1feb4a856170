"""Exception types shared across the package.

Every error carries a short machine-friendly ``kind`` so the CLI can emit a
single structured line without inspecting messages.
"""


class TexpandError(Exception):
    kind = "error"


class ImageError(TexpandError, ValueError):
    kind = "image"


class SpecError(TexpandError, ValueError):
    kind = "spec"


class SamplingError(TexpandError, ValueError):
    kind = "sampling"


class ArchiveError(TexpandError):
    kind = "archive"


class IntegrityError(ArchiveError):
    kind = "integrity"


class ExtractorError(TexpandError):
    kind = "extractor"


class ConfigError(TexpandError, ValueError):
    kind = "config"


class ConfigMismatchError(ConfigError):
    kind = "config_mismatch"

    def __init__(self, fields):
        self.fields = sorted(fields)
        super().__init__("checkpoint config differs in fields: " + ", ".join(self.fields))


class TrainingDivergedError(TexpandError):
    kind = "diverged"


class PixelBudgetError(TexpandError):
    kind = "pixel_budget"
