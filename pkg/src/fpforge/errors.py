"""Exception hierarchy shared across the package."""


class ForgeError(Exception):
    """Base class for all package errors."""

    code = "forge_error"


# data model
class ManifestParseError(ForgeError):
    code = "manifest_parse_error"

    def __init__(self, line, message="malformed manifest row"):
        self.line = line
        super().__init__(f"line {line}: {message}")


class MissingImage(ForgeError):
    code = "missing_image"

    def __init__(self, record, message=None):
        self.record = record
        super().__init__(message or f"image not found: {record.image_path}")


class DuplicateRecord(ForgeError):
    code = "duplicate_record"


class ImageDecodeError(ForgeError):
    code = "image_decode_error"


class ExportError(ForgeError):
    code = "export_error"


class RecordError(ForgeError):
    code = "record_error"


# models / training
class ParamsError(ForgeError):
    code = "params_error"


class TrainConfigError(ForgeError):
    code = "train_config_error"


class EmptyBatch(ForgeError):
    code = "empty_batch"


# warper
class BasisError(ForgeError):
    code = "basis_error"


class WarpError(ForgeError):
    code = "warp_error"


class PoseError(ForgeError):
    code = "pose_error"


# renderer
class RenderError(ForgeError):
    code = "render_error"


class LossError(ForgeError):
    code = "loss_error"


class LineageError(ForgeError):
    code = "lineage_error"


class EmptyMaterialError(ForgeError):
    code = "empty_material"


# evaluation
class MatchError(ForgeError):
    code = "match_error"


class PairingError(ForgeError):
    code = "pairing_error"


class MetricError(ForgeError):
    code = "metric_error"


class ExtractionError(ForgeError):
    code = "extraction_error"


class StatsError(ForgeError):
    code = "stats_error"


class EmptyPatchSet(ForgeError):
    code = "empty_patch_set"


class ExperimentError(ForgeError):
    code = "experiment_error"


class ConfigError(ForgeError):
    code = "config_error"
