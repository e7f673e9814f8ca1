"""Exception types shared across the package."""


class MonoVtrError(Exception):
    """Base class for all package-specific errors."""


class NonPositiveDepth(MonoVtrError):
    """Point has z <= 0 in the camera frame and cannot be projected."""


class DegenerateRay(MonoVtrError):
    """Pixel ray is (numerically) parallel to the ground plane."""


class NegativeDepth(MonoVtrError):
    """Ground intersection lies behind the camera or above the horizon."""


class OutOfRange(MonoVtrError):
    """Ground intersection is beyond the model's validity cutoff."""


class NonPSDCovariance(MonoVtrError):
    """Covariance matrix could not be factorized for sampling."""


class InsufficientInliers(MonoVtrError):
    """RANSAC could not find a hypothesis with enough inlier support."""

    def __init__(self, best_count: int, required: int):
        super().__init__(f"best hypothesis has {best_count} inliers, need {required}")
        self.best_count = best_count
        self.required = required


class SingularNormalEquations(MonoVtrError):
    """Gauss-Newton normal equations are rank deficient."""


class VOFailure(MonoVtrError):
    """Frame-to-frame visual odometry failed during the teach pass."""


class LocalizationFailure(MonoVtrError):
    """Map localization produced fewer matches than the failure threshold."""

    def __init__(self, match_count: int, required: int):
        super().__init__(f"{match_count} map matches, need {required}")
        self.match_count = match_count
        self.required = required


class FormatVersionMismatch(MonoVtrError):
    """Persisted file has an unsupported format name or version."""


class CorruptFile(MonoVtrError):
    """Persisted file failed its checksum or structural validation."""


class SchemaVersionMismatch(MonoVtrError):
    """Traverse-log CSV carries an unsupported schema version."""


class MapRigMismatch(MonoVtrError):
    """Map was taught with a different rig than the current config."""


class UnreachableWaypoint(MonoVtrError):
    """Drive script contains a waypoint the vehicle cannot reach."""


class ConfigError(MonoVtrError):
    """Run configuration file is malformed or inconsistent."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key
