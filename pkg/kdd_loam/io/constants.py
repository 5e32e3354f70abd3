from enum import Enum, auto


class DataType(Enum):
    UNSIGNED_INT = auto()
    FLOAT = auto()
    MAGIC = auto()


FORMAT_MAPPING = {
    DataType.UNSIGNED_INT: "<I",
    DataType.FLOAT: "<f",
    DataType.MAGIC: "4s",
}


class Sidecar:
    MAGIC = b"KDDF"
    VERSION = 1
    HEADER_FORMAT = "<4sIII"
    HEADER_SIZE = 16
    VALUE_SIZE = 4


class ScanBinary:
    RECORD_FIELDS = 4
    RECORD_SIZE = 16
    DTYPE = "<f4"


class MapRecord:
    POINT = "P"
    SURFEL = "S"


POSE_FIELDS = 12
POSE_PRECISION = 17
# Rotation defect a stored pose may carry before it is snapped back onto SO(3).
POSE_ROTATION_TOLERANCE = 1e-4
MATCH_FIELDS = 6
