import io
import struct
from typing import BinaryIO

import numpy as np
from numpy.typing import NDArray

from kdd_loam.data_types import FeatureSet
from kdd_loam.errors import IoFailure, MalformedHeader, SidecarError, TruncatedPayload
from kdd_loam.io.constants import DataType, FORMAT_MAPPING, Sidecar


def read_bytes(file: BinaryIO, length: int) -> bytes:
    data = file.read(length)
    if len(data) != length:
        raise TruncatedPayload(f"Expected {length} bytes, got {len(data)}")
    return data


def unpack_data(file: BinaryIO, data_type: DataType) -> int | bytes:
    fmt = FORMAT_MAPPING.get(data_type)
    if not fmt:
        raise ValueError(f"Unsupported data type: {data_type}")

    data = read_bytes(file, struct.calcsize(fmt))
    return struct.unpack(fmt, data)[0]


class FeatureSidecarParser:
    def __init__(self) -> None:
        self.count: int = 0
        self.dim: int = 0
        self.descriptors: NDArray[np.float32] = np.zeros((0, 0), dtype=np.float32)
        self.saliency: NDArray[np.float32] = np.zeros(0, dtype=np.float32)

    @classmethod
    def load_from_file(
        cls, filepath: str
    ) -> tuple[NDArray[np.float32], NDArray[np.float32]]:
        try:
            with open(filepath, "rb") as file:
                parser = cls()
                parser.parse(file)
        except OSError as e:
            raise IoFailure(f"{filepath}: {e}") from e

        return parser.descriptors, parser.saliency

    @classmethod
    def load_from_bytes(
        cls, data: bytes
    ) -> tuple[NDArray[np.float32], NDArray[np.float32]]:
        with io.BytesIO(data) as data_stream:
            parser = cls()
            parser.parse(data_stream)

        return parser.descriptors, parser.saliency

    def parse(self, file: BinaryIO) -> None:
        self.parse_header(file)
        self.parse_records(file)

    def parse_header(self, file: BinaryIO) -> None:
        try:
            magic = unpack_data(file, DataType.MAGIC)
            version = unpack_data(file, DataType.UNSIGNED_INT)
            self.count = int(unpack_data(file, DataType.UNSIGNED_INT))
            self.dim = int(unpack_data(file, DataType.UNSIGNED_INT))
        except TruncatedPayload as e:
            raise MalformedHeader(f"Incomplete sidecar header: {e}") from e

        if magic != Sidecar.MAGIC:
            raise MalformedHeader(f"Invalid sidecar magic: {magic!r}")
        if version != Sidecar.VERSION:
            raise MalformedHeader(f"Unsupported sidecar version: {version}")

    def parse_records(self, file: BinaryIO) -> None:
        record_values = self.dim + 1
        payload = file.read(self.count * record_values * Sidecar.VALUE_SIZE)
        expected = self.count * record_values * Sidecar.VALUE_SIZE
        if len(payload) != expected:
            raise TruncatedPayload(
                f"Sidecar payload has {len(payload)} bytes, expected {expected}"
            )
        if file.read(1):
            raise SidecarError("Trailing bytes after sidecar payload")

        records = np.frombuffer(payload, dtype="<f4").reshape(self.count, record_values)
        self.descriptors = records[:, : self.dim].astype(np.float32)
        self.saliency = records[:, self.dim].astype(np.float32)


def encode_features(fs: FeatureSet) -> bytes:
    header = struct.pack(
        Sidecar.HEADER_FORMAT, Sidecar.MAGIC, Sidecar.VERSION, len(fs), fs.dim
    )
    records = np.empty((len(fs), fs.dim + 1), dtype="<f4")
    records[:, : fs.dim] = fs.descriptors
    records[:, fs.dim] = fs.saliency
    return header + records.tobytes()


def write_features(path: str, fs: FeatureSet) -> None:
    try:
        with open(path, "wb") as file:
            file.write(encode_features(fs))
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
