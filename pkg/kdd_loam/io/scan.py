import os

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kdd_loam.data_types import PointCloud
from kdd_loam.errors import IoFailure, SizeNotMultipleOf16
from kdd_loam.io.constants import ScanBinary


def azimuth_timestamps(
    positions: ArrayLike, clockwise: bool = False
) -> NDArray[np.float64]:
    """Fraction of the revolution swept since the first point's azimuth."""
    p = np.reshape(np.asarray(positions, dtype=np.float64), (-1, 3))
    if not len(p):
        return np.zeros(0)

    azimuth = np.arctan2(p[:, 1], p[:, 0])
    swept = azimuth - azimuth[0]
    if clockwise:
        swept = -swept

    return np.mod(swept, 2.0 * np.pi) / (2.0 * np.pi)


def decode_scan(data: bytes, clockwise: bool = False) -> PointCloud:
    if len(data) % ScanBinary.RECORD_SIZE:
        raise SizeNotMultipleOf16(
            f"Scan payload of {len(data)} bytes is not a multiple of "
            f"{ScanBinary.RECORD_SIZE}"
        )

    records = np.frombuffer(data, dtype=ScanBinary.DTYPE).reshape(
        -1, ScanBinary.RECORD_FIELDS
    )
    positions = records[:, :3].astype(np.float64)
    return PointCloud(
        positions=positions,
        timestamps=azimuth_timestamps(positions, clockwise),
        intensity=records[:, 3].astype(np.float64),
    )


def read_scan_bin(path: str, clockwise: bool = False) -> PointCloud:
    try:
        with open(path, "rb") as file:
            data = file.read()
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e

    try:
        return decode_scan(data, clockwise)
    except SizeNotMultipleOf16 as e:
        raise SizeNotMultipleOf16(f"{os.path.basename(path)}: {e}") from e


def write_scan_bin(path: str, cloud: PointCloud) -> None:
    records = np.zeros((len(cloud), ScanBinary.RECORD_FIELDS), dtype=ScanBinary.DTYPE)
    records[:, :3] = cloud.positions
    if cloud.intensity is not None:
        records[:, 3] = cloud.intensity

    try:
        with open(path, "wb") as file:
            file.write(records.tobytes())
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
