from __future__ import annotations

import os
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator

from kdd_loam.data_types import FeatureSet, PointCloud
from kdd_loam.errors import IoFailure, KddLoamError, ScanIngestError
from kdd_loam.features import load_external_features
from kdd_loam.io.scan import read_scan_bin

SCAN_SUFFIX = ".bin"
SIDECAR_SUFFIX = ".kddf"


def list_directory(directory: str, suffix: str) -> list[str]:
    if not os.path.isdir(directory):
        raise IoFailure(f"Not a directory: {directory}")

    names = sorted(name for name in os.listdir(directory) if name.endswith(suffix))
    return [os.path.join(directory, name) for name in names]


@dataclass(frozen=True)
class ScanSource:
    paths: tuple[str, ...]
    clockwise: bool = False

    @classmethod
    def from_directory(cls, directory: str, clockwise: bool = False) -> ScanSource:
        return cls(tuple(list_directory(directory, SCAN_SUFFIX)), clockwise)

    def __len__(self) -> int:
        return len(self.paths)

    def read(self, index: int) -> PointCloud:
        return read_scan_bin(self.paths[index], self.clockwise)


@dataclass(frozen=True)
class FeatureSource:
    paths: tuple[str, ...]

    @classmethod
    def from_directory(cls, directory: str, scans: ScanSource) -> FeatureSource:
        """Pair one sidecar with every scan by file stem."""
        paths = []
        for scan_path in scans.paths:
            stem = os.path.splitext(os.path.basename(scan_path))[0]
            path = os.path.join(directory, stem + SIDECAR_SUFFIX)
            if not os.path.isfile(path):
                raise IoFailure(f"Missing feature sidecar for {scan_path}: {path}")
            paths.append(path)
        return cls(tuple(paths))

    def read(self, index: int, expected_count: int) -> FeatureSet:
        return load_external_features(self.paths[index], expected_count)


def iter_scans(
    scans: ScanSource, features: FeatureSource | None = None
) -> Iterator[tuple[PointCloud, FeatureSet | None]]:
    """Yield (scan, features) in order, reading one scan ahead."""

    def load(index: int) -> tuple[PointCloud, FeatureSet | None]:
        try:
            cloud = scans.read(index)
            fs = None if features is None else features.read(index, len(cloud))
        except KddLoamError as e:
            raise ScanIngestError(index, e) from e
        return cloud, fs

    with ThreadPoolExecutor(max_workers=1) as executor:
        pending: Future | None = executor.submit(load, 0) if len(scans) else None
        for index in range(len(scans)):
            assert pending is not None
            result = pending.result()
            pending = None
            if index + 1 < len(scans):
                pending = executor.submit(load, index + 1)
            yield result
