import numpy as np

from kdd_loam.data_types import Surfel
from kdd_loam.errors import IoFailure
from kdd_loam.io.constants import MapRecord
from kdd_loam.voxelmap import VoxelHashMap


def format_map_lines(voxel_map: VoxelHashMap) -> list[str]:
    lines = []
    for _, voxel in sorted(voxel_map.items(), key=lambda item: item[0]):
        if isinstance(voxel, Surfel):
            values = [*voxel.anchor, *voxel.normal, voxel.radius]
            lines.append(" ".join([MapRecord.SURFEL, *(f"{v:.9g}" for v in values)]))
        else:
            for x, y, z in voxel.as_array():
                lines.append(f"{MapRecord.POINT} {x:.9g} {y:.9g} {z:.9g}")
    return lines


def write_map(path: str, voxel_map: VoxelHashMap) -> None:
    try:
        with open(path, "w") as file:
            for line in format_map_lines(voxel_map):
                file.write(line + "\n")
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e


def read_map(path: str) -> tuple[np.ndarray, list[Surfel]]:
    """Raw points and surfels of an exported map, in file order."""
    points: list[list[float]] = []
    surfels: list[Surfel] = []

    try:
        with open(path) as file:
            lines = file.readlines()
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e

    for number, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue

        match fields:
            case [MapRecord.POINT, x, y, z]:
                points.append([float(x), float(y), float(z)])
            case [MapRecord.SURFEL, *values] if len(values) == 7:
                v = [float(value) for value in values]
                surfels.append(Surfel(v[:3], v[3:6], v[6]))
            case _:
                raise ValueError(f"{path}:{number}: malformed map record")

    return np.reshape(np.array(points), (-1, 3)), surfels
