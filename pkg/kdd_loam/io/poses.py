import os

import numpy as np

from kdd_loam.data_types import (
    ROTATION_TOLERANCE,
    Pose,
    nearest_rotation,
    rotation_defect,
)
from kdd_loam.errors import FieldCountMismatch, IoFailure, NonNumeric, NotARotation
from kdd_loam.io.constants import POSE_FIELDS, POSE_PRECISION, POSE_ROTATION_TOLERANCE


def parse_pose_line(line: str, line_number: int) -> Pose:
    fields = line.split()
    if len(fields) != POSE_FIELDS:
        raise FieldCountMismatch(
            line_number, f"expected {POSE_FIELDS} fields, got {len(fields)}"
        )

    try:
        values = [float(field) for field in fields]
    except ValueError as e:
        raise NonNumeric(line_number, str(e)) from e

    m = np.reshape(values, (3, 4))
    rotation = m[:, :3]
    defect = rotation_defect(rotation)
    if not defect <= POSE_ROTATION_TOLERANCE:
        raise NotARotation(line_number, f"rotation defect {defect:.3g}")
    # Files written with few digits carry rounded rotations.
    if defect > ROTATION_TOLERANCE:
        rotation = nearest_rotation(rotation)
    return Pose(rotation, m[:, 3])


def format_pose_line(pose: Pose) -> str:
    values = pose.as_matrix()[:3, :].ravel()
    return " ".join(f"{value:.{POSE_PRECISION}g}" for value in values)


def read_poses(path: str) -> list[Pose]:
    try:
        with open(path) as file:
            lines = file.readlines()
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e

    return [
        parse_pose_line(line, number)
        for number, line in enumerate(lines, start=1)
        if line.strip()
    ]


def write_poses(path: str, poses: list[Pose]) -> None:
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as file:
            for pose in poses:
                file.write(format_pose_line(pose) + "\n")
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
