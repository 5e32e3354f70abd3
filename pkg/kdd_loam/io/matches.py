import numpy as np
from numpy.typing import ArrayLike, NDArray

from kdd_loam.errors import FieldCountMismatch, IoFailure, NonNumeric
from kdd_loam.io.constants import MATCH_FIELDS


def read_matches(path: str) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Putative matches, one `sx sy sz dx dy dz` line each."""
    try:
        with open(path) as file:
            lines = file.readlines()
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e

    rows = []
    for number, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != MATCH_FIELDS:
            raise FieldCountMismatch(
                number, f"expected {MATCH_FIELDS} fields, got {len(fields)}"
            )
        try:
            rows.append([float(field) for field in fields])
        except ValueError as e:
            raise NonNumeric(number, str(e)) from e

    values = np.reshape(np.array(rows, dtype=np.float64), (-1, MATCH_FIELDS))
    return values[:, :3], values[:, 3:]


def write_matches(path: str, src: ArrayLike, dst: ArrayLike) -> None:
    rows = np.hstack(
        [np.reshape(np.asarray(src), (-1, 3)), np.reshape(np.asarray(dst), (-1, 3))]
    )
    try:
        with open(path, "w") as file:
            for row in rows:
                file.write(" ".join(f"{v:.9g}" for v in row) + "\n")
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
