"""
Character grid: images x characters matrix of dot products between each
image's global features and each character's representative features.
"""

import io
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tabulate import tabulate

from scripts.utils import DataError, SizeError

N_MAX = 10
M_MAX = 5
SHADES = (" ", "░", "▒", "▓", "█")


@dataclass(frozen=True, eq=False)
class CharacterGrid:
    values: np.ndarray
    image_ids: tuple
    column_ids: tuple

    @property
    def shape(self):
        return self.values.shape


def _grid(seq, columns, column_ids):
    images = seq.image_matrix()
    if columns.shape[0] and columns.shape[1] != images.shape[1]:
        raise DataError(
            "feature dimension {} does not match image dimension {}".format(
                columns.shape[1], images.shape[1]
            ),
            seq.id,
        )
    if columns.shape[0] == 0:
        values = np.zeros((images.shape[0], 0), dtype=np.float64)
    else:
        values = images @ columns.T
    return CharacterGrid(
        values=values,
        image_ids=tuple(im.image_id for im in seq.images),
        column_ids=tuple(column_ids),
    )


def compute_grid(seq):
    """c_ab = i_a . l_b; rows follow image order, columns the character list."""
    return _grid(seq, seq.character_matrix(), [c.char_id for c in seq.characters])


def compute_object_grid(seq):
    return _grid(seq, seq.object_matrix(), [o.object_id for o in seq.objects])


def compute_entity_grid(seq):
    """Character columns followed by object columns."""
    chars = compute_grid(seq)
    objs = compute_object_grid(seq)
    return CharacterGrid(
        values=np.concatenate([chars.values, objs.values], axis=1),
        image_ids=chars.image_ids,
        column_ids=chars.column_ids + objs.column_ids,
    )


def flatten_pad(grid, n_max=N_MAX, m_max=M_MAX):
    """Row-major layout into a zero-padded n_max x m_max frame; cell (a, b) -> a * m_max + b."""
    n, m = grid.values.shape
    if n > n_max or m > m_max:
        raise SizeError(
            "grid {}x{} exceeds the {}x{} frame".format(n, m, n_max, m_max)
        )
    frame = np.zeros((n_max, m_max), dtype=np.float64)
    frame[:n, :m] = grid.values
    return frame.reshape(-1)


def to_frame(grid):
    return pd.DataFrame(grid.values, index=list(grid.image_ids), columns=list(grid.column_ids))


def shade_levels(values, levels=len(SHADES)):
    """Min-max normalise into ``levels`` buckets; a constant grid is all bucket 0."""
    if values.size == 0:
        return np.zeros(values.shape, dtype=int)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=int)
    scaled = (values - lo) / (hi - lo)
    return np.minimum((scaled * levels).astype(int), levels - 1)


def grid_report(grid):
    """CSV (images as rows) and an aligned heat table with 5 shading levels.

    Returns:
        csv_text, table_text
    """
    buf = io.StringIO()
    to_frame(grid).to_csv(buf, index_label="image_id")
    levels = shade_levels(grid.values)
    rows = [
        [image_id]
        + [
            "{} {:.3f}".format(SHADES[levels[a, b]] * 2, grid.values[a, b])
            for b in range(grid.values.shape[1])
        ]
        for a, image_id in enumerate(grid.image_ids)
    ]
    table = tabulate(rows, headers=["image"] + list(grid.column_ids), tablefmt="simple")
    return buf.getvalue(), table
