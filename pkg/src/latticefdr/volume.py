"""Grid bookkeeping for 3-D statistic volumes.

Everything downstream of file IO works on flat per-voxel arrays. The
canonical flattening order used repository-wide is x fastest, then y,
then z: flat index ``i = x + nx * (y + ny * z)``. Volumes are numpy
arrays of shape ``(nx, ny, nz)`` indexed ``[x, y, z]``, so the canonical
order is Fortran ravel order for that shape.

A mask is a boolean volume selecting the voxels that take part in the
analysis. Flattening a masked volume keeps the canonical order of the
surviving voxels.
"""

from __future__ import annotations

import numpy as np

from latticefdr.errors import DegenerateInputError

__all__ = [
    "check_dims",
    "coordinates",
    "flatten",
    "full_mask",
    "unflatten",
]


def check_dims(dims) -> tuple[int, int, int]:
    """Validate grid dimensions and return them as a tuple of ints.

    Parameters
    ----------
    dims : sequence of int
        Grid extents ``(nx, ny, nz)``.

    Returns
    -------
    tuple of int

    Raises
    ------
    DegenerateInputError
        If ``dims`` does not have exactly three entries, or any entry is
        not a positive integer.
    """
    dims = tuple(dims)
    if len(dims) != 3:
        raise DegenerateInputError(
            f"grid dims must have exactly 3 entries, got {len(dims)}"
        )
    out = []
    for axis, n in zip("xyz", dims):
        if not (isinstance(n, (int, np.integer)) and not isinstance(n, bool)):
            raise DegenerateInputError(
                f"grid dim n{axis} must be an integer, got {n!r}"
            )
        if n < 1:
            raise DegenerateInputError(f"grid dim n{axis} must be >= 1, got {n}")
        out.append(int(n))
    return tuple(out)


def full_mask(dims) -> np.ndarray:
    """All-true mask for a grid."""
    return np.ones(check_dims(dims), dtype=bool)


def _check_mask(mask: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise DegenerateInputError(f"mask must be boolean, got dtype {mask.dtype}")
    if mask.shape != dims:
        raise DegenerateInputError(
            f"mask shape {mask.shape} does not match grid dims {dims}"
        )
    return mask


def coordinates(dims, mask: np.ndarray | None = None) -> np.ndarray:
    """Voxel coordinates of the (masked) grid in canonical order.

    Parameters
    ----------
    dims : sequence of int
        Grid extents ``(nx, ny, nz)``.
    mask : ndarray of bool, optional
        Voxel selection; defaults to the full grid.

    Returns
    -------
    ndarray
        Shape ``(m, 3)`` float64 array of ``(x, y, z)`` voxel indices,
        one row per selected voxel, in canonical flat order.
    """
    dims = check_dims(dims)
    nx, ny, nz = dims
    idx = np.arange(nx * ny * nz, dtype=np.int64)
    coords = np.empty((idx.size, 3), dtype=np.float64)
    coords[:, 0] = idx % nx
    coords[:, 1] = (idx // nx) % ny
    coords[:, 2] = idx // (nx * ny)
    if mask is not None:
        mask = _check_mask(mask, dims)
        coords = coords[mask.ravel(order="F")]
    return coords


def flatten(volume: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Flatten a volume to a 1-D array in canonical order.

    With a mask, only selected voxels survive; their relative order is
    unchanged.
    """
    volume = np.asarray(volume)
    dims = check_dims(volume.shape)
    flat = volume.ravel(order="F")
    if mask is None:
        return flat.copy()
    mask = _check_mask(mask, dims)
    return flat[mask.ravel(order="F")]


def unflatten(
    values: np.ndarray,
    dims,
    mask: np.ndarray | None = None,
    fill: float = 0.0,
) -> np.ndarray:
    """Scatter a flat array back into a volume.

    Parameters
    ----------
    values : ndarray
        Flat values in canonical order, either one per grid voxel or one
        per masked voxel.
    dims : sequence of int
        Target grid extents.
    mask : ndarray of bool, optional
        Where the values belong. Unselected voxels receive ``fill``.
    fill : float
        Value written outside the mask.

    Returns
    -------
    ndarray
        Volume of shape ``dims`` with dtype float64.
    """
    dims = check_dims(dims)
    n_total = dims[0] * dims[1] * dims[2]
    values = np.asarray(values, dtype=np.float64).ravel()
    flat = np.full(n_total, fill, dtype=np.float64)
    if mask is None:
        if values.size != n_total:
            raise DegenerateInputError(
                f"expected {n_total} values for dims {dims}, got {values.size}"
            )
        flat[:] = values
    else:
        mask = _check_mask(mask, dims)
        mask_flat = mask.ravel(order="F")
        m = int(mask_flat.sum())
        if values.size != m:
            raise DegenerateInputError(
                f"expected {m} masked values, got {values.size}"
            )
        flat[mask_flat] = values
    return flat.reshape(dims, order="F")
