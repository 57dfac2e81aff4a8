"""2:4 semi-structured sparsity mechanics.

Matrices are plain 2-D ``float64`` numpy arrays (rows = output channels,
columns = input channels). Masks are ``uint8`` arrays of the same shape with
1 = retained and 0 = pruned.

Column permutations are index vectors with the fixed orientation

    output column j  =  input column perm[j]        i.e. ``w[:, perm]``

so that ``(w[:, perm]) @ x[perm] == w @ x``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from suslab.errors import DimensionError, InvariantError

GROUP = 4
KEEP = 2

# positions left in a group after removing position i
_REST = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


def as_matrix(w) -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantError("matrix contains NaN or Inf")
    return arr


def _require_groups(arr: np.ndarray) -> None:
    if arr.shape[1] % GROUP:
        raise DimensionError(f"column count {arr.shape[1]} is not divisible by {GROUP}")


def l1(values) -> float:
    """Exactly rounded L1 norm; independent of summation order."""
    return math.fsum(np.abs(np.asarray(values, dtype=np.float64)).ravel().tolist())


def compute_mask_2to4(w) -> np.ndarray:
    """Magnitude-based 2:4 mask: keep the two largest |w| in every group of four.

    Ties go to the lowest column index.
    """
    arr = as_matrix(w)
    _require_groups(arr)
    n, m = arr.shape
    groups = np.abs(arr).reshape(n, m // GROUP, GROUP)
    # stable sort on the negated magnitude keeps lower indices first among equals
    order = np.argsort(-groups, axis=-1, kind="stable")[..., :KEEP]
    mask = np.zeros(groups.shape, dtype=np.uint8)
    np.put_along_axis(mask, order, 1, axis=-1)
    return mask.reshape(n, m)


def is_24_mask(mask) -> bool:
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[1] % GROUP:
        return False
    if not np.all((arr == 0) | (arr == 1)):
        return False
    counts = arr.reshape(arr.shape[0], -1, GROUP).sum(axis=-1)
    return bool(np.all(counts == KEEP))


def check_24_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if not is_24_mask(arr):
        raise InvariantError("mask does not keep exactly 2 of every 4 consecutive entries")
    return arr.astype(np.uint8, copy=False)


def apply_mask(w, mask) -> np.ndarray:
    """Hadamard product ``w ⊙ mask``; pruned positions become +0.0."""
    arr = as_matrix(w)
    bits = np.asarray(mask)
    if bits.shape != arr.shape:
        raise DimensionError(f"mask shape {bits.shape} does not match weights {arr.shape}")
    return np.where(bits.astype(bool), arr, 0.0)


def complement_mask(mask) -> np.ndarray:
    """``1 - mask``. The result marks the pruned half and is not itself a 2:4 mask."""
    bits = np.asarray(mask)
    return (1 - bits).astype(np.uint8)


def top_half_mask(w) -> np.ndarray:
    """Per-row selection of the m/2 largest magnitudes (lowest index wins ties)."""
    arr = as_matrix(w)
    _require_groups(arr)
    n, m = arr.shape
    order = np.argsort(-np.abs(arr), axis=1, kind="stable")[:, : m // 2]
    sel = np.zeros(arr.shape, dtype=np.uint8)
    np.put_along_axis(sel, order, 1, axis=1)
    return sel


def upper_bound_l1(w) -> float:
    """L1 norm of the unconstrained top-50%-per-row selection, ``‖W*_2:4‖₁``."""
    arr = as_matrix(w)
    return l1(arr[top_half_mask(arr).astype(bool)])


def pruned_l1(w) -> float:
    """L1 norm kept by magnitude 2:4 pruning of ``w`` as given."""
    arr = as_matrix(w)
    return l1(arr[compute_mask_2to4(arr).astype(bool)])


@dataclass(frozen=True)
class MagnitudeReport:
    l1_pruned: float
    l1_upper: float
    mag_r: float


def magnitude_report(w, perm=None) -> MagnitudeReport:
    arr = as_matrix(w)
    _require_groups(arr)
    upper = upper_bound_l1(arr)
    permuted = arr if perm is None else permute_columns(arr, perm)
    kept = pruned_l1(permuted)
    ratio = 1.0 if upper == 0.0 else kept / upper
    return MagnitudeReport(l1_pruned=kept, l1_upper=upper, mag_r=ratio)


# ---------------------------------------------------------------------------
# Column permutations
# ---------------------------------------------------------------------------

def identity_permutation(m: int) -> np.ndarray:
    return np.arange(m, dtype=np.int64)


def check_permutation(perm, m: Optional[int] = None) -> np.ndarray:
    p = np.asarray(perm)
    if p.ndim != 1 or not np.issubdtype(p.dtype, np.integer):
        raise InvariantError("permutation must be a 1-D integer vector")
    if m is not None and p.shape[0] != m:
        raise DimensionError(f"permutation length {p.shape[0]} does not match {m} columns")
    if not np.array_equal(np.sort(p), np.arange(p.shape[0])):
        raise InvariantError("permutation is not a bijection on 0..m-1")
    return p.astype(np.int64, copy=False)


def inverse_permutation(perm) -> np.ndarray:
    p = check_permutation(perm)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.shape[0])
    return inv


def permute_columns(w, perm) -> np.ndarray:
    """Return ``W·P``: column j of the result is column ``perm[j]`` of ``w``."""
    arr = as_matrix(w)
    p = check_permutation(perm, arr.shape[1])
    return arr[:, p]


def _group_assignment_perm(first: tuple[int, ...], m: int) -> np.ndarray:
    rest = [c for c in range(m) if c not in first]
    return np.array(list(first) + rest, dtype=np.int64)


def _exhaustive_search(arr: np.ndarray) -> np.ndarray:
    # m == 8: a permutation only matters through how it splits columns into
    # two groups of four, so fixing column 0 in the first group covers all
    # 35 distinct assignments. The identity split is enumerated first.
    m = arr.shape[1]
    best = identity_permutation(m)
    best_score = pruned_l1(arr)
    for combo in itertools.combinations(range(1, m), GROUP - 1):
        perm = _group_assignment_perm((0,) + combo, m)
        score = pruned_l1(arr[:, perm])
        if score > best_score:
            best, best_score = perm, score
    return best


def _greedy_search(arr: np.ndarray, max_swaps: int) -> np.ndarray:
    n, m = arr.shape
    perm = identity_permutation(m)
    group_of = np.arange(m) // GROUP
    same_group = group_of[:, None] == group_of[None, :]

    for _ in range(max_swaps):
        a = np.abs(arr[:, perm])
        groups = a.reshape(n, m // GROUP, GROUP)
        top2 = np.sort(groups, axis=-1)[..., -KEEP:].sum(axis=-1)      # (n, g)
        old = top2.sum(axis=0)                                          # (g,)
        rest = np.sort(groups[..., _REST], axis=-1)                     # (n, g, 4, 3)
        s1 = rest[..., 2].reshape(n, m)
        s2 = rest[..., 1].reshape(n, m)
        # score of a's group after column a is replaced by column b
        new = s1.sum(axis=0)[:, None] + np.maximum(s2[:, :, None], a[:, None, :]).sum(axis=0)
        gain = new + new.T - old[group_of][:, None] - old[group_of][None, :]
        gain[same_group] = -np.inf
        flat = int(np.argmax(gain))
        i, j = divmod(flat, m)
        if not gain[i, j] > 1e-12 * max(float(old.sum()), 1.0):
            break
        perm[[i, j]] = perm[[j, i]]
    return perm


def search_permutation(w, max_swaps: Optional[int] = None) -> np.ndarray:
    """Find a column permutation that raises the L1 norm kept by 2:4 pruning.

    Exhaustive over group assignments for m <= 8, otherwise greedy best-swap
    hill climbing capped at ``max_swaps`` swaps (default m*m). Returns the
    identity when pruning already keeps the per-row top half, and never
    returns a permutation that keeps less than the identity.
    """
    arr = as_matrix(w)
    _require_groups(arr)
    m = arr.shape[1]
    base = pruned_l1(arr)
    if m == GROUP or base == upper_bound_l1(arr):
        return identity_permutation(m)
    if m <= 8:
        perm = _exhaustive_search(arr)
    else:
        perm = _greedy_search(arr, m * m if max_swaps is None else max_swaps)
    if not pruned_l1(arr[:, perm]) > base:
        return identity_permutation(m)
    return perm


# ---------------------------------------------------------------------------
# Conv weights
# ---------------------------------------------------------------------------

def flatten_conv(weights) -> np.ndarray:
    """[out_ch, in_ch, kh, kw] -> [out_ch, in_ch*kh*kw], (in_ch, kh, kw) order."""
    arr = np.asarray(weights, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionError(f"expected a 4-D conv weight, got shape {arr.shape}")
    flat = arr.reshape(arr.shape[0], -1)
    _require_groups(flat)
    return flat


def unflatten_conv(w, shape) -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or arr.shape != (shape[0], shape[1] * shape[2] * shape[3]):
        raise DimensionError(f"cannot reshape {arr.shape} to conv shape {shape}")
    return arr.reshape(shape)
