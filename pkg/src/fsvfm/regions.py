"""Patch-level facial region indices from pixel-level parsing maps.

Raw parser labels are merged into 8 regions; a patch straddling skin and
background (or skin and hair) becomes face_boundary, every other patch takes
the merged region holding the majority of its pixels, with ties broken in
favor of the smaller structures so eyebrows/eyes are never absorbed by skin.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, TaxonomyError
from .synth import ParsingMap, RawLabel

__all__ = ["Region", "SELECTABLE_REGIONS", "MERGE_RULES", "PatchRegionIndex",
           "patchify_parsing", "region_sizes"]


class Region(enum.IntEnum):
    """Merged facial-region taxonomy, in its fixed canonical order."""

    EYEBROWS = 0
    EYES = 1
    MOUTH = 2
    FACE_BOUNDARY = 3
    NOSE = 4
    HAIR = 5
    SKIN = 6
    BACKGROUND = 7


# regions eligible for full coverage by the region-first masking strategies
SELECTABLE_REGIONS = (
    Region.EYEBROWS,
    Region.EYES,
    Region.MOUTH,
    Region.FACE_BOUNDARY,
    Region.NOSE,
    Region.HAIR,
)

MERGE_RULES = {
    RawLabel.BACKGROUND: Region.BACKGROUND,
    RawLabel.SKIN: Region.SKIN,
    RawLabel.HAIR: Region.HAIR,
    RawLabel.LEFT_EYEBROW: Region.EYEBROWS,
    RawLabel.RIGHT_EYEBROW: Region.EYEBROWS,
    RawLabel.LEFT_EYE: Region.EYES,
    RawLabel.RIGHT_EYE: Region.EYES,
    RawLabel.NOSE: Region.NOSE,
    RawLabel.UPPER_LIP: Region.MOUTH,
    RawLabel.INNER_MOUTH: Region.MOUTH,
    RawLabel.LOWER_LIP: Region.MOUTH,
}

# majority ties resolved small-structure-first (face_boundary never ties:
# it is assigned combinatorially before the vote)
_TIE_PRIORITY = (
    Region.EYEBROWS,
    Region.EYES,
    Region.MOUTH,
    Region.NOSE,
    Region.HAIR,
    Region.SKIN,
    Region.BACKGROUND,
)


@dataclass
class PatchRegionIndex:
    """Per-patch region labels for one image, plus per-region member lists."""

    grid: tuple  # (gh, gw)
    patch_size: int
    region_of: np.ndarray  # int8, length N

    @property
    def n_patches(self) -> int:
        return int(self.region_of.size)

    @property
    def members(self) -> dict:
        """Region -> sorted array of patch indices. Partition of {0..N-1}."""
        return {
            region: np.flatnonzero(self.region_of == int(region))
            for region in Region
        }


def patchify_parsing(parsing: ParsingMap, patch_size: int, merge_rules=None) -> PatchRegionIndex:
    """Collapse each patch_size x patch_size tile of the map to one region."""
    rules = MERGE_RULES if merge_rules is None else merge_rules
    labels = parsing.labels
    h, w = labels.shape
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise ShapeError(f"map {h}x{w} not divisible by patch size {patch_size}")
    known = np.array(sorted(int(k) for k in rules), dtype=np.int64)
    if not np.isin(labels, known).all():
        bad = sorted(set(np.unique(labels).tolist()) - set(known.tolist()))
        raise TaxonomyError(f"unknown raw label codes {bad}")

    gh, gw = h // patch_size, w // patch_size
    tiles = labels.reshape(gh, patch_size, gw, patch_size).swapaxes(1, 2)
    tiles = tiles.reshape(gh * gw, patch_size * patch_size)

    # pixel counts per raw code, then merged into per-region counts
    raw_counts = np.zeros((gh * gw, int(known.max()) + 1), dtype=np.int64)
    for code in known:
        raw_counts[:, code] = (tiles == code).sum(axis=1)
    region_counts = np.zeros((gh * gw, len(Region)), dtype=np.int64)
    for code in known:
        region_counts[:, int(rules[RawLabel(code)])] += raw_counts[:, code]

    has_skin = raw_counts[:, int(RawLabel.SKIN)] > 0
    boundary = has_skin & (
        (raw_counts[:, int(RawLabel.BACKGROUND)] > 0)
        | (raw_counts[:, int(RawLabel.HAIR)] > 0)
    )

    # majority with fixed-priority tie-break; scan order cannot matter because
    # only the per-patch count vector is consulted
    priority_cols = np.array([int(r) for r in _TIE_PRIORITY])
    ordered = region_counts[:, priority_cols]
    winner = priority_cols[np.argmax(ordered, axis=1)]

    region_of = np.where(boundary, int(Region.FACE_BOUNDARY), winner).astype(np.int8)
    return PatchRegionIndex(grid=(gh, gw), patch_size=patch_size, region_of=region_of)


def region_sizes(index: PatchRegionIndex) -> dict:
    """Region -> patch count; counts sum to n_patches."""
    counts = np.bincount(index.region_of, minlength=len(Region))
    return {region: int(counts[int(region)]) for region in Region}
