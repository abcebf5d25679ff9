"""Facial masking strategies over patch-region indices.

Five samplers share one contract: the returned image mask M has exactly
m = round(N*r) ones (1 = masked).  The region-first strategies additionally
return the facial-region mask M_fr marking the fully covered region; the
others return an all-zero M_fr.  Regional budgets are apportioned by the
largest-remainder method, which keeps every region within one patch of its
exact proportional share while hitting the total exactly.

All samplers are pure functions of (index, r, rng) and therefore thread-safe
with per-call rng instances.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, MaskingError
from .regions import Region, SELECTABLE_REGIONS, PatchRegionIndex

__all__ = [
    "MaskPair",
    "STRATEGIES",
    "mask_budget",
    "largest_remainder",
    "sample_random",
    "sample_fasking_i",
    "sample_frp",
    "sample_crfr_r",
    "sample_crfr_p",
    "sample_mask",
    "apportionment_deviation",
    "pack_mask_pair",
    "unpack_mask_pair",
]


@dataclass
class MaskPair:
    """Image mask and facial-region mask over N patches (1 = masked)."""

    mask: np.ndarray  # uint8, length N
    region_mask: np.ndarray  # uint8, length N; subset of mask
    selected_region: Region | None
    target_masked: int  # m

    @property
    def n_patches(self) -> int:
        return int(self.mask.size)


def mask_budget(n_patches: int, r: float) -> int:
    """m = round(N*r); the precondition demands 1 <= m <= N-1."""
    if not 0.0 < r < 1.0:
        raise MaskingError(f"mask ratio must lie in (0, 1), got {r}")
    m = int(round(n_patches * r))
    if m < 1 or m >= n_patches:
        raise MaskingError(f"budget round({n_patches}*{r})={m} leaves no masked or no visible patch")
    return m


def largest_remainder(budget: int, sizes) -> np.ndarray:
    """Integer shares of `budget` proportional to `sizes`, summing exactly.

    Uses exact integer arithmetic: share_i = floor(budget*s_i/total) plus one
    extra for the largest remainders.  Remainder ties break toward the larger
    region, then the lower position, so the result is order-stable.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    total = int(sizes.sum())
    if budget < 0 or budget > total:
        raise MaskingError(f"budget {budget} outside [0, {total}]")
    base = (budget * sizes) // total
    remainder = (budget * sizes) % total
    shares = base.copy()
    leftover = budget - int(base.sum())
    if leftover:
        order = sorted(
            range(len(sizes)), key=lambda i: (-remainder[i], -sizes[i], i)
        )
        for i in order[:leftover]:
            shares[i] += 1
    return shares


def _empty_pair(n: int, m: int) -> MaskPair:
    return MaskPair(
        mask=np.zeros(n, dtype=np.uint8),
        region_mask=np.zeros(n, dtype=np.uint8),
        selected_region=None,
        target_masked=m,
    )


def _nonempty_members(index: PatchRegionIndex, regions):
    members = index.members
    return [(region, members[region]) for region in regions if members[region].size > 0]


def _pick_region(index: PatchRegionIndex, rng) -> tuple:
    selectable = _nonempty_members(index, SELECTABLE_REGIONS)
    if not selectable:
        raise MaskingError("all selectable regions are empty")
    return selectable[int(rng.integers(len(selectable)))]


def _cover_region(index: PatchRegionIndex, r: float, rng):
    """Shared region-covering stage; returns (pair, residual_budget, done)."""
    n = index.n_patches
    m = mask_budget(n, r)
    region, patches = _pick_region(index, rng)
    pair = _empty_pair(n, m)
    pair.selected_region = region
    pair.region_mask[patches] = 1
    if patches.size > m:
        # extreme case: the covered region alone exceeds the budget
        drop = rng.choice(patches, size=patches.size - m, replace=False)
        pair.region_mask[drop] = 0
        pair.mask = pair.region_mask.copy()
        return pair, 0, True
    pair.mask = pair.region_mask.copy()
    return pair, m - patches.size, False


def sample_random(index: PatchRegionIndex, r: float, rng) -> MaskPair:
    """Uniform masking without replacement; no region structure."""
    n = index.n_patches
    m = mask_budget(n, r)
    pair = _empty_pair(n, m)
    pair.mask[rng.choice(n, size=m, replace=False)] = 1
    return pair


def sample_fasking_i(index: PatchRegionIndex, r: float, rng) -> MaskPair:
    """Mask non-skin/background patches first, spill over only if needed."""
    n = index.n_patches
    m = mask_budget(n, r)
    fg = np.flatnonzero(
        (index.region_of != int(Region.SKIN)) & (index.region_of != int(Region.BACKGROUND))
    )
    bg = np.setdiff1d(np.arange(n), fg, assume_unique=True)
    pair = _empty_pair(n, m)
    if fg.size >= m:
        pair.mask[rng.choice(fg, size=m, replace=False)] = 1
    else:
        pair.mask[fg] = 1
        pair.mask[rng.choice(bg, size=m - fg.size, replace=False)] = 1
    return pair


def sample_frp(index: PatchRegionIndex, r: float, rng) -> MaskPair:
    """Proportional masking within every nonempty region."""
    n = index.n_patches
    m = mask_budget(n, r)
    present = _nonempty_members(index, Region)
    shares = largest_remainder(m, [patches.size for _, patches in present])
    pair = _empty_pair(n, m)
    for (_, patches), k in zip(present, shares):
        if k:
            pair.mask[rng.choice(patches, size=int(k), replace=False)] = 1
    return pair


def sample_crfr_r(index: PatchRegionIndex, r: float, rng) -> MaskPair:
    """Cover a random facial region, then mask the rest uniformly."""
    pair, residual, done = _cover_region(index, r, rng)
    if done:
        return pair
    if residual:
        rest = np.flatnonzero(pair.mask == 0)
        pair.mask[rng.choice(rest, size=residual, replace=False)] = 1
    return pair


def sample_crfr_p(index: PatchRegionIndex, r: float, rng) -> MaskPair:
    """Cover a random facial region, then mask the remaining regions
    proportionally to their sizes (largest-remainder shares)."""
    pair, residual, done = _cover_region(index, r, rng)
    if done:
        return pair
    if residual:
        others = [
            (region, patches)
            for region, patches in _nonempty_members(index, Region)
            if region != pair.selected_region
        ]
        shares = largest_remainder(residual, [patches.size for _, patches in others])
        for (_, patches), k in zip(others, shares):
            if k:
                pair.mask[rng.choice(patches, size=int(k), replace=False)] = 1
    return pair


STRATEGIES = {
    "random": sample_random,
    "fasking_i": sample_fasking_i,
    "frp": sample_frp,
    "crfr_r": sample_crfr_r,
    "crfr_p": sample_crfr_p,
}


def sample_mask(strategy: str, index: PatchRegionIndex, r: float, rng) -> MaskPair:
    try:
        sampler = STRATEGIES[strategy]
    except KeyError:
        raise MaskingError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    return sampler(index, r, rng)


def apportionment_deviation(pair: MaskPair, index: PatchRegionIndex, strategy: str) -> float | None:
    """Largest |masked count - exact proportional share| over the regions the
    strategy apportioned, computed with exact rational shares.

    Returns None when the mask has no proportional stage to audit (random /
    fasking_i / crfr_r draws, or the extreme case where the covered region
    consumed the whole budget).  The largest-remainder bound guarantees a
    value < 1 for frp and for the non-covered regions of crfr_p.
    """
    from fractions import Fraction

    if strategy not in ("frp", "crfr_p"):
        return None
    members = index.members
    if pair.selected_region is None:
        audited = [(r, p) for r, p in members.items() if p.size > 0]
        budget = pair.target_masked
    else:
        region_patches = members[pair.selected_region]
        if region_patches.size >= pair.target_masked:
            return None  # extreme case: nothing was apportioned
        audited = [
            (r, p) for r, p in members.items() if p.size > 0 and r != pair.selected_region
        ]
        budget = pair.target_masked - int(region_patches.size)
    total = sum(int(p.size) for _, p in audited)
    worst = 0.0
    for _, patches in audited:
        count = int(pair.mask[patches].sum())
        share = Fraction(budget * int(patches.size), total)
        worst = max(worst, abs(count - float(share)))
    return worst


# ---------------------------------------------------------------------------
# Packed-bitset serialization for checkpoint/debug dumps:
#   u32 LE N | u8 has_region | i8 selected_region | u32 LE m |
#   ceil(N/8) bytes M | ceil(N/8) bytes M_fr    (bit i of byte i//8, LSB first)

_PACK_HEADER = struct.Struct("<IbbI")


def pack_mask_pair(pair: MaskPair) -> bytes:
    n = pair.n_patches
    header = _PACK_HEADER.pack(
        n,
        int(pair.selected_region is not None),
        -1 if pair.selected_region is None else int(pair.selected_region),
        pair.target_masked,
    )
    return header + np.packbits(pair.mask, bitorder="little").tobytes() + np.packbits(
        pair.region_mask, bitorder="little"
    ).tobytes()


def unpack_mask_pair(data: bytes) -> MaskPair:
    if len(data) < _PACK_HEADER.size:
        raise CodecError("truncated mask header", len(data))
    n, has_region, region_code, m = _PACK_HEADER.unpack_from(data, 0)
    nbytes = (n + 7) // 8
    expected = _PACK_HEADER.size + 2 * nbytes
    if len(data) != expected:
        raise CodecError(f"mask payload must be {expected} bytes", min(len(data), expected))
    off = _PACK_HEADER.size
    mask = np.unpackbits(
        np.frombuffer(data, np.uint8, nbytes, off), count=n, bitorder="little"
    )
    region_mask = np.unpackbits(
        np.frombuffer(data, np.uint8, nbytes, off + nbytes), count=n, bitorder="little"
    )
    return MaskPair(
        mask=mask.astype(np.uint8),
        region_mask=region_mask.astype(np.uint8),
        selected_region=Region(region_code) if has_region else None,
        target_masked=int(m),
    )
