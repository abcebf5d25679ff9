from fractions import Fraction

import numpy as np
import pytest

from fsvfm.errors import CodecError, MaskingError
from fsvfm.masking import (
    STRATEGIES,
    apportionment_deviation,
    largest_remainder,
    mask_budget,
    pack_mask_pair,
    sample_crfr_p,
    sample_crfr_r,
    sample_fasking_i,
    sample_frp,
    sample_random,
    unpack_mask_pair,
)
from fsvfm.regions import Region, SELECTABLE_REGIONS, PatchRegionIndex
from fsvfm.synth import SynthConfig, generate_synthetic
from fsvfm.regions import patchify_parsing

RNG = np.random.default_rng


def index_from_sizes(sizes: dict) -> PatchRegionIndex:
    """Index with the given region sizes, patches laid out contiguously."""
    region_of = np.concatenate(
        [np.full(count, int(region), dtype=np.int8) for region, count in sizes.items()]
    )
    n = region_of.size
    side = int(np.ceil(np.sqrt(n)))
    return PatchRegionIndex(grid=(1, n), patch_size=8, region_of=region_of)


def random_index(rng, n_min=16, n_max=144) -> PatchRegionIndex:
    n = int(rng.integers(n_min, n_max + 1))
    region_of = rng.integers(0, len(Region), size=n).astype(np.int8)
    return PatchRegionIndex(grid=(1, n), patch_size=8, region_of=region_of)


def oracle_largest_remainder(budget: int, sizes):
    """Independent reference apportionment built on exact fractions."""
    total = sum(sizes)
    quotas = [Fraction(budget * s, total) for s in sizes]
    base = [int(q) for q in quotas]
    remainders = [q - b for q, b in zip(quotas, base)]
    leftover = budget - sum(base)
    order = sorted(range(len(sizes)), key=lambda i: (-remainders[i], -sizes[i], i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def test_mask_budget_arithmetic():
    assert mask_budget(196, 0.75) == 147
    assert mask_budget(64, 0.5) == 32
    with pytest.raises(MaskingError):
        mask_budget(64, 0.0)
    with pytest.raises(MaskingError):
        mask_budget(64, 1.0)
    with pytest.raises(MaskingError):
        mask_budget(4, 0.999)  # rounds to N: no visible patch left
    with pytest.raises(MaskingError):
        mask_budget(10, 0.01)  # rounds to 0: nothing masked


def test_largest_remainder_against_oracle():
    rng = RNG(5)
    for _ in range(300):
        k = int(rng.integers(1, 9))
        sizes = rng.integers(1, 60, size=k).tolist()
        budget = int(rng.integers(0, sum(sizes) + 1))
        shares = largest_remainder(budget, sizes)
        assert shares.sum() == budget
        assert list(shares) == oracle_largest_remainder(budget, sizes)
        for share, size in zip(shares, sizes):
            assert 0 <= share <= size
            assert abs(share - budget * size / sum(sizes)) < 1.0


def test_largest_remainder_tie_break_is_stable():
    # equal sizes, budget not divisible: extras go to the lowest positions
    assert list(largest_remainder(5, [10, 10, 10])) == [2, 2, 1]
    assert list(largest_remainder(5, [10, 10, 10])) == oracle_largest_remainder(5, [10, 10, 10])


@pytest.mark.parametrize("strategy", sorted(STRATEGIES))
def test_budget_exactness_and_containment(strategy):
    rng = RNG(17)
    for _ in range(60):
        index = random_index(rng)
        for r in (0.4, 0.6, 0.75, 0.9):
            m = int(round(index.n_patches * r))
            if not 1 <= m <= index.n_patches - 1:
                continue
            pair = STRATEGIES[strategy](index, r, RNG(rng.integers(2**32)))
            assert int(pair.mask.sum()) == m == pair.target_masked
            assert ((pair.region_mask == 0) | (pair.mask == 1)).all()
            if strategy in ("random", "fasking_i", "frp"):
                assert pair.region_mask.sum() == 0
                assert pair.selected_region is None
            else:
                assert pair.selected_region in SELECTABLE_REGIONS


@pytest.mark.parametrize("strategy", sorted(STRATEGIES))
def test_same_seed_same_mask(strategy):
    index = random_index(RNG(3))
    a = STRATEGIES[strategy](index, 0.75, RNG(99))
    b = STRATEGIES[strategy](index, 0.75, RNG(99))
    assert np.array_equal(a.mask, b.mask)
    assert np.array_equal(a.region_mask, b.region_mask)
    assert a.selected_region == b.selected_region


def test_crfr_p_covers_selected_region():
    rng = RNG(11)
    for _ in range(100):
        index = random_index(rng)
        pair = sample_crfr_p(index, 0.75, RNG(rng.integers(2**32)))
        members = index.members[pair.selected_region]
        if members.size <= pair.target_masked:  # non-extreme: fully covered
            assert pair.mask[members].all()
            assert pair.region_mask[members].all()
            assert int(pair.region_mask.sum()) == members.size


def test_crfr_p_extreme_case():
    # a single oversized selectable region forces the extreme branch
    index = index_from_sizes({Region.HAIR: 160, Region.SKIN: 36})
    pair = sample_crfr_p(index, 0.75, RNG(0))
    m = int(round(196 * 0.75))
    assert pair.selected_region == Region.HAIR
    assert int(pair.region_mask.sum()) == int(pair.mask.sum()) == m == 147
    assert np.array_equal(pair.mask, pair.region_mask)
    # only hair patches are masked
    assert pair.mask[index.members[Region.SKIN]].sum() == 0


def test_crfr_p_apportionment_matches_oracle():
    # covered region of 12, budget 147: the residual 135 is split by largest
    # remainder over the remaining regions
    sizes = {
        Region.EYES: 12,
        Region.EYEBROWS: 14,
        Region.MOUTH: 16,
        Region.FACE_BOUNDARY: 22,
        Region.NOSE: 10,
        Region.HAIR: 30,
        Region.SKIN: 52,
        Region.BACKGROUND: 40,
    }
    index = index_from_sizes(sizes)
    assert index.n_patches == 196
    for seed in range(200):
        pair = sample_crfr_p(index, 0.75, RNG(seed))
        if pair.selected_region == Region.EYES:
            break
    assert pair.selected_region == Region.EYES
    others = [r for r in sizes if r != Region.EYES]
    expected = oracle_largest_remainder(147 - 12, [sizes[r] for r in others])
    for region, want in zip(others, expected):
        got = int(pair.mask[index.members[region]].sum())
        assert got == want
    dev = apportionment_deviation(pair, index, "crfr_p")
    assert dev is not None and dev < 1.0


def test_crfr_p_visibility_guarantee():
    rng = RNG(23)
    for _ in range(100):
        index = random_index(rng)
        pair = sample_crfr_p(index, 0.75, RNG(rng.integers(2**32)))
        members = index.members
        if members[pair.selected_region].size > pair.target_masked:
            continue  # extreme case: no guarantee
        residual = pair.target_masked - members[pair.selected_region].size
        others = [(r, p) for r, p in members.items() if p.size and r != pair.selected_region]
        shares = largest_remainder(residual, [p.size for _, p in others])
        for (region, patches), share in zip(others, shares):
            if patches.size > share:
                assert int(pair.mask[patches].sum()) < patches.size


def test_frp_proportionality_and_visibility():
    rng = RNG(29)
    for _ in range(100):
        index = random_index(rng)
        pair = sample_frp(index, 0.6, RNG(rng.integers(2**32)))
        dev = apportionment_deviation(pair, index, "frp")
        assert dev is not None and dev < 1.0
        members = index.members
        present = [(r, p) for r, p in members.items() if p.size]
        shares = largest_remainder(pair.target_masked, [p.size for _, p in present])
        for (region, patches), share in zip(present, shares):
            assert int(pair.mask[patches].sum()) == share
            if patches.size > share:
                assert int(pair.mask[patches].sum()) < patches.size


def test_crfr_r_residual_is_unstructured():
    index = index_from_sizes({Region.EYES: 4, Region.SKIN: 40, Region.BACKGROUND: 20})
    pair = sample_crfr_r(index, 0.75, RNG(7))
    assert int(pair.mask.sum()) == pair.target_masked == 48
    covered = index.members[pair.selected_region]
    assert pair.mask[covered].all()
    assert int(pair.region_mask.sum()) == covered.size


def test_fasking_i_priority():
    rng = RNG(31)
    for _ in range(100):
        index = random_index(rng)
        pair = sample_fasking_i(index, 0.75, RNG(rng.integers(2**32)))
        plain = (index.region_of == int(Region.SKIN)) | (
            index.region_of == int(Region.BACKGROUND)
        )
        fg = np.flatnonzero(~plain)
        # no skin/background patch masked while any foreground patch is visible
        if pair.mask[plain].sum() > 0:
            assert pair.mask[fg].all()
        if pair.target_masked <= fg.size:
            assert pair.mask[plain].sum() == 0


def test_random_masking_frequency():
    # Monte-Carlo check against the binomial confidence band
    index = index_from_sizes({Region.SKIN: 64})
    hits = np.zeros(64)
    draws = 10_000
    rng = RNG(101)
    for _ in range(draws):
        hits += sample_random(index, 0.5, rng).mask
    freq = hits / draws
    assert (np.abs(freq - 0.5) < 0.02).all()


def test_all_selectable_empty_is_an_error():
    index = index_from_sizes({Region.SKIN: 30, Region.BACKGROUND: 34})
    with pytest.raises(MaskingError):
        sample_crfr_p(index, 0.5, RNG(0))
    with pytest.raises(MaskingError):
        sample_crfr_r(index, 0.5, RNG(0))
    # strategies without a covered region still work
    assert sample_random(index, 0.5, RNG(0)).mask.sum() == 32
    assert sample_frp(index, 0.5, RNG(0)).mask.sum() == 32
    assert sample_fasking_i(index, 0.5, RNG(0)).mask.sum() == 32


def test_masks_on_real_synthetic_faces():
    samples = generate_synthetic(SynthConfig(seed=41, n_real=5, n_fake=0))
    for sample in samples:
        index = patchify_parsing(sample.parsing, 8)
        for strategy in STRATEGIES:
            pair = STRATEGIES[strategy](index, 0.75, RNG(1))
            assert int(pair.mask.sum()) == 48


def test_pack_unpack_round_trip():
    rng = RNG(55)
    for _ in range(50):
        index = random_index(rng)
        pair = sample_crfr_p(index, 0.75, RNG(rng.integers(2**32)))
        back = unpack_mask_pair(pack_mask_pair(pair))
        assert np.array_equal(back.mask, pair.mask)
        assert np.array_equal(back.region_mask, pair.region_mask)
        assert back.selected_region == pair.selected_region
        assert back.target_masked == pair.target_masked


def test_unpack_rejects_bad_payload():
    index = index_from_sizes({Region.SKIN: 16})
    pair = sample_random(index, 0.5, RNG(0))
    data = pack_mask_pair(pair)
    with pytest.raises(CodecError):
        unpack_mask_pair(data[:-1])
    with pytest.raises(CodecError):
        unpack_mask_pair(data + b"\x00")
