import math

import numpy as np
import pytest
import torch

from fsvfm.analysis import (
    attention_summary,
    head_kl_diversity,
    mean_attention_distance,
    patch_centers,
    received_attention,
    export_attention_map,
    strip_cls,
    summary_tsv_lines,
)
from fsvfm.backbone import PROFILES, AttentionTrace, ViTEncoder
from fsvfm.errors import ShapeError, StateError
from fsvfm.synth import SynthConfig, generate_synthetic

EPS = 1e-12


def trace_of(layers, has_cls=False):
    return AttentionTrace(layers=[torch.as_tensor(l, dtype=torch.float64) for l in layers],
                          has_cls=has_cls)


def test_identity_attention_zero_distance():
    eye = np.eye(16)[None, None].repeat(3, axis=1)  # 1 batch, 3 heads
    distances = mean_attention_distance(trace_of([eye]), (4, 4), 8)
    assert distances.shape == (1, 3)
    assert np.allclose(distances, 0.0)


def test_uniform_attention_matches_bruteforce():
    g, patch = 4, 8
    n = g * g
    uniform = np.full((1, 2, n, n), 1.0 / n)
    distances = mean_attention_distance(trace_of([uniform]), (g, g), patch)
    centers = patch_centers((g, g), patch)
    # exhaustive double loop over query/key pairs
    total = 0.0
    for q in range(n):
        for k in range(n):
            total += math.dist(centers[q], centers[k]) / n
    expected = total / n
    assert abs(float(distances[0, 0]) - expected) < 1e-9
    assert abs(float(distances[0, 1]) - expected) < 1e-9


def test_single_offdiagonal_mass():
    # two patches with centers 16 px apart; every query points at the other
    attn = np.array([[[[0.0, 1.0], [1.0, 0.0]]]])
    distances = mean_attention_distance(trace_of([attn]), (1, 2), 16)
    assert float(distances[0, 0]) == pytest.approx(16.0, abs=1e-12)


def test_distance_invariant_to_batch_and_query_order():
    rng = np.random.default_rng(5)
    attn = rng.random((3, 2, 9, 9))
    attn /= attn.sum(axis=-1, keepdims=True)
    base = mean_attention_distance(trace_of([attn]), (3, 3), 8)
    shuffled = attn[[2, 0, 1]]
    assert np.allclose(
        mean_attention_distance(trace_of([shuffled]), (3, 3), 8), base, atol=1e-12
    )


def test_kl_identical_heads_zero():
    rng = np.random.default_rng(7)
    row = rng.random((1, 1, 8, 8))
    row /= row.sum(axis=-1, keepdims=True)
    attn = np.repeat(row, 4, axis=1)
    kls = head_kl_diversity(trace_of([attn]))
    assert kls.shape == (1, 4)
    assert np.allclose(kls, 0.0, atol=1e-12)


def test_kl_point_masses_closed_form():
    t = 6
    a = np.zeros((1, 2, t, t))
    a[0, 0, :, 1] = 1.0
    a[0, 1, :, 3] = 1.0
    kls = head_kl_diversity(trace_of([a]))
    # hand formula on the clamped rows: 1*log(1/eps) + eps*log(eps/1)
    expected = math.log(1.0 / EPS) + EPS * math.log(EPS)
    assert float(kls[0, 0]) == pytest.approx(expected, rel=1e-12)
    assert float(kls[0, 1]) == pytest.approx(expected, rel=1e-12)


def test_kl_nonnegative_on_random_rows():
    rng = np.random.default_rng(11)
    for _ in range(200):
        attn = rng.random((1, 3, 5, 5))
        attn /= attn.sum(axis=-1, keepdims=True)
        assert (head_kl_diversity(trace_of([attn])) >= 0).all()


def test_strip_cls_renormalizes():
    rng = np.random.default_rng(13)
    attn = rng.random((2, 2, 10, 10))
    attn /= attn.sum(axis=-1, keepdims=True)
    stripped = strip_cls(torch.as_tensor(attn), has_cls=True)
    assert stripped.shape == (2, 2, 9, 9)
    assert np.allclose(stripped.sum(axis=-1), 1.0, atol=1e-12)


def test_received_attention_is_probability_mass():
    rng = np.random.default_rng(17)
    attn = rng.random((2, 4, 17, 17))
    attn /= attn.sum(axis=-1, keepdims=True)
    heat = received_attention(torch.as_tensor(attn), has_cls=True, grid=(4, 4))
    assert heat.shape == (4, 4)
    assert abs(heat.sum() - 1.0) < 1e-5


def test_summary_and_tsv():
    rng = np.random.default_rng(19)
    layers = []
    for _ in range(2):
        attn = rng.random((1, 3, 4, 4))
        attn /= attn.sum(axis=-1, keepdims=True)
        layers.append(attn)
    summary = attention_summary(trace_of(layers), (2, 2), 8)
    assert summary.mean_distance.shape == (2, 3)
    assert summary.layer_distance.shape == (2,)
    lines = summary_tsv_lines(summary)
    assert len(lines) == 6
    layer, head, dist, kl = lines[0].split("\t")
    assert (layer, head) == ("0", "0")
    float(dist), float(kl)


def test_empty_trace_rejected():
    with pytest.raises(StateError):
        mean_attention_distance(AttentionTrace(layers=[], has_cls=False), (2, 2), 8)
    bad = np.full((1, 1, 4, 4), 0.25)
    with pytest.raises(ShapeError):
        mean_attention_distance(trace_of([bad]), (3, 3), 8)


def test_export_attention_map_writes_file(tmp_path):
    torch.manual_seed(0)
    encoder = ViTEncoder(PROFILES["micro"], 64).double()
    sample = generate_synthetic(SynthConfig(n_real=1, n_fake=0, seed=2))[0]
    out = tmp_path / "heat.png"
    heat = export_attention_map(
        encoder, sample.image, ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)), out
    )
    assert out.exists() and out.stat().st_size > 0
    assert heat.shape == (8, 8)
    assert abs(heat.sum() - 1.0) < 1e-5
