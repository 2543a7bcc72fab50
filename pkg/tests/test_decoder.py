import pytest
import torch
from hypothesis import given, settings, strategies as st

from multigran.backbones import MultiScaleFeatures
from multigran.decoder import (DecoderLayer, MSDeformAttn, MultiGranularityDecoder, SimilarityHead, bilinear_sample,
                               build_denoising)
from multigran.queries import QuerySet

from oracles import autograd, central_difference, relative_error


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


D = 16


def make_decoder(layers=3, seed=0):
    torch.manual_seed(seed)
    return MultiGranularityDecoder(visual_dim=D, dim=D, num_layers=layers, heads=4, points=2)


def random_inputs(dec, g, Q=6, n_labels=3, size=32):
    feats = MultiScaleFeatures([torch.randn(1, D, size // s, size // s, generator=g) for s in (8, 16, 32)],
                               torch.randn(1, D, size // 4, size // 4, generator=g))
    memory, pixel_map = dec.encode_memory(feats)
    ref = torch.cat([torch.rand(Q, 2, generator=g), torch.rand(Q, 2, generator=g) * 0.4 + 0.1], -1)
    qs = QuerySet(torch.randn(Q, D, generator=g), ref)
    text = torch.randn(n_labels, D, generator=g)
    return qs, [m[0] for m in memory], pixel_map[0], text


# --------------------------------------------------------------------------- sampling

def test_bilinear_exact_at_cell_centers():
    g = torch.Generator().manual_seed(0)
    v = torch.randn(3, 4, 5, generator=g)
    ii, jj = torch.meshgrid(torch.arange(4), torch.arange(5), indexing="ij")
    loc = torch.stack([(jj.flatten() + 0.5) / 5, (ii.flatten() + 0.5) / 4], -1)
    assert torch.allclose(bilinear_sample(v, loc), v.flatten(1).t(), atol=1e-12)


def test_bilinear_center_of_two_by_two_is_mean():
    v = torch.tensor([[[1.0, 2.0], [3.0, 10.0]]])
    assert float(bilinear_sample(v, torch.tensor([[0.5, 0.5]]))[0, 0]) == pytest.approx(4.0, abs=1e-12)


def test_sampling_locations_scale_with_reference_size():
    attn = MSDeformAttn(D, levels=3, heads=4, points=2)
    q = torch.randn(2, D)
    ref = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.3, 0.6, 0.4, 0.1]])
    loc = attn.sampling_locations(q, ref)
    assert loc.shape == (2, 4, 3, 2, 2)
    nn_off = attn.sampling_offsets.bias.view(4, 3, 2, 2)
    assert torch.allclose(loc[1], ref[1, :2] + nn_off / 2 * ref[1, 2:] * 0.5)
    with torch.no_grad():
        attn.sampling_offsets.bias.zero_()
    assert torch.allclose(attn.sampling_locations(q, ref), ref[:, None, None, None, :2].expand_as(loc))


def test_zero_output_weights_leave_query_unchanged_by_cross_attention():
    layer = DecoderLayer(D, heads=4, levels=3, points=2)
    with torch.no_grad():
        layer.cross.output_proj.weight.zero_()
        layer.cross.output_proj.bias.zero_()
    g = torch.Generator().manual_seed(1)
    q = torch.randn(5, D, generator=g)
    values = [torch.randn(D, s, s, generator=g) for s in (4, 2, 1)]
    ref = torch.full((5, 4), 0.5)
    assert torch.equal(layer.cross(q, ref, values), torch.zeros(5, D))


def test_deform_layer_gradient():
    torch.manual_seed(2)
    layer = DecoderLayer(8, heads=2, levels=2, points=2)
    g = torch.Generator().manual_seed(3)
    values = [torch.randn(8, s, s, generator=g) for s in (4, 2)]
    ref = torch.tensor([[0.4, 0.55, 0.3, 0.2], [0.7, 0.2, 0.2, 0.4]])
    pos = torch.randn(2, 8, generator=g)
    probe = torch.randn(2, 8, generator=g)
    q = torch.randn(2, 8, generator=g)

    def f(x):
        return (layer(x, pos, ref, values) * probe).sum()

    assert relative_error(autograd(f, q), central_difference(f, q)) <= 1e-3


# --------------------------------------------------------------------------- heads

def test_similarity_head_argmax_and_shapes():
    head = SimilarityHead(D)
    with torch.no_grad():
        head.proj.weight.copy_(torch.eye(D))
        head.proj.bias.zero_()
    text = torch.eye(D)[:4]
    q = torch.eye(D)[[2, 0]] * 3.0
    logits = head(q, text, "word")
    assert logits.shape == (2, 5)
    assert logits[:, :4].argmax(-1).tolist() == [2, 0]
    assert head(q, text[:1], "sentence").shape == (2,)
    with pytest.raises(ValueError):
        head(q, text[:0], "word")
    with pytest.raises(ValueError):
        head(q, text, "phrase")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_similarity_head_label_equivariance(seed, perm):
    torch.manual_seed(seed)
    head = SimilarityHead(D)
    q, text = torch.randn(7, D), torch.randn(5, D)
    a = head(q, text, "word")
    b = head(q, text[list(perm)], "word")
    assert torch.equal(a[:, list(perm)], b[:, :5]) and torch.equal(a[:, 5], b[:, 5])


def test_box_head_zero_residual_is_reference():
    dec = make_decoder()
    ref = torch.tensor([[0.3, 0.4, 0.2, 0.5]])
    assert torch.allclose(dec.box_head(torch.randn(1, D), ref), ref, atol=1e-12)


def test_mask_head_shape_and_bilinearity():
    dec = make_decoder()
    g = torch.Generator().manual_seed(4)
    q, pix = torch.randn(3, D, generator=g), torch.randn(D, 8, 8, generator=g)
    m = dec.mask_head(q, pix)
    assert m.shape == (3, 8, 8)
    last = dec.mask_head.mlp.layers[-1]
    with torch.no_grad():
        last.weight.mul_(2)
        last.bias.mul_(2)
    assert torch.allclose(dec.mask_head(q, pix), 2 * m, atol=1e-12)


# --------------------------------------------------------------------------- decoding

def test_layer_count_contract():
    dec = make_decoder(layers=3)
    g = torch.Generator().manual_seed(5)
    qs, values, pix, text = random_inputs(dec, g)
    train = dec(qs, values, pix, text, "word", training=True)
    infer = dec(qs, values, pix, text, "word", training=False)
    assert len(train.layers) == 3 and len(infer.layers) == 1
    assert torch.equal(train.final.logits, infer.final.logits)
    for p in [train.initial, *train.layers]:
        assert p.logits.shape == (6, 4) and len(p) == 6 and p.masks.shape == (6, 8, 8)
        assert torch.all((p.boxes >= 0) & (p.boxes <= 1))


def test_single_layer_training_equals_inference():
    dec = make_decoder(layers=1)
    qs, values, pix, text = random_inputs(dec, torch.Generator().manual_seed(6))
    a = dec(qs, values, pix, text, "sentence", training=True)
    b = dec(qs, values, pix, text, "sentence", training=False)
    assert len(a.layers) == 1 and torch.equal(a.final.boxes, b.final.boxes)
    assert a.final.logits.shape == (6,)


def test_decoder_label_permutation_equivariance():
    dec = make_decoder()
    qs, values, pix, text = random_inputs(dec, torch.Generator().manual_seed(7), n_labels=4)
    perm = [2, 0, 3, 1]
    a = dec(qs, values, pix, text, "word", training=False).final.logits
    b = dec(qs, values, pix, text[perm], "word", training=False).final.logits
    assert torch.allclose(a[:, perm], b[:, :4], atol=1e-12) and torch.allclose(a[:, 4], b[:, 4])


@pytest.mark.parametrize("mode", ["word", "sentence"])
def test_denoising_isolation_bit_identical(mode):
    dec = make_decoder()
    g = torch.Generator().manual_seed(8)
    qs, values, pix, text = random_inputs(dec, g)
    gt = torch.cat([torch.rand(3, 2, generator=g), torch.rand(3, 2, generator=g) * 0.3 + 0.1], -1)
    dn = build_denoising(gt, torch.tensor([0, 2, 1]), 3, groups=2, generator=g)
    plain = dec(qs, values, pix, text, mode)
    with_dn = dec(qs, values, pix, text, mode, dn=dn)
    for a, b in zip([plain.initial, *plain.layers], [with_dn.initial, *with_dn.layers]):
        assert torch.equal(a.logits, b.logits) and torch.equal(a.boxes, b.boxes) and torch.equal(a.masks, b.masks)
    assert len(with_dn.dn_layers) == 3 and len(with_dn.dn_layers[0]) == 6


def test_denoising_groups_do_not_interact():
    dec = make_decoder()
    g = torch.Generator().manual_seed(9)
    qs, values, pix, text = random_inputs(dec, g)
    gt = torch.cat([torch.rand(2, 2, generator=g), torch.rand(2, 2, generator=g) * 0.3 + 0.1], -1)
    dn = build_denoising(gt, torch.tensor([0, 1]), 3, groups=2, generator=g)
    out = dec(qs, values, pix, text, "word", dn=dn)
    dn.reference[2:] = torch.tensor([0.5, 0.5, 0.9, 0.9])
    moved = dec(qs, values, pix, text, "word", dn=dn)
    for a, b in zip(out.dn_layers, moved.dn_layers):
        assert torch.allclose(a.boxes[:2], b.boxes[:2], atol=1e-12, rtol=0)
        assert not torch.allclose(a.boxes[2:], b.boxes[2:])


# --------------------------------------------------------------------------- denoising batch

def test_denoising_counts_and_zero_noise():
    gt = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.6, 0.5, 0.3, 0.1], [0.5, 0.8, 0.4, 0.2]])
    labels = torch.tensor([1, 0, 2])
    dn = build_denoising(gt, labels, 3, groups=2, box_noise=0.0, label_noise=0.0,
                         generator=torch.Generator().manual_seed(0))
    assert len(dn) == 6
    assert torch.equal(dn.reference, gt.repeat(2, 1))
    assert torch.equal(dn.labels, labels.repeat(2))
    assert dn.gt_index.tolist() == [0, 1, 2, 0, 1, 2]
    assert dn.group.tolist() == [1, 1, 1, 2, 2, 2]


def test_denoising_noise_bounds():
    g = torch.Generator().manual_seed(1)
    gt = torch.tensor([[0.5, 0.5, 0.2, 0.4]]).repeat(50, 1)
    dn = build_denoising(gt, torch.zeros(50, dtype=torch.long), 5, groups=1, box_noise=0.4, label_noise=0.0,
                         generator=g)
    assert torch.all((dn.reference[:, :2] - gt[:, :2]).abs() <= 0.2 * gt[:, 2:] + 1e-12)
    ratio = dn.reference[:, 2:] / gt[:, 2:]
    assert torch.all((ratio >= 0.6 - 1e-12) & (ratio <= 1.4 + 1e-12))
    assert len(set(dn.reference[:, 0].tolist())) > 1


def test_empty_ground_truth_gives_empty_batch():
    dn = build_denoising(torch.zeros(0, 4), torch.zeros(0, dtype=torch.long), 3)
    assert len(dn) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 8), st.integers(1, 5), st.integers(1, 4))
def test_attention_mask_has_no_cross_group_connectivity(Q, G, groups):
    dn = build_denoising(torch.full((G, 4), 0.3), torch.zeros(G, dtype=torch.long), 2, groups=groups)
    m = dn.attention_mask(Q)
    ids = [0] * Q + dn.group.tolist()
    n = Q + G * groups
    assert m.shape == (n, n)
    for i in range(n):
        for j in range(n):
            assert bool(m[i, j]) == (ids[i] != ids[j])
