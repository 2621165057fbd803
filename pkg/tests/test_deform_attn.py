import numpy as np
import pytest

from gtad import numerics as nm
from gtad.deform_attn import DeformAttnHead, deform_attn, deform_attn_batch, deform_attn_multi
from gtad.numerics import ParamStore, Rng, ShapeError, Tensor
from gradcheck import check_grads
from oracles import deform_attn_ref


def make_head(d_q=4, d_v=3, d_out=3, p=2, seed=0):
    store = ParamStore()
    return store, DeformAttnHead(store, "da", d_q, d_v, d_out, p, Rng(seed))


def test_degenerate_single_point_is_exact_gather(nprng):
    store, head = make_head(d_q=4, d_v=3, d_out=3, p=1)
    head.offset_proj.data = np.zeros_like(head.offset_proj.data)
    head.value_proj.data = np.eye(3)
    vmap = Tensor(nprng.standard_normal((5, 6, 3)))
    q = Tensor(nprng.standard_normal(4))
    out = deform_attn(head, q, (2.0, 3.0), vmap)
    assert np.allclose(out.data, vmap.data[3, 2], atol=1e-12)


def test_constant_map_ignores_offsets_and_weights(nprng):
    store, head = make_head(d_q=4, d_v=3, d_out=2, p=4)
    head.offset_proj.data *= 0.01  # keep samples interior
    vmap = Tensor(np.tile(np.array([1.5, -2.0, 0.25]), (9, 9, 1)))
    for _ in range(5):
        q = Tensor(nprng.standard_normal(4))
        out = deform_attn(head, q, (4.0, 4.0), vmap)
        expect = np.array([1.5, -2.0, 0.25]) @ head.value_proj.data
        assert np.allclose(out.data, expect, atol=1e-9)


def test_attention_weights_sum_to_one(nprng):
    store, head = make_head(p=5)
    queries = Tensor(nprng.standard_normal((11, 4)) * 30.0)
    _, weights = head.project_queries(queries)
    assert np.abs(weights.data.sum(axis=-1) - 1.0).max() < 1e-9


def test_matches_bruteforce_loop(nprng):
    store, head = make_head(d_q=5, d_v=3, d_out=4, p=4)
    vmap = nprng.standard_normal((3, 3, 3))
    q = nprng.standard_normal(5)
    out = deform_attn(head, Tensor(q), (1.2, 0.7), Tensor(vmap))
    ref = deform_attn_ref(q, (1.2, 0.7), vmap, head.offset_proj.data,
                          head.weight_proj.data, head.value_proj.data)
    assert np.abs(out.data - ref).max() < 1e-10


def test_batch_n1_equals_scalar(nprng):
    store, head = make_head()
    vmap = Tensor(nprng.standard_normal((4, 4, 3)))
    q = nprng.standard_normal(4)
    ref = np.array([1.3, 2.1])
    single = deform_attn(head, Tensor(q), ref, vmap).data
    batched = deform_attn_batch(head, Tensor(q[None]), ref[None], vmap).data
    assert np.array_equal(single, batched[0])


def test_batch_rowwise_independent_under_permutation(nprng):
    store, head = make_head()
    vmap = Tensor(nprng.standard_normal((6, 6, 3)))
    q = Tensor(nprng.standard_normal((10, 4)))
    refs = nprng.uniform(0, 5, (10, 2))
    out = deform_attn_batch(head, q, refs, vmap).data
    perm = nprng.permutation(10)
    out_p = deform_attn_batch(head, Tensor(q.data[perm]), refs[perm], vmap).data
    assert np.array_equal(out[perm], out_p)


def test_batch_bitwise_matches_scalar_loop(nprng):
    store, head = make_head(d_q=6, d_v=4, d_out=5, p=3)
    vmap = Tensor(nprng.standard_normal((7, 8, 4)))
    q = nprng.standard_normal((32, 6))
    refs = nprng.uniform(-1.0, 8.0, (32, 2))
    batched = deform_attn_batch(head, Tensor(q), refs, vmap).data
    for i in range(32):
        single = deform_attn(head, Tensor(q[i]), refs[i], vmap).data
        assert np.array_equal(batched[i], single), f"row {i} differs"


def test_multi_map_routing_matches_per_map_batches(nprng):
    store, head = make_head(d_q=4, d_v=3, d_out=3, p=2)
    maps = Tensor(nprng.standard_normal((3, 5, 5, 3)))
    q = Tensor(nprng.standard_normal((12, 4)))
    refs = nprng.uniform(0, 4, (12, 2))
    midx = nprng.integers(0, 3, 12)
    out = deform_attn_multi(head, q, refs, maps, midx).data
    for i in range(12):
        single = deform_attn(head, Tensor(q.data[i]), refs[i],
                             Tensor(maps.data[midx[i]])).data
        assert np.array_equal(out[i], single)


def test_query_rows_gather_matches_direct(nprng):
    store, head = make_head()
    maps = Tensor(nprng.standard_normal((2, 5, 5, 3)))
    q = Tensor(nprng.standard_normal((4, 4)))
    rows = np.array([0, 0, 3, 1, 2, 3])
    refs = nprng.uniform(0, 4, (6, 2))
    midx = nprng.integers(0, 2, 6)
    gathered = deform_attn_multi(head, q, refs, maps, midx, query_rows=rows).data
    direct = deform_attn_multi(head, Tensor(q.data[rows]), refs, maps, midx).data
    assert np.array_equal(gathered, direct)


def test_translation_invariance_interior(nprng):
    store, head = make_head(d_q=4, d_v=2, d_out=2, p=3)
    head.offset_proj.data *= 0.1
    inner = nprng.standard_normal((4, 4, 2))
    big = np.zeros((10, 10, 2))
    big[2:6, 2:6] = inner
    shifted = np.zeros((10, 10, 2))
    shifted[4:8, 5:9] = inner
    q = Tensor(nprng.standard_normal(4))
    a = deform_attn(head, q, (3.4, 3.6), Tensor(big)).data
    b = deform_attn(head, q, (6.4, 5.6), Tensor(shifted)).data
    assert np.abs(a - b).max() < 1e-12


def test_gradients_match_finite_differences(nprng):
    store, head = make_head(d_q=4, d_v=3, d_out=2, p=3)
    vmap = Tensor(nprng.standard_normal((5, 5, 3)), requires_grad=True)
    q = Tensor(nprng.standard_normal((6, 4)), requires_grad=True)
    refs = Tensor(nprng.uniform(0.3, 3.7, (6, 2)), requires_grad=True)
    w = nprng.standard_normal((6, 2))
    params = [q, refs, vmap, head.offset_proj, head.weight_proj, head.value_proj]

    def loss():
        return (deform_attn_batch(head, q, refs, vmap) * nm.constant(w)).sum()

    assert check_grads(loss, params) < 1e-4


def test_shape_errors():
    store, head = make_head()
    vmap = Tensor(np.zeros((4, 4, 3)))
    with pytest.raises(ShapeError):
        deform_attn_batch(head, Tensor(np.zeros((2, 9))), np.zeros((2, 2)), vmap)
    with pytest.raises(ShapeError):
        deform_attn_batch(head, Tensor(np.zeros((2, 4))), np.zeros((3, 2)), vmap)
    with pytest.raises(ShapeError):
        deform_attn_batch(head, Tensor(np.zeros((2, 4))), np.zeros((2, 2)),
                          Tensor(np.zeros((4, 4, 9))))
    with pytest.raises(ShapeError):
        DeformAttnHead(ParamStore(), "bad", 4, 3, 3, 0, Rng(0))
