import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcwc import errors
from mcwc.blocks import (
    BlockMember,
    BlockSet,
    BlockTypeSpec,
    Permutation,
    apply_permutation,
    assemble_layer,
    extract_blocks,
    identity_permutation,
    invert_permutation,
    random_permutation,
)
from mcwc.container import LayerTensors


def layer_of(**tensors):
    return LayerTensors(index=1, tensors={k: np.asarray(v, dtype=np.float32)
                                          for k, v in tensors.items()})


def test_row_slicing():
    layer = layer_of(w=np.arange(12).reshape(4, 3))
    spec = BlockTypeSpec(type_id=0, members=[BlockMember("w", 0)])
    bs = extract_blocks(layer, spec)
    assert bs.count == 4 and bs.dim == 3
    np.testing.assert_array_equal(bs.blocks[2], [6, 7, 8])


def test_multi_tensor_blocks_index_bookkeeping():
    # labeled integer tensors make the expected gather explicit
    a = np.arange(12).reshape(4, 3)          # axis 0: rows
    b = 100 + np.arange(20).reshape(5, 4)    # axis 1: columns
    layer = layer_of(a=a, b=b)
    spec = BlockTypeSpec(type_id=0, members=[BlockMember("a", 0), BlockMember("b", 1)])
    bs = extract_blocks(layer, spec)
    assert bs.count == 4
    for i in range(4):
        expected = np.concatenate([a[i], b[:, i]])
        np.testing.assert_array_equal(bs.blocks[i], expected)


def test_block_count_mismatch():
    layer = layer_of(a=np.zeros((4, 3)), b=np.zeros((6, 2)))
    spec = BlockTypeSpec(type_id=0, members=[BlockMember("a", 0), BlockMember("b", 0)])
    with pytest.raises(errors.BlockCountMismatch):
        extract_blocks(layer, spec)


def test_missing_tensor_and_bad_axis():
    layer = layer_of(a=np.zeros((4, 3)))
    with pytest.raises(errors.MissingTensor):
        extract_blocks(layer, BlockTypeSpec(0, [BlockMember("nope", 0)]))
    with pytest.raises(errors.AxisOutOfRange):
        extract_blocks(layer, BlockTypeSpec(0, [BlockMember("a", 5)]))


def test_grouped_blocks():
    # 8 rows in 4 blocks of 2 rows each
    w = np.arange(24).reshape(8, 3)
    layer = layer_of(w=w)
    spec = BlockTypeSpec(type_id=0, members=[BlockMember("w", 0)], block_count=4)
    bs = extract_blocks(layer, spec)
    assert bs.count == 4 and bs.dim == 6
    np.testing.assert_array_equal(bs.blocks[1], w[2:4].ravel())


def test_extract_assemble_identity(rng):
    layer = layer_of(a=rng.standard_normal((6, 5)), b=rng.standard_normal((4, 6)),
                     c=rng.standard_normal(9))
    specs = [BlockTypeSpec(0, [BlockMember("a", 0), BlockMember("b", 1)]),
             BlockTypeSpec(1, [BlockMember("c", 0)], block_count=3)]
    sets = [extract_blocks(layer, s) for s in specs]
    shapes = {k: v.shape for k, v in layer.tensors.items()}
    out = assemble_layer(sets, specs, shapes, index=1)
    for name in layer.tensors:
        np.testing.assert_array_equal(out.tensors[name], layer.tensors[name])


def test_assemble_missing_set():
    layer = layer_of(a=np.zeros((4, 3)))
    spec = BlockTypeSpec(0, [BlockMember("a", 0)])
    with pytest.raises(errors.IncompleteBlockSet):
        assemble_layer([], [spec], {"a": (4, 3)}, index=1)


def test_permute_then_inverse_then_assemble(rng):
    layer = layer_of(a=rng.standard_normal((8, 4)))
    spec = BlockTypeSpec(0, [BlockMember("a", 0)])
    bs = extract_blocks(layer, spec)
    perm = random_permutation(8, rng)
    back = apply_permutation(apply_permutation(bs, perm), invert_permutation(perm))
    out = assemble_layer([back], [spec], {"a": (8, 4)}, index=1)
    np.testing.assert_array_equal(out.tensors["a"], layer.tensors["a"])


def test_apply_identity_and_swap():
    bs = BlockSet(layer=1, type_id=0,
                  blocks=np.array([[1.0, 1], [2, 2]], dtype=np.float32),
                  piece_shapes=[(1, 2)])
    same = apply_permutation(bs, identity_permutation(2))
    np.testing.assert_array_equal(same.blocks, bs.blocks)
    swapped = apply_permutation(bs, Permutation([2, 1]))
    np.testing.assert_array_equal(swapped.blocks, bs.blocks[::-1])


def test_invert_examples():
    assert invert_permutation(identity_permutation(4)) == identity_permutation(4)
    assert invert_permutation(Permutation([3, 1, 2])) == Permutation([2, 3, 1])


def test_not_bijection():
    with pytest.raises(errors.NotBijection):
        Permutation([1, 1, 3])
    with pytest.raises(errors.LengthMismatch):
        apply_permutation(BlockSet(1, 0, np.zeros((3, 2), dtype=np.float32), [(2,)]),
                          Permutation([2, 1]))


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=32), st.integers(min_value=0, max_value=2**31))
def test_permutation_properties(b, seed):
    gen = np.random.default_rng(seed)
    perm = random_permutation(b, gen)
    assert invert_permutation(invert_permutation(perm)) == perm
    bs = BlockSet(1, 0, gen.standard_normal((b, 3)).astype(np.float32), [(3,)])
    roundtrip = apply_permutation(apply_permutation(bs, perm), invert_permutation(perm))
    np.testing.assert_array_equal(roundtrip.blocks, bs.blocks)
    # multiset of blocks preserved
    permuted = apply_permutation(bs, perm)
    assert sorted(map(tuple, permuted.blocks.tolist())) == sorted(map(tuple, bs.blocks.tolist()))
