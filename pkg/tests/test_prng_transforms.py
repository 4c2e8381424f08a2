import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randes import (
    InvalidSpecError, NumericalDegeneracyError, StructuralMismatchError, TargetSelector, TensorMap,
    TransformSpec, apply, apply_inverse, materialize, parse_schema,
)
from randes.prng import SplitMix64, derive_seed, fnv1a64, mix64
from randes.tensormap import bit_equal, frobenius_norm
from randes.transforms import MODES, ORTHOGONAL_MODES, MaterializedTransform, compose_signs

from conftest import make_model

M64 = (1 << 64) - 1


def ref_splitmix(seed, n):
    # straight transcription of the public-domain reference generator
    out, s = [], seed
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & M64
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_reference_vector():
    g = SplitMix64(0)
    assert [g.next_u64() for _ in range(2)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4]


@pytest.mark.parametrize("seed", [0, 1, 42, M64, 0x123456789ABCDEF])
def test_splitmix_matches_reference_and_vector_path(seed):
    ref = ref_splitmix(seed, 70)
    assert SplitMix64(seed).next_u64() == ref[0]
    g = SplitMix64(seed)
    assert [int(v) for v in g.next_u64_array(70)] == ref
    assert g.next_u64() == ref_splitmix(seed, 71)[-1]


def test_fnv1a64_known_values():
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C


def test_derive_seed_formula():
    assert derive_seed(42, "perm:mlp") == mix64((42 ^ fnv1a64("perm:mlp")) + 0x9E3779B97F4A7C15 & M64)


def test_permutation_is_fisher_yates_bijection():
    p = SplitMix64(42).permutation(8)
    assert sorted(p) == list(range(8))
    assert p == [3, 1, 6, 2, 4, 0, 7, 5]  # frozen


def test_signs_follow_word_bits():
    words = ref_splitmix(9, 2)
    expected = [1.0 - 2.0 * ((words[c // 64] >> (c % 64)) & 1) for c in range(100)]
    assert SplitMix64(9).signs(100).tolist() == expected


def test_normals_are_plausible():
    z = SplitMix64(3).normals(20001)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03


def two_col_schema():
    return parse_schema(TensorMap({"blocks.1.mlp.fc": np.ones((3, 2)), "blocks.2.mlp.fc": np.ones((3, 2))}))


def test_rsf_seed42_golden():
    s = two_col_schema()
    t1 = materialize(TransformSpec("rsf", 42, 0), s)
    t2 = materialize(TransformSpec("rsf", 42, 0), s)
    expected = SplitMix64(derive_seed(42, "sign:blocks.1.mlp.fc")).signs(2)
    assert t1.signs["blocks.1.mlp.fc"].tolist() == [1.0, -1.0] == expected.tolist()
    assert t1.signs["blocks.2.mlp.fc"].tolist() == [-1.0, 1.0]
    assert all(np.array_equal(t1.signs[n], t2.signs[n]) for n in t1.signs)


def test_identity_materializes_empty():
    t = materialize(TransformSpec("identity", 42, 3), two_col_schema())
    assert t.permutations == {} and t.signs == {} and t.diags == {}


def test_effective_seed_wraps():
    assert TransformSpec("rsf", M64, 2).effective_seed == 1
    with pytest.raises(InvalidSpecError):
        TransformSpec("rsf", -1, 0)
    with pytest.raises(InvalidSpecError):
        TransformSpec("rsf", 0, -1)


@pytest.mark.parametrize("mode", ["rd+srsf", "srsf+rd", "shuffle+rsf", "dct"])
def test_bad_modes(mode):
    with pytest.raises(InvalidSpecError):
        TransformSpec(mode, 0, 0)


def three_block():
    return TensorMap({f"blocks.{k}.w": np.full((1, 2), float(k)) for k in (1, 2, 3)})


def test_shift_moves_one_block_deeper():
    x = three_block()
    t = materialize(TransformSpec("shift", 0, 0), parse_schema(x))
    y = apply(t, x)
    assert [y[f"blocks.{k}.w"][0, 0] for k in (1, 2, 3)] == [3.0, 1.0, 2.0]
    z = apply_inverse(t, x)
    assert [z[f"blocks.{k}.w"][0, 0] for k in (1, 2, 3)] == [2.0, 3.0, 1.0]


def test_shift_step_depends_on_model_index():
    x = three_block()
    s = parse_schema(x)
    outs = [apply(materialize(TransformSpec("shift", 0, i), s), x)["blocks.1.w"][0, 0] for i in range(3)]
    assert outs == [3.0, 2.0, 1.0]


def test_sign_flip_columns_explicit():
    x = TensorMap({"blocks.1.w": [[1, 2], [3, 4]]})
    fixed = MaterializedTransform("rsf", signs={"blocks.1.w": np.array([1.0, -1.0])})
    np.testing.assert_array_equal(apply(fixed, x)["blocks.1.w"], [[1, -2], [3, -4]])
    ones = MaterializedTransform("rsf", signs={"blocks.1.w": np.array([1.0, 1.0])})
    assert bit_equal(apply(ones, x), x)
    # D^-1 == D
    assert bit_equal(apply_inverse(fixed, x), apply(fixed, x))


def test_one_d_tensors_flip_elementwise():
    x = TensorMap({"blocks.1.b": [1.0, 2.0, 3.0], "blocks.2.b": [4.0, 5.0, 6.0]})
    t = materialize(TransformSpec("rsf", 5, 0), parse_schema(x))
    y = apply(t, x)
    np.testing.assert_array_equal(y["blocks.1.b"], x["blocks.1.b"] * t.signs["blocks.1.b"])


def test_untargeted_layers_pass_through(rng):
    x = make_model(rng, K=4)
    t = materialize(TransformSpec("srsf", 1, 0, TargetSelector("mlp")), parse_schema(x))
    y = apply(t, x)
    for name in ("input.proj", "output.head", "blocks.1.attn.proj", "blocks.3.attn.proj"):
        assert np.array_equal(y[name], x[name])


def test_missing_layer_is_structural_error(rng):
    x = make_model(rng)
    t = materialize(TransformSpec("srsf", 1, 0), parse_schema(x))
    with pytest.raises(StructuralMismatchError):
        apply(t, x.subset([n for n in x if n != "blocks.2.mlp.fc"]))


def test_different_indices_differ():
    x = TensorMap({"blocks.1.w": np.ones((1, 64)), "blocks.2.w": np.ones((1, 64))})
    s = parse_schema(x)
    a = materialize(TransformSpec("rsf", 42, 0), s).signs["blocks.1.w"]
    b = materialize(TransformSpec("rsf", 42, 1), s).signs["blocks.1.w"]
    assert not np.array_equal(a, b)


def test_rd_does_not_preserve_norm(rng):
    x = make_model(rng)
    t = materialize(TransformSpec("rd", 42, 0), parse_schema(x))
    assert not t.orthogonal
    ratio = frobenius_norm(apply(t, x)) / frobenius_norm(x)
    assert abs(ratio - 1.0) > 1e-3


def test_rd_inverse_rejects_tiny_diagonal():
    t = MaterializedTransform("rd", diags={"blocks.1.w": np.array([1.0, 1e-13])})
    x = TensorMap({"blocks.1.w": [[1.0, 1.0]]})
    with pytest.raises(NumericalDegeneracyError):
        apply_inverse(t, x)


def test_compose_signs_rejects_non_sign():
    s = parse_schema(three_block())
    with pytest.raises(InvalidSpecError):
        compose_signs(materialize(TransformSpec("rsf", 0, 0), s), materialize(TransformSpec("shuffle", 0, 0), s))


_shapes = st.sampled_from([(3,), (2, 5), (4, 1), (1, 7), (6, 6)])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, M64), st.integers(0, 50), st.sampled_from(ORTHOGONAL_MODES), _shapes,
       st.integers(2, 5), st.integers(1, 3), st.integers(0, 2**31))
def test_round_trip_and_norm_preservation(seed, idx, mode, shape, K, skip, data_seed):
    r = np.random.default_rng(data_seed)
    x = TensorMap({f"blocks.{k}.{t}": r.standard_normal(shape) for k in range(1, K + 1) for t in ("a", "b")})
    t = materialize(TransformSpec(mode, seed, idx, TargetSelector(skip_rate=skip)), parse_schema(x))
    y = apply(t, x)
    assert bit_equal(apply_inverse(t, y), x)
    assert frobenius_norm(y) == frobenius_norm(x)
    for members, order in t.permutations.values():
        assert sorted(order) == list(range(len(members)))


def test_all_modes_listed():
    assert set(MODES) - set(ORTHOGONAL_MODES) == {"rd"}
