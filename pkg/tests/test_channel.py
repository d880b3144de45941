import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beamwalk import channel as ch


def test_steering_broadside():
    np.testing.assert_allclose(ch.steering_vector(0.0, 4), [0.5] * 4)


def test_steering_half_wavelength_flip():
    np.testing.assert_allclose(ch.steering_vector(0.5, 2), np.array([1, -1]) / np.sqrt(2), atol=1e-15)


def test_steering_unit_norm(rng):
    for t in rng.uniform(-0.5, 0.5, 100):
        assert abs(np.linalg.norm(ch.steering_vector(t, 37)) - 1) < 1e-12


def test_steering_rejects_empty_array():
    with pytest.raises(ValueError):
        ch.steering_vector(0.1, 0)


def test_lens_grid_n4():
    np.testing.assert_allclose(ch.lens_codebook(4).grid, [-0.375, -0.125, 0.125, 0.375])


def test_lens_unitary_n4():
    u = ch.lens_codebook(4).U
    np.testing.assert_allclose(u @ u.conj().T, np.eye(4), atol=1e-12)


def test_lens_single_antenna():
    np.testing.assert_allclose(ch.lens_codebook(1).U, [[1.0]])


@given(st.integers(1, 130))
def test_lens_unitary_any_size(n):
    u = ch.lens_codebook(n).u
    assert np.max(np.abs(u.conj().T @ u - np.eye(n))) < 1e-10


def test_single_broadside_path_is_all_ones():
    c = ch.realization_from_paths([ch.PathParams(1.0, 0.0)], 8)
    np.testing.assert_allclose(c.spatial, np.ones(8), atol=1e-14)


def test_mean_channel_energy_is_n():
    # E||h||^2 = (N/L) * sum_l E|beta_l|^2 * ||a||^2 = N
    rng = ch.make_rng(5)
    n = 16
    energy = np.mean([np.linalg.norm(ch.gen_sv_channel(n, 3, rng).spatial) ** 2 for _ in range(10_000)])
    assert abs(energy / n - 1) < 0.05


@pytest.mark.parametrize("n", [4, 63, 64, 128])
def test_on_grid_path_hits_one_beam(n):
    book = ch.lens_codebook(n)
    for m in (0, n // 3, n - 1):
        c = ch.realization_from_paths([ch.PathParams(0.7 - 0.2j, float(book.grid[m]))], n, book)
        assert np.argmax(np.abs(c.beamspace)) == m
        assert abs(abs(c.beamspace[m]) - np.linalg.norm(c.spatial)) < 1e-10


def test_beamspace_zero():
    np.testing.assert_array_equal(ch.beamspace_transform(ch.lens_codebook(8), np.zeros(8, complex)), 0)


@given(st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_beamspace_round_trip_and_norm(n, seed):
    book = ch.lens_codebook(n)
    x = ch.complex_normal(np.random.default_rng(seed), n)
    b = ch.beamspace_transform(book, x)
    np.testing.assert_allclose(book.u @ b, x, atol=1e-10)
    assert abs(np.linalg.norm(b) - np.linalg.norm(x)) < 1e-10


def test_beamspace_rejects_wrong_length():
    with pytest.raises(ValueError):
        ch.beamspace_transform(ch.lens_codebook(8), np.zeros(7))


def test_path_count_checks():
    rng = ch.make_rng(0)
    with pytest.raises(ValueError):
        ch.gen_sv_channel(4, 0, rng)
    with pytest.raises(ValueError):
        ch.gen_sv_channel(4, 5, rng)


def test_directions_inside_visible_region():
    c = ch.gen_sv_channel(32, 50 // 2, ch.make_rng(9))
    for p in c.paths:
        assert -0.5 <= p.theta < 0.5
        assert abs(np.sin(p.phi) / 2 - p.theta) < 1e-12


def test_gen_channels_deterministic_and_independent_streams():
    a = ch.gen_channels(16, 3, 5, seed=11)
    b = ch.gen_channels(16, 3, 5, seed=11)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.spatial, y.spatial)
    assert not np.allclose(a[0].spatial, a[1].spatial)
    # a prefix of a larger draw is unchanged
    longer = ch.gen_channels(16, 3, 8, seed=11)
    np.testing.assert_array_equal(longer[4].spatial, a[4].spatial)


def test_derive_seed_separates_keys():
    assert ch.derive_seed(1, 2) != ch.derive_seed(2, 1)
    assert ch.derive_seed(1, 2) == ch.derive_seed(1, 2)


# -- channel files -----------------------------------------------------------

def test_zero_channel_file(tmp_path):
    path = tmp_path / "z.bwch"
    ch.export_channels(path, np.zeros((1, 4), complex))
    reals = ch.import_channels(path)
    assert len(reals) == 1
    np.testing.assert_array_equal(reals[0].beamspace, 0)


def test_channel_file_round_trip_is_bit_exact(tmp_path):
    reals = ch.gen_channels(32, 3, 6, seed=2)
    p1, p2 = tmp_path / "a.bwch", tmp_path / "b.bwch"
    ch.export_channels(p1, reals)
    back = ch.import_channels(p1)
    ch.export_channels(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    for r, b in zip(reals, back):
        assert r.spatial.tobytes() == b.spatial.tobytes()


def test_imported_channel_norms(tmp_path):
    # an arbitrary (e.g. ray-traced) spatial channel keeps its norm in beamspace
    x = ch.complex_normal(np.random.default_rng(3), (4, 64), 2.0)
    ch.export_channels(tmp_path / "x.bwch", x)
    for r in ch.import_channels(tmp_path / "x.bwch"):
        assert abs(np.linalg.norm(r.beamspace) - np.linalg.norm(r.spatial)) < 1e-10


def test_channel_header_layout():
    blob = ch.channels_to_bytes(np.ones((2, 3), complex))
    assert blob[:4] == b"BWCH"
    assert np.frombuffer(blob[4:16], "<u4").tolist() == [1, 3, 2]
    assert len(blob) == 16 + 2 * 3 * 16


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda b: b"XXXX" + b[4:], 0),
        (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], 4),
        (lambda b: b[:-5], None),
        (lambda b: b[:10], None),
    ],
)
def test_channel_parse_errors(mutate, offset):
    blob = mutate(ch.channels_to_bytes(np.ones((2, 3), complex)))
    with pytest.raises(ch.ChannelFormatError) as err:
        ch.parse_channels(blob)
    if offset is not None:
        assert err.value.offset == offset


def test_channel_non_finite_rejected_with_offset():
    x = np.ones((2, 3), complex)
    x[1, 2] = np.nan
    with pytest.raises(ch.ChannelFormatError) as err:
        ch.parse_channels(ch.channels_to_bytes(x))
    assert err.value.offset == 16 + 16 * 5
