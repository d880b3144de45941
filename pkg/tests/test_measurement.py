import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beamwalk import channel as ch
from beamwalk import measurement as ms


def small_cfg(**kw):
    base = dict(n=16, n_rf=4, m=4, paths=2, snrs=(0.0, 10.0), train=6, val=3, test=4)
    base.update(kw)
    return ms.DatasetConfig(**base)


# -- selection matrices ------------------------------------------------------

@given(st.integers(1, 32), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31))
def test_selection_entry_magnitude(n, n_rf, m, seed):
    n_rf = min(n_rf, n)
    w = ms.selection_from_seed(n, n_rf, m, seed).stacked
    np.testing.assert_allclose(np.abs(w), 1 / np.sqrt(m * n_rf))


def test_selection_single_entry_is_sign():
    w = ms.selection_from_seed(1, 1, 1, 0).stacked
    assert abs(w.item()) == 1.0


def test_selection_sign_balance():
    w = ms.selection_from_seed(128, 64, 8, 2024).stacked
    frac = np.mean(w > 0)
    assert 0.49 <= frac <= 0.51


def test_selection_rejects_too_many_chains():
    with pytest.raises(ValueError):
        ms.gen_selection_matrix(8, 9, 1, ch.make_rng(0))


def test_block_operator_is_block_diagonal():
    sel = ms.selection_from_seed(4, 2, 2, 1)
    op = ms.block_operator(sel, 3)
    assert op.shape == (12, 12)
    np.testing.assert_array_equal(op[4:8, 4:8], sel.stacked)
    np.testing.assert_array_equal(op[0:4, 4:8], 0)


# -- noise and SNR -----------------------------------------------------------

def test_snr_conversion():
    assert ms.snr_to_noise_std(0.0) == 1.0
    assert abs(ms.snr_to_noise_std(20.0) - 0.1) < 1e-15


def test_noiseless_measurement_is_exact():
    sel = ms.selection_from_seed(16, 4, 4, 3)
    h = ch.complex_normal(np.random.default_rng(0), 16)
    s = ms.measure(sel, h, np.inf, noise_seed=1)
    np.testing.assert_allclose(s.y, sel.stacked @ h, atol=1e-14)


def test_zero_channel_zero_noise():
    sel = ms.selection_from_seed(16, 4, 4, 3)
    np.testing.assert_array_equal(ms.measure(sel, np.zeros(16), np.inf, noise_seed=1).y, 0)


def test_measurement_noise_energy():
    # E||Y - W H||^2 = sum_m sigma^2 ||W_m||_F^2 = sigma^2 ||W||_F^2
    sel = ms.selection_from_seed(32, 8, 4, 7)
    h = ch.gen_sv_channel(32, 3, ch.make_rng(1)).beamspace
    rng = ch.make_rng(2)
    snr = 5.0
    sigma = ms.snr_to_noise_std(snr)
    err = [np.linalg.norm(ms.measure(sel, h, snr, rng).y - sel.stacked @ h) ** 2 for _ in range(10_000)]
    expected = sigma**2 * np.linalg.norm(sel.stacked) ** 2
    assert abs(np.mean(err) / expected - 1) < 0.05


def test_dataset_empirical_snr():
    # per-antenna SNR = E|h_n|^2 / sigma^2; sigma^2 estimated from the residual energy
    cfg = ms.DatasetConfig(n=32, n_rf=8, m=4, paths=3, snrs=(10.0,), train=10_000, val=0, test=0)
    ds = ms.build_split(cfg, "train", 17)
    resid = ds.y - ds.h @ ds.w.T
    sigma2 = np.mean(np.sum(np.abs(resid) ** 2, 1)) / np.linalg.norm(ds.w) ** 2
    snr = 10 * np.log10(np.mean(np.abs(ds.h) ** 2) / sigma2)
    assert abs(snr - 10.0) < 0.2


def test_measure_needs_randomness_source():
    sel = ms.selection_from_seed(4, 2, 1, 0)
    with pytest.raises(ValueError):
        ms.measure(sel, np.zeros(4), 10.0)


def test_measure_shape_check():
    sel = ms.selection_from_seed(4, 2, 1, 0)
    with pytest.raises(ValueError):
        ms.measure(sel, np.zeros(5), 10.0, noise_seed=0)


# -- datasets ----------------------------------------------------------------

def test_small_dataset_round_trip(tmp_path):
    cfg = small_cfg(snrs=(5.0,), train=10)
    ds = ms.build_split(cfg, "train", 1)
    assert len(ds) == 10
    ms.save_dataset(tmp_path / "a.bwds", ds)
    back = ms.load_dataset(tmp_path / "a.bwds")
    ms.save_dataset(tmp_path / "b.bwds", back)
    assert (tmp_path / "a.bwds").read_bytes() == (tmp_path / "b.bwds").read_bytes()
    assert back.h.tobytes() == ds.h.tobytes() and back.y.tobytes() == ds.y.tobytes()


def test_snr_groups():
    ds = ms.build_split(ms.DatasetConfig(n=16, n_rf=4, m=4, train=3, val=0, test=0), "train", 0)
    assert ds.snrs == (0.0, 5.0, 10.0, 15.0, 20.0)
    assert ds.counts() == [3] * 5


def test_same_seed_same_bytes(tmp_path):
    cfg = small_cfg()
    ms.build_dataset(cfg, 9, tmp_path / "a")
    ms.build_dataset(cfg, 9, tmp_path / "b")
    for s in ms.SPLITS:
        assert (tmp_path / "a" / f"{s}.bwds").read_bytes() == (tmp_path / "b" / f"{s}.bwds").read_bytes()


def test_different_seed_different_data():
    cfg = small_cfg()
    assert not np.allclose(ms.build_split(cfg, "test", 1).h, ms.build_split(cfg, "test", 2).h)


def test_splits_do_not_share_channels():
    splits = ms.build_dataset(small_cfg(), 4)
    seen = {s: {row.tobytes() for row in ds.h} for s, ds in splits.items()}
    assert not seen["train"] & seen["test"]
    assert not seen["train"] & seen["val"]


def test_snr_groups_share_channels_with_fresh_noise():
    ds = ms.build_split(small_cfg(), "train", 4)
    a, b = ds.at_snr(0.0), ds.at_snr(10.0)
    np.testing.assert_array_equal(a.h, b.h)
    assert len(set(a.noise_seed.tolist()) & set(b.noise_seed.tolist())) == 0


def test_replay_regenerates_measurement():
    ds = ms.build_split(small_cfg(), "val", 5)
    for i in range(len(ds)):
        np.testing.assert_array_equal(ms.replay(ds, i), ds.y[i])


def test_fixed_selection_matrix_shared_across_splits():
    splits = ms.build_dataset(small_cfg(), 6)
    np.testing.assert_array_equal(splits["train"].w, splits["test"].w)


def test_redraw_selection_per_sample(tmp_path):
    ds = ms.build_split(small_cfg(redraw_w=True), "train", 6)
    assert not np.array_equal(ds.w_for(0), ds.w_for(1))
    np.testing.assert_allclose(ds.y[3], ds.w_for(3) @ ds.h[3] + (ds.y[3] - ds.w_for(3) @ ds.h[3]))
    np.testing.assert_array_equal(ms.replay(ds, 3), ds.y[3])
    ms.save_dataset(tmp_path / "r.bwds", ds)
    back = ms.load_dataset(tmp_path / "r.bwds")
    assert back.redraw_w and np.array_equal(back.w_for(2), ds.w_for(2))


def test_split_guard():
    ds = ms.build_split(small_cfg(), "test", 0)
    with pytest.raises(ms.SplitAccessError):
        ds.require_split("train", "val")


def test_imported_channels_feed_dataset(tmp_path):
    spatial = ch.complex_normal(np.random.default_rng(0), (13, 16))
    ch.export_channels(tmp_path / "c.bwch", spatial)
    cfg = small_cfg(channels_path=str(tmp_path / "c.bwch"))
    splits = ms.build_dataset(cfg, 0)
    book = ch.lens_codebook(16)
    np.testing.assert_allclose(splits["val"].h[0], ch.beamspace_transform(book, spatial[6]))
    with pytest.raises(ValueError):
        ms.build_split(small_cfg(channels_path=str(tmp_path / "c.bwch"), test=5), "test", 0)


def test_imported_zero_channel_rejected(tmp_path):
    ch.export_channels(tmp_path / "z.bwch", np.zeros((13, 16), complex))
    with pytest.raises(ValueError, match="identically zero"):
        ms.build_split(small_cfg(channels_path=str(tmp_path / "z.bwch")), "train", 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ms.DatasetConfig(n=8, n_rf=9)
    with pytest.raises(ValueError):
        ms.DatasetConfig(snrs=())


# -- dataset file parsing ----------------------------------------------------

def _blob():
    return ms.dataset_to_bytes(ms.build_split(small_cfg(), "train", 2))


def test_dataset_header_layout():
    blob = _blob()
    assert blob[:4] == b"BWDS"
    version, n, n_rf, m, ns = np.frombuffer(blob[4:24], "<u4")
    assert (version, n, n_rf, m, ns) == (1, 16, 4, 4, 2)
    assert np.frombuffer(blob[24:32], "<u4").tolist() == [6, 6]


@pytest.mark.parametrize(
    "mutate, msg",
    [
        (lambda b: b"BWCH" + b[4:], "magic"),
        (lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:], "version"),
        (lambda b: b[:-1], "record block"),
        (lambda b: b[:20], "truncated"),
    ],
)
def test_dataset_parse_errors(mutate, msg):
    with pytest.raises(ms.DatasetFormatError, match=msg):
        ms.parse_dataset(mutate(_blob()))


def test_dataset_tampered_selection_rejected():
    blob = bytearray(_blob())
    # first W entry follows header(24) + counts(8) + split/flags/seed(16) + hash(8) + snrs(16)
    off = 24 + 8 + 16 + 8 + 16
    blob[off : off + 8] = np.float64(0.123).tobytes()
    with pytest.raises(ms.DatasetFormatError, match="selection matrix"):
        ms.parse_dataset(bytes(blob))
