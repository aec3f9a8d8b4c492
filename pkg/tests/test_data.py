import numpy as np
import pytest

from timetracker.data import LagCopy, Sinusoid, SynthSpec, load_dataset, split, synth_generate, write_csv
from timetracker.training import extract_pretrain_samples, window_count


def test_toy_file_with_timestamp(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("date,a,b\n" + "".join(f"2020-01-0{i},{i},{2 * i}\n" for i in range(1, 6)))
    ds = load_dataset(path)
    assert ds.shape == (2, 5)
    assert ds.names == ["a", "b"]
    np.testing.assert_array_equal(ds.values[1], [2, 4, 6, 8, 10])
    assert ds.timestamps[0] == "2020-01-01"


def test_toy_file_without_timestamp(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("a,b\n1,2\n3,4\n5,6\n7,8\n9,10\n")
    assert load_dataset(path).shape == (2, 5)


def test_ragged_row_located(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n3\n")
    with pytest.raises(ValueError, match="row 3"):
        load_dataset(path)


def test_unparseable_cell_located(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,a,b\nx,1,2\ny,3,oops\n")
    with pytest.raises(ValueError, match="row 3, column 3"):
        load_dataset(path)
    path.write_text("a\n1\nnan\n")
    with pytest.raises(ValueError, match="non-finite"):
        load_dataset(path)


def test_write_read_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(3, 20))
    write_csv(tmp_path / "x.csv", x, ["p", "q", "r"])
    ds = load_dataset(tmp_path / "x.csv")
    np.testing.assert_array_equal(ds.values, x)


# -- synthetic -----------------------------------------------------------------


def test_pure_sinusoid_exact():
    spec = SynthSpec(C=1, T=50, sinusoids=((Sinusoid(10.0, 2.0, 0.3),),))
    t = np.arange(50)
    np.testing.assert_allclose(synth_generate(spec)[0], 2.0 * np.sin(2 * np.pi * t / 10 + 0.3), atol=1e-12)


def test_noiseless_lag_copy_is_shift():
    spec = SynthSpec(C=3, T=200, seed=1, ar_coef=(0.5,) * 3, noise_std=(1.0,) * 3,
                     lag_copies=(LagCopy(0, 1, 7), LagCopy(1, 2, 3)))
    x = synth_generate(spec)
    np.testing.assert_array_equal(x[1, 7:], x[0, :-7])
    np.testing.assert_array_equal(x[2, 3:], x[1, :-3])


def test_noisy_lag_copy_correlated():
    spec = SynthSpec(C=2, T=2000, seed=2, sinusoids=((Sinusoid(20.0, 1.0),),), noise_std=(0.05, 0.0),
                     lag_copies=(LagCopy(0, 1, 5, 0.1),))
    x = synth_generate(spec)
    assert np.corrcoef(x[1, 5:], x[0, :-5])[0, 1] > 0.9


def test_ar1_autocorrelation():
    x = synth_generate(SynthSpec(C=1, T=10_000, seed=3, ar_coef=(0.9,), noise_std=(1.0,)))[0]
    assert np.corrcoef(x[1:], x[:-1])[0, 1] == pytest.approx(0.9, abs=0.05)


def test_synth_deterministic():
    spec = SynthSpec(C=2, T=100, seed=4, noise_std=(1.0, 1.0), ar_coef=(0.3, 0.3))
    assert synth_generate(spec).tobytes() == synth_generate(spec).tobytes()


def test_synth_spec_validation():
    with pytest.raises(ValueError, match="cycle"):
        SynthSpec(C=2, T=10, lag_copies=(LagCopy(0, 1, 1), LagCopy(1, 0, 1)))
    with pytest.raises(ValueError, match="delta"):
        SynthSpec(C=2, T=10, lag_copies=(LagCopy(0, 1, 10),))


# -- splits ------------------------------------------------------------------


def test_fewshot_boundaries():
    s = split(100, "fewshot")
    assert s.train[0] == 0 and s.val[1] == 20  # rows 1-20 (train + its last 10% as val)
    assert s.train[1] == s.val[0] == 18
    assert s.test == (80, 100)


def test_standard_boundaries():
    s = split(100, "standard")
    assert (s.train, s.val, s.test) == ((0, 70), (70, 80), (80, 100))


def test_short_segment_errors():
    with pytest.raises(ValueError, match="test segment"):
        split(100, "standard", 16, 8)
    with pytest.warns(UserWarning, match="validation"):
        split(1000, "standard", 64, 40)


def test_windows_never_straddle():
    T_len, L, F = 400, 16, 8
    x = np.arange(T_len, dtype=float)[None]
    s = split(T_len, "standard", L, F)
    for part in ("train", "val", "test"):
        a, b = getattr(s, part)
        w = s.windows(x, part, L, F)
        assert len(w) == window_count(b - a, L, F)
        assert w.min() >= a and w.max() < b


def test_load_split_extract_conservation(tmp_path):
    x = np.random.default_rng(5).normal(size=(3, 300))
    write_csv(tmp_path / "d.csv", x)
    values = load_dataset(tmp_path / "d.csv").values
    s = split(values.shape[1], "standard", 16, 8)
    train = values[:, slice(*s.train)]
    assert len(extract_pretrain_samples([train], 16, 8)) == 3 * (train.shape[1] - 16 - 8)
