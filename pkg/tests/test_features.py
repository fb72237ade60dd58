import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spevec.features import (N_MELS, WavFormatError, Waveform, compute_fbank, crop_or_extend,
                             frame_params, generate_synthetic_speakers, hz_to_mel, load_wav,
                             mel_filterbank, mel_to_hz, sliding_mean_normalize, write_wav)


# --- WAV ingestion -----------------------------------------------------------

def test_one_second_pcm16(tmp_path):
    p = tmp_path / "a.wav"
    x = 0.5 * np.sin(np.arange(16000) * 0.01)
    write_wav(p, x, 16000)
    w = load_wav(p)
    assert w.sample_rate == 16000
    assert w.samples.shape == (16000,)
    np.testing.assert_allclose(w.samples, x, atol=1 / 32767)


def test_all_zero_pcm(tmp_path):
    p = tmp_path / "z.wav"
    write_wav(p, np.zeros(800), 8000)
    assert np.all(load_wav(p).samples == 0)


def test_stereo_takes_first_channel(tmp_path):
    p = tmp_path / "s.wav"
    n = 1234
    left, right = np.linspace(-0.5, 0.5, n), np.full(n, 0.25)
    write_wav(p, np.stack([left, right], 1), 16000, channels=2)
    w = load_wav(p)
    assert w.samples.shape == (n,)
    np.testing.assert_allclose(w.samples, left, atol=1 / 32767)


def test_float32_wav(tmp_path):
    p = tmp_path / "f.wav"
    x = np.random.default_rng(0).uniform(-1, 1, 500)
    write_wav(p, x, 16000, float32=True)
    np.testing.assert_allclose(load_wav(p).samples, x.astype(np.float32), rtol=0, atol=0)


def test_truncated_wav_reports_offset(tmp_path):
    p = tmp_path / "t.wav"
    write_wav(p, np.zeros(1000), 16000)
    p.write_bytes(p.read_bytes()[:500])
    with pytest.raises(WavFormatError, match="byte offset 500"):
        load_wav(p)


def test_not_a_wav(tmp_path):
    p = tmp_path / "junk.wav"
    p.write_bytes(b"hello world, definitely not audio")
    with pytest.raises(WavFormatError, match="byte offset 0"):
        load_wav(p)


def test_unsupported_encoding(tmp_path):
    p = tmp_path / "u.wav"
    write_wav(p, np.zeros(100), 16000)
    raw = bytearray(p.read_bytes())
    raw[34:36] = (24).to_bytes(2, "little")  # claim 24-bit PCM
    p.write_bytes(bytes(raw))
    with pytest.raises(WavFormatError, match="unsupported encoding"):
        load_wav(p)


# --- filterbank ---------------------------------------------------------------

def test_frame_params_16k():
    assert frame_params(16000) == (400, 160, 512)


def test_one_second_gives_98_frames():
    f = compute_fbank(Waveform(np.random.default_rng(0).standard_normal(16000) * 0.1, 16000))
    assert f.shape == (N_MELS, (16000 - 400) // 160 + 1) == (64, 98)


@pytest.mark.parametrize("sr,n", [(8000, 200), (16000, 401), (22050, 5000), (44100, 44100)])
def test_row_count_is_64(sr, n):
    x = np.random.default_rng(sr).standard_normal(n) * 0.1
    assert compute_fbank(Waveform(x, sr)).shape[0] == 64


def test_dc_energy_in_lowest_bin():
    f = compute_fbank(Waveform(np.full(16000, 0.3), 16000))
    assert np.all(f.argmax(axis=0) == 0)


def test_too_short_names_minimum():
    with pytest.raises(ValueError, match="at least 400"):
        compute_fbank(Waveform(np.ones(399), 16000))


def test_shift_covariance():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(8000) * 0.1
    a = compute_fbank(Waveform(x, 16000))
    b = compute_fbank(Waveform(x[160:], 16000))
    np.testing.assert_allclose(b[:, :a.shape[1] - 1], a[:, 1:], atol=1e-9)


def test_mel_scale_round_trip():
    f = np.linspace(0, 8000, 50)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.1)


def test_filterbank_covers_band():
    fb = mel_filterbank(16000, 512)
    assert fb.shape == (64, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)  # no empty filter


# --- sliding mean normalization ----------------------------------------------

def test_constant_matrix_normalizes_to_zero():
    assert np.allclose(sliding_mean_normalize(np.full((64, 500), 3.7)), 0, atol=1e-12)


def test_short_utterance_is_global_mean_subtraction():
    f = np.random.default_rng(0).standard_normal((64, 120))
    np.testing.assert_allclose(sliding_mean_normalize(f), f - f.mean(1, keepdims=True), atol=1e-12)


def test_impulse_shifts_neighbours():
    T, t, v = 1000, 500, 6.0
    f = np.zeros((64, T))
    f[:, t] = v
    out = sliding_mean_normalize(f)
    window = 300
    for nb in (t - 100, t + 100, t - 149):
        np.testing.assert_allclose(out[:, nb], -v / window, atol=1e-12)
    np.testing.assert_allclose(out[:, t], v - v / window, atol=1e-12)
    np.testing.assert_allclose(out[:, t + 400], 0.0, atol=1e-12)


def _naive_sliding(f, win):
    T = f.shape[1]
    out = np.empty_like(f)
    for t in range(T):
        if T <= win:
            lo, hi = 0, T
        else:
            lo = min(max(t - win // 2, 0), T - win)
            hi = lo + win
        out[:, t] = f[:, t] - f[:, lo:hi].mean(1)
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 700), st.integers(0, 2 ** 31), st.floats(-50, 50))
def test_sliding_matches_naive_and_kills_offsets(T, seed, c):
    f = np.random.default_rng(seed).standard_normal((3, T))
    out = sliding_mean_normalize(f)
    np.testing.assert_allclose(out, _naive_sliding(f, 300), atol=1e-10)
    np.testing.assert_allclose(sliding_mean_normalize(f + c), out, atol=1e-9)


# --- crop / extend -----------------------------------------------------------

def test_crop_is_contiguous_slice():
    f = np.arange(64 * 600, dtype=float).reshape(64, 600)
    out = crop_or_extend(f, 400, np.random.default_rng(0))
    assert out.shape == (64, 400)
    start = int(out[0, 0])
    np.testing.assert_array_equal(out, f[:, start:start + 400])


def test_extend_tiles_with_period():
    f = np.random.default_rng(1).standard_normal((64, 100))
    out = crop_or_extend(f, 300, np.random.default_rng(0))
    assert out.shape == (64, 300)
    np.testing.assert_array_equal(out[:, :100], out[:, 100:200])
    np.testing.assert_array_equal(out[:, :100], out[:, 200:])


def test_equal_length_is_identity():
    f = np.random.default_rng(2).standard_normal((64, 321))
    np.testing.assert_array_equal(crop_or_extend(f, 321, np.random.default_rng(0)), f)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.integers(1, 600), st.integers(0, 1000))
def test_crop_or_extend_shape(T, target, seed):
    f = np.ones((64, T))
    assert crop_or_extend(f, target, np.random.default_rng(seed)).shape == (64, target)


# --- synthetic speakers ------------------------------------------------------

def test_synthetic_is_deterministic():
    a = generate_synthetic_speakers(3, 4, 11)
    b = generate_synthetic_speakers(3, 4, 11)
    assert [u.utt_id for u in a] == [u.utt_id for u in b]
    for ua, ub in zip(a, b):
        assert np.array_equal(ua.features, ub.features)


def test_synthetic_counts():
    utts = generate_synthetic_speakers(8, 20, 7)
    assert len(utts) == 160
    assert len({u.speaker for u in utts}) == 8
    assert all(u.features.shape[0] == 64 and 300 <= u.features.shape[1] <= 500 for u in utts)


def test_synthetic_heldout_continues_per_speaker_stream():
    train = generate_synthetic_speakers(2, 5, 3)
    held = generate_synthetic_speakers(2, 3, 3, first_utt=5)
    assert not {u.utt_id for u in train} & {u.utt_id for u in held}
    # the same utterance index gives the same content regardless of how many were requested
    more = generate_synthetic_speakers(2, 8, 3)
    by_id = {u.utt_id: u.features for u in more}
    for u in held:
        assert np.array_equal(by_id[u.utt_id], u.features)


def test_between_speaker_distance_exceeds_within():
    utts = generate_synthetic_speakers(8, 20, 7)
    means = np.array([u.features.mean(1) for u in utts])
    spk = np.array([u.speaker for u in utts])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    same = spk[:, None] == spk[None]
    off_diag = ~np.eye(len(utts), dtype=bool)
    assert d[same & off_diag].mean() < d[~same].mean()
