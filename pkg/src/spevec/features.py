"""Waveform ingestion, 64-band log-Mel filterbank features, crop/extend policy
and a synthetic speaker generator for desk-scale experiments.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

N_MELS = 64
FRAME_S = 0.025
HOP_S = 0.010
LOG_FLOOR = 1e-10
MIN_SAMPLE_RATE = 8000


class WavFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate < MIN_SAMPLE_RATE:
            raise ValueError(f"sample rate must be >= {MIN_SAMPLE_RATE} Hz")


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    features: np.ndarray  # (64, T)


# ---------------------------------------------------------------------------
# WAV parsing

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE file: 16-bit PCM or 32-bit float, first channel only."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise WavFormatError("file too short for a RIFF header", len(data))
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file", 0)
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(data):
                raise WavFormatError("truncated fmt chunk", pos)
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag == _EXTENSIBLE and size >= 40:
                (tag,) = struct.unpack_from("<H", data, body + 24)
            fmt = (tag, channels, rate, align, bits, pos)
        elif cid == b"data":
            if fmt is None:
                raise WavFormatError("data chunk before fmt chunk", pos)
            return _decode(data, body, size, fmt)
        pos = body + size + (size & 1)
    raise WavFormatError("no data chunk found", pos)


def _decode(data: bytes, body: int, size: int, fmt) -> Waveform:
    tag, channels, rate, align, bits, fmt_pos = fmt
    if channels < 1:
        raise WavFormatError("zero channels", fmt_pos)
    if tag == _PCM and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise WavFormatError(f"unsupported encoding (format tag {tag}, {bits} bits)", fmt_pos)
    frame_bytes = channels * bits // 8
    if body + size > len(data):
        raise WavFormatError(
            f"data chunk declares {size} bytes but only {len(data) - body} remain", len(data))
    if size % frame_bytes:
        raise WavFormatError("data size is not a whole number of frames", body + size)
    raw = np.frombuffer(data, dtype=dtype, count=size // (bits // 8), offset=body)
    samples = raw.reshape(-1, channels)[:, 0].astype(np.float64) * scale
    if samples.size == 0:
        raise WavFormatError("empty data chunk", body)
    return Waveform(np.clip(samples, -1.0, 1.0), rate)


def write_wav(path, samples, sample_rate: int, channels: int = 1, float32: bool = False) -> None:
    """Write a PCM16 or float32 WAV. ``samples`` is (n,) or (n, channels)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, channels)
    if float32:
        payload, tag, bits = x.astype("<f4").tobytes(), _FLOAT, 32
    else:
        payload = np.round(np.clip(x, -1, 1) * 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    align = channels * bits // 8
    hdr = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
                      tag, channels, sample_rate, sample_rate * align, align, bits,
                      b"data", len(payload))
    Path(path).write_bytes(hdr + payload)


# ---------------------------------------------------------------------------
# filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters on the HTK mel scale from 0 Hz to Nyquist, (n_mels, n_fft//2+1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def frame_params(sample_rate: int) -> tuple[int, int, int]:
    frame = int(round(FRAME_S * sample_rate))
    hop = int(round(HOP_S * sample_rate))
    n_fft = 1 << (frame - 1).bit_length()
    return frame, hop, n_fft


def compute_fbank(w: Waveform) -> np.ndarray:
    """64 x T log-Mel energies: 25 ms Hamming frames every 10 ms."""
    frame, hop, n_fft = frame_params(w.sample_rate)
    x = w.samples
    if x.size < frame:
        raise ValueError(f"waveform has {x.size} samples; need at least {frame} "
                         f"({FRAME_S * 1000:.0f} ms)")
    n_frames = (x.size - frame) // hop + 1
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(frame)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(w.sample_rate, n_fft).T
    return np.log(energies + LOG_FLOOR).T


def sliding_mean_normalize(f: np.ndarray, window_s: float = 3.0) -> np.ndarray:
    """Subtract from each frame the mean over a centered window of up to ``window_s``.

    The window keeps its full length near the edges by shifting inward; an
    utterance shorter than the window gets its global mean removed.
    """
    T = f.shape[1]
    n = min(T, max(1, int(round(window_s / HOP_S))))
    start = np.clip(np.arange(T) - n // 2, 0, T - n)
    csum = np.concatenate([np.zeros((f.shape[0], 1)), np.cumsum(f, axis=1)], axis=1)
    means = (csum[:, start + n] - csum[:, start]) / n
    return f - means


def crop_or_extend(f: np.ndarray, target_T: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random contiguous crop when too long, wrap-around tiling when too short."""
    if target_T < 1:
        raise ValueError("target_T must be >= 1")
    T = f.shape[1]
    if T > target_T:
        rng = rng or np.random.default_rng()
        start = int(rng.integers(0, T - target_T + 1))
        return f[:, start:start + target_T]
    if T < target_T:
        return f[:, np.arange(target_T) % T]
    return f


# ---------------------------------------------------------------------------
# synthetic speakers


def generate_synthetic_speakers(n_speakers: int, utts_per_speaker: int, seed: int,
                                first_utt: int = 0, frames: tuple[int, int] = (300, 500),
                                noise_std: float = 1.0, ar_coef: float = 0.9) -> list[Utterance]:
    """Desk-scale labeled dataset.

    Each speaker has a random 64-dim template plus a linear spectral tilt; each
    utterance adds AR(1) noise along time with a random length in ``frames``.
    Every utterance draws from its own (seed, speaker, index) stream, so
    ``first_utt`` selects further utterances of the same speakers.
    """
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("counts must be >= 1")
    mel_axis = np.linspace(-1.0, 1.0, N_MELS)
    out = []
    for spk in range(n_speakers):
        srng = np.random.default_rng([seed, spk])
        template = srng.standard_normal(N_MELS)
        tilt = srng.uniform(-2.0, 2.0) * mel_axis
        mean = (template + tilt)[:, None]
        for u in range(first_utt, first_utt + utts_per_speaker):
            urng = np.random.default_rng([seed, spk, u])
            T = int(urng.integers(frames[0], frames[1] + 1))
            eps = urng.standard_normal((N_MELS, T)) * noise_std * np.sqrt(1 - ar_coef ** 2)
            noise = np.empty_like(eps)
            noise[:, 0] = urng.standard_normal(N_MELS) * noise_std
            noise[:, 1:], _ = lfilter([1.0], [1.0, -ar_coef], eps[:, 1:], axis=1,
                                      zi=ar_coef * noise[:, :1])
            out.append(Utterance(f"spk{spk:03d}/utt{u:04d}", f"spk{spk:03d}", mean + noise))
    return out
