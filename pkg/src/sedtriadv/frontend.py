"""Audio front-end: WAV input, resampling, and log-mel spectrogram extraction.

The output spectrogram has a fixed number of frames regardless of small
duration deviations: the waveform is cropped or zero-padded so the centered
STFT yields exactly ``n_frames`` frames, then reflect-padded by half a window
on each side. Frame t is centered at ``t * hop_len`` samples.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import ConfigError, InvalidAudio, UnsupportedRate

CACHE_MAGIC = b"LMSP"


@dataclass(frozen=True)
class FrontendConfig:
    """STFT/mel parameters. Defaults give a 640x128 spectrogram for a 10 s
    clip at 22.05 kHz (2048-sample Hann window, 345-sample hop)."""

    target_rate_hz: int = 22050
    window_len: int = 2048
    hop_len: int = 345
    n_mels: int = 128
    n_frames: int = 640
    energy_floor: float = 1e-10

    def __post_init__(self):
        if self.hop_len >= self.window_len:
            raise ConfigError(f"hop_len {self.hop_len} must be < window_len {self.window_len}")
        if self.hop_len <= 0 or self.window_len <= 0:
            raise ConfigError("window_len and hop_len must be positive")
        if self.n_mels < 1 or self.n_frames < 1:
            raise ConfigError("n_mels and n_frames must be >= 1")
        if self.energy_floor <= 0:
            raise ConfigError("energy_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def frame_hop_s(self) -> float:
        return self.hop_len / self.target_rate_hz

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown frontend config keys {sorted(unknown)}")
        return cls(**d)


def toy_frontend_config() -> FrontendConfig:
    """Coarse front-end for quick desk-scale runs: a 128x32 spectrogram
    covering the same 10 s clip with a ~78 ms hop."""
    return FrontendConfig(window_len=2048, hop_len=1724, n_mels=32, n_frames=128)


@dataclass
class AudioClip:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int
    duration_s: float = field(default=0.0)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidAudio(f"expected mono samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidAudio("non-finite samples")
        if self.duration_s == 0.0:
            self.duration_s = len(self.samples) / self.sample_rate_hz
        elif len(self.samples) != round(self.duration_s * self.sample_rate_hz):
            raise InvalidAudio(
                f"{len(self.samples)} samples != round({self.duration_s} s "
                f"* {self.sample_rate_hz} Hz)")


@dataclass
class LogMelSpectrogram:
    """T x B matrix of log mel-band energies (float32) plus the frame hop."""

    frames: np.ndarray
    frame_hop_s: float


def read_wav(path: str | Path) -> AudioClip:
    """Read a RIFF PCM16 little-endian WAV; stereo is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise InvalidAudio(f"compressed WAV not supported: {path}")
            if w.getsampwidth() != 2:
                raise InvalidAudio(f"expected 16-bit PCM, got {8 * w.getsampwidth()}-bit: {path}")
            n_ch = w.getnchannels()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise InvalidAudio(f"not a readable WAV file: {path}") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_ch == 2:
        data = 0.5 * (data[0::2] + data[1::2])
    elif n_ch != 1:
        raise InvalidAudio(f"unsupported channel count {n_ch}: {path}")
    return AudioClip(data, rate)


def write_wav_pcm16(path: str | Path, samples: np.ndarray, rate_hz: int) -> None:
    """Write mono float samples in [-1, 1] as PCM16."""
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate_hz)
        w.writeframes(pcm.tobytes())


def resample(clip: AudioClip, target_rate_hz: int) -> AudioClip:
    """Band-limited (windowed-sinc polyphase) downsampling.

    Only downsampling is supported; a clip already at the target rate is
    returned unchanged.
    """
    if target_rate_hz <= 0:
        raise UnsupportedRate(f"target rate must be positive, got {target_rate_hz}")
    if not np.all(np.isfinite(clip.samples)):
        raise InvalidAudio("non-finite samples")
    if clip.sample_rate_hz == target_rate_hz:
        return clip
    if clip.sample_rate_hz < target_rate_hz:
        raise UnsupportedRate(
            f"upsampling {clip.sample_rate_hz} -> {target_rate_hz} Hz not supported")
    g = np.gcd(clip.sample_rate_hz, target_rate_hz)
    up, down = target_rate_hz // g, clip.sample_rate_hz // g
    out = resample_poly(clip.samples, up, down)
    return AudioClip(out, target_rate_hz)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _fit_length(samples: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Crop/zero-pad so the centered STFT yields exactly cfg.n_frames frames
    (frame count is 1 + floor(N / hop))."""
    n_min = (cfg.n_frames - 1) * cfg.hop_len
    n_max = cfg.n_frames * cfg.hop_len - 1
    n = len(samples)
    if n > n_max:
        return samples[:n_max]
    if n < n_min:
        return np.pad(samples, (0, n_min - n))
    return samples


def stft_power(clip: AudioClip, cfg: FrontendConfig) -> np.ndarray:
    """Power spectrogram |windowed rfft|^2, shape (n_frames, window_len//2+1).

    Frames are centered every hop via reflect padding of half a window.
    Computed in float64.
    """
    if clip.sample_rate_hz != cfg.target_rate_hz:
        raise InvalidAudio(
            f"clip at {clip.sample_rate_hz} Hz, front-end expects {cfg.target_rate_hz} Hz")
    if not np.all(np.isfinite(clip.samples)):
        raise InvalidAudio("non-finite samples")
    x = _fit_length(clip.samples.astype(np.float64), cfg)
    half = cfg.window_len // 2
    if len(x) <= half:
        raise InvalidAudio(f"clip of {len(x)} samples is shorter than one window")
    xp = np.pad(x, (half, half), mode="reflect")
    starts = np.arange(cfg.n_frames) * cfg.hop_len
    idx = starts[:, None] + np.arange(cfg.window_len)[None, :]
    frames = xp[idx] * hann_window(cfg.window_len)[None, :]
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real ** 2 + spec.imag ** 2)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, window_len//2+1).

    Centers are uniform on the HTK mel scale between 0 and Nyquist; each
    continuous triangle peaks at 1. Adjacent slopes share denominators, so
    interior FFT bins (between the first and last center) are covered by
    exactly two filters whose weights sum to 1.
    """
    nyquist = cfg.target_rate_hz / 2.0
    bin_hz = np.linspace(0.0, nyquist, cfg.n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, cfg.n_bins))
    for m in range(cfg.n_mels):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_hz - lo) / (ctr - lo)
        falling = (hi - bin_hz) / (hi - ctr)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.sum(axis=1) <= 0.0):
        raise ConfigError(
            f"{cfg.n_mels} mel filters cannot be resolved by a "
            f"{cfg.window_len}-point FFT (empty filter)")
    return fb


def log_mel(clip: AudioClip, cfg: FrontendConfig) -> LogMelSpectrogram:
    """Full front-end: (resample ->) STFT power -> mel -> floored log."""
    if clip.sample_rate_hz != cfg.target_rate_hz:
        clip = resample(clip, cfg.target_rate_hz)
    power = stft_power(clip, cfg)
    mel = power @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, cfg.energy_floor)).astype(np.float32)
    return LogMelSpectrogram(frames, cfg.frame_hop_s)


def save_spectrogram(path: str | Path, spec: LogMelSpectrogram) -> None:
    """Cache file: {magic "LMSP", u32 T, u32 B} + T*B little-endian float32."""
    t, b = spec.frames.shape
    payload = np.ascontiguousarray(spec.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<II", t, b) + payload)


def load_spectrogram(path: str | Path, frame_hop_s: float) -> LogMelSpectrogram:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != CACHE_MAGIC:
        raise InvalidAudio(f"not a spectrogram cache file: {path}")
    t, b = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + 4 * t * b:
        raise InvalidAudio(f"cache size mismatch: {path}")
    frames = np.frombuffer(blob, dtype="<f4", offset=12).reshape(t, b).copy()
    return LogMelSpectrogram(frames, frame_hop_s)
