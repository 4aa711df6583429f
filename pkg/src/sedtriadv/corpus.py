"""Two-domain toy corpus: procedurally synthesized 10-second soundscapes
with exact ground-truth event annotations.

The synthetic domain is clean events over silence. The real domain passes
the event mix through a one-pole smearing filter, applies a random gain, and
adds pink-noise background; all three distortions scale with ``domain_gap``
(gap 0 makes the domains identically distributed).

Every clip is generated from an rng seeded by (master seed, clip index), so
regeneration is byte-identical and a clip's hidden truth can be re-derived
from its index alone.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import chirp as _chirp
from scipy.signal import butter, lfilter

from .errors import ConfigError, ManifestError
from .frontend import FrontendConfig, LogMelSpectrogram, load_spectrogram, \
    log_mel, read_wav, save_spectrogram, write_wav_pcm16

DOMAIN_SYNTHETIC = "synthetic"
DOMAIN_REAL = "real"
DOMAINS = (DOMAIN_SYNTHETIC, DOMAIN_REAL)
# numeric target for the domain classifier
DOMAIN_VALUE = {DOMAIN_SYNTHETIC: 1.0, DOMAIN_REAL: 0.0}

KIND_STRONG = "strong"
KIND_WEAK = "weak"
KIND_UNLABELED = "unlabeled"
KINDS = (KIND_STRONG, KIND_WEAK, KIND_UNLABELED)

SPLIT_STRONG = "train_S"
SPLIT_WEAK = "train_W"
SPLIT_UNLABELED = "train_U"
SPLIT_VALIDATION = "validation"
SPLITS = (SPLIT_STRONG, SPLIT_WEAK, SPLIT_UNLABELED, SPLIT_VALIDATION)

CLIP_LEN_S = 10.0
SAMPLE_RATE = 44100

EVENT_CLASS_NAMES = [
    "tone", "chirp", "noise_burst", "am_tone",
    "click_train", "harmonic_stack", "fm_warble", "filtered_noise",
]


@dataclass(frozen=True)
class EventAnnotation:
    class_id: int
    onset_s: float
    offset_s: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ConfigError(f"negative class id {self.class_id}")
        if not 0.0 <= self.onset_s < self.offset_s:
            raise ConfigError(
                f"bad event times [{self.onset_s}, {self.offset_s}]")


@dataclass
class LabeledClip:
    id: str
    wav: str
    domain: str
    kind: str
    events: list[EventAnnotation] = field(default_factory=list)
    weak: tuple[int, ...] = ()

    @property
    def split(self) -> str:
        if self.kind == KIND_WEAK:
            return SPLIT_WEAK
        if self.kind == KIND_UNLABELED:
            return SPLIT_UNLABELED
        return SPLIT_STRONG if self.domain == DOMAIN_SYNTHETIC else SPLIT_VALIDATION


@dataclass
class CorpusManifest:
    clips: list[LabeledClip]
    class_names: list[str]
    root: Path
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[LabeledClip]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [c for c in self.clips if c.split == name]


@dataclass(frozen=True)
class CorpusCounts:
    n_strong: int = 200
    n_weak: int = 150
    n_unlabeled: int = 400
    n_validation: int = 100

    @property
    def total(self) -> int:
        return self.n_strong + self.n_weak + self.n_unlabeled + self.n_validation


# ---------------------------------------------------------------------------
# event generators (one per class, in class-id order)
# ---------------------------------------------------------------------------

def _envelope(n: int, rate: int) -> np.ndarray:
    """Raised-cosine fade in/out so event energy starts and stops exactly at
    the annotated boundaries."""
    ramp = min(int(0.008 * rate), max(1, n // 4))
    env = np.ones(n)
    fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[:ramp] = fade
    env[n - ramp:] = fade[::-1]
    return env


def _gen_tone(rng, dur_s, rate):
    t = np.arange(round(dur_s * rate)) / rate
    return np.sin(2 * np.pi * rng.uniform(200.0, 1200.0) * t)


def _gen_chirp(rng, dur_s, rate):
    t = np.arange(round(dur_s * rate)) / rate
    f0 = rng.uniform(200.0, 1000.0)
    f1 = rng.uniform(2000.0, 8000.0)
    return _chirp(t, f0=f0, f1=f1, t1=dur_s, method="linear")


def _gen_noise_burst(rng, dur_s, rate):
    # high-band so the burst stays separable from low-heavy backgrounds
    x = rng.normal(0.0, 1.0, round(dur_s * rate))
    b, a = butter(2, 3000.0 / (rate / 2), btype="high")
    y = lfilter(b, a, x)
    return 0.5 * y / max(np.std(y), 1e-9)


def _gen_am_tone(rng, dur_s, rate):
    t = np.arange(round(dur_s * rate)) / rate
    carrier = np.sin(2 * np.pi * rng.uniform(1600.0, 2800.0) * t)
    mod = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 12.0) * t)
    return mod * carrier


def _gen_click_train(rng, dur_s, rate):
    n = round(dur_s * rate)
    out = np.zeros(n)
    period = int(rate / rng.uniform(4.0, 15.0))
    click_len = int(0.004 * rate)
    t = np.arange(click_len) / rate
    click = np.exp(-t * 900.0) * np.sin(2 * np.pi * rng.uniform(2000.0, 4000.0) * t)
    for start in range(0, n - click_len, period):
        out[start:start + click_len] += click
    return out


def _gen_harmonic_stack(rng, dur_s, rate):
    t = np.arange(round(dur_s * rate)) / rate
    f0 = rng.uniform(150.0, 500.0)
    out = np.zeros_like(t)
    for h in range(1, 6):
        out += np.sin(2 * np.pi * h * f0 * t) / h
    return out / 2.0


def _gen_fm_warble(rng, dur_s, rate):
    t = np.arange(round(dur_s * rate)) / rate
    fc = rng.uniform(800.0, 3000.0)
    fm = rng.uniform(2.0, 8.0)
    dev = rng.uniform(100.0, 400.0)
    return np.sin(2 * np.pi * fc * t + (dev / fm) * np.sin(2 * np.pi * fm * t))


def _gen_filtered_noise(rng, dur_s, rate):
    x = rng.normal(0.0, 1.0, round(dur_s * rate))
    center = rng.uniform(500.0, 6000.0)
    lo, hi = center / 1.3, center * 1.3
    b, a = butter(2, [lo / (rate / 2), hi / (rate / 2)], btype="band")
    y = lfilter(b, a, x)
    return 0.8 * y / max(np.max(np.abs(y)), 1e-9)


GENERATORS = [
    _gen_tone, _gen_chirp, _gen_noise_burst, _gen_am_tone,
    _gen_click_train, _gen_harmonic_stack, _gen_fm_warble, _gen_filtered_noise,
]


def pink_noise(rng, n: int) -> np.ndarray:
    """1/f-shaped noise, unit rms."""
    white = rng.normal(size=n)
    spec = np.fft.rfft(white)
    f = np.arange(len(spec))
    f[0] = 1
    spec /= np.sqrt(f)
    out = np.fft.irfft(spec, n=n)
    return out / max(np.std(out), 1e-12)


def synthesize_clip(master_seed: int, index: int, n_classes: int, domain: str,
                    domain_gap: float, rate: int = SAMPLE_RATE,
                    clip_len_s: float = CLIP_LEN_S,
                    n_events: tuple[int, int] = (1, 3),
                    ) -> tuple[np.ndarray, list[EventAnnotation]]:
    """Render one clip and its exact annotations, deterministically from
    (master_seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence((master_seed, index)))
    n_total = round(clip_len_s * rate)
    mix = np.zeros(n_total)
    events = []
    for _ in range(int(rng.integers(n_events[0], n_events[1] + 1))):
        class_id = int(rng.integers(0, n_classes))
        dur = float(rng.uniform(0.5, 4.0))
        # 1ms headroom so rounded sample spans never overrun the canvas
        onset = float(rng.uniform(0.0, clip_len_s - dur - 0.001))
        gain = float(rng.uniform(0.25, 0.6))
        wav = GENERATORS[class_id](rng, dur, rate)
        wav = gain * wav * _envelope(len(wav), rate)
        start = round(onset * rate)
        mix[start:start + len(wav)] += wav
        events.append(EventAnnotation(class_id, onset, onset + dur))
    if domain == DOMAIN_REAL:
        g = domain_gap
        smear = 0.6 * g
        if smear > 0:
            mix = lfilter([1.0 - smear], [1.0, -smear], mix)
        mix = mix * (1.0 + g * rng.uniform(-0.4, 0.4))
        noise_amp = g * rng.uniform(0.12, 0.30)
        if noise_amp > 0:
            mix = mix + noise_amp * pink_noise(rng, n_total)
    peak = np.max(np.abs(mix))
    if peak > 0.95:
        mix *= 0.95 / peak
    events.sort(key=lambda e: (e.onset_s, e.class_id))
    return mix, events


def generate_toy_corpus(out_dir: str | Path, seed: int = 0, n_classes: int = 4,
                        counts: CorpusCounts | None = None,
                        domain_gap: float = 0.8) -> CorpusManifest:
    """Write WAVs, manifest.jsonl, and meta.json under ``out_dir``.

    Layout: synthetic strong clips, then real weak, real unlabeled, and real
    validation clips (strongly annotated). Labeled training clips run denser
    (2-3 events) than unlabeled and validation clips (1-2): curated labeled
    sets are typically event-rich, while field recordings are sparser, so a
    model fit only to the labeled sets inherits an overactive prior."""
    if n_classes < 1 or n_classes > len(GENERATORS):
        raise ConfigError(
            f"n_classes must be in [1, {len(GENERATORS)}], got {n_classes}")
    if not 0.0 <= domain_gap <= 1.0:
        raise ConfigError(f"domain_gap must be in [0, 1], got {domain_gap}")
    counts = counts or CorpusCounts()
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    groups = [
        ("strong_syn", counts.n_strong, DOMAIN_SYNTHETIC, KIND_STRONG, (2, 3)),
        ("weak", counts.n_weak, DOMAIN_REAL, KIND_WEAK, (2, 3)),
        ("unlab", counts.n_unlabeled, DOMAIN_REAL, KIND_UNLABELED, (1, 2)),
        ("val", counts.n_validation, DOMAIN_REAL, KIND_STRONG, (1, 2)),
    ]
    clips = []
    index = 0
    for prefix, n, domain, kind, n_events in groups:
        for j in range(n):
            samples, events = synthesize_clip(seed, index, n_classes, domain,
                                              domain_gap, n_events=n_events)
            clip_id = f"{prefix}_{j:04d}"
            rel = f"audio/{clip_id}.wav"
            write_wav_pcm16(out / rel, samples, SAMPLE_RATE)
            weak = tuple(sorted({e.class_id for e in events}))
            clips.append(LabeledClip(
                id=clip_id, wav=rel, domain=domain, kind=kind,
                events=events if kind == KIND_STRONG else [],
                weak=weak if kind == KIND_WEAK else ()))
            index += 1
    class_names = EVENT_CLASS_NAMES[:n_classes]
    meta = {"class_names": class_names, "seed": seed, "domain_gap": domain_gap,
            "sample_rate": SAMPLE_RATE, "clip_len_s": CLIP_LEN_S,
            "counts": {"n_strong": counts.n_strong, "n_weak": counts.n_weak,
                       "n_unlabeled": counts.n_unlabeled,
                       "n_validation": counts.n_validation}}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(out / "manifest.jsonl", "w") as fh:
        for clip in clips:
            fh.write(json.dumps({
                "id": clip.id, "wav": clip.wav, "domain": clip.domain,
                "kind": clip.kind,
                "events": [{"class": e.class_id, "onset": e.onset_s,
                            "offset": e.offset_s} for e in clip.events],
                "weak": list(clip.weak)}) + "\n")
    return CorpusManifest(clips, class_names, out, meta)


def _parse_clip(record: dict, line: int) -> LabeledClip:
    try:
        events = [EventAnnotation(int(e["class"]), float(e["onset"]),
                                  float(e["offset"]))
                  for e in record.get("events", [])]
        clip = LabeledClip(
            id=str(record["id"]), wav=str(record["wav"]),
            domain=str(record["domain"]), kind=str(record["kind"]),
            events=events,
            weak=tuple(sorted(int(c) for c in record.get("weak", []))))
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise ManifestError(f"bad clip record: {exc}", line) from exc
    if clip.domain not in DOMAINS:
        raise ManifestError(f"unknown domain {clip.domain!r}", line)
    if clip.kind not in KINDS:
        raise ManifestError(f"unknown kind {clip.kind!r}", line)
    for e in clip.events:
        if e.offset_s > CLIP_LEN_S + 1e-9:
            raise ManifestError(f"event past clip end: {e}", line)
    return clip


def load_manifest(path: str | Path) -> CorpusManifest:
    """Read manifest.jsonl (``path`` may be the file or its directory)."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise ManifestError(f"no manifest at {p}", 0)
    clips = []
    seen = set()
    with open(p) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc}", line_no) from exc
            clip = _parse_clip(record, line_no)
            if clip.id in seen:
                raise ManifestError(f"duplicate clip id {clip.id!r}", line_no)
            seen.add(clip.id)
            clips.append(clip)
    root = p.parent
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if "class_names" in meta:
        class_names = list(meta["class_names"])
    else:
        k = 1 + max((max((e.class_id for e in c.events), default=0) for c in clips),
                    default=0)
        k = max(k, 1 + max((max(c.weak, default=0) for c in clips), default=0))
        class_names = EVENT_CLASS_NAMES[:k]
    return CorpusManifest(clips, class_names, root, meta)


def _cache_name(clip: LabeledClip, cfg: FrontendConfig) -> str:
    # keyed by front-end config so one cache dir can serve several configs
    tag = zlib.crc32(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    return f"{clip.id}.{tag:08x}.lmsp"


def clip_spectrogram(manifest: CorpusManifest, clip: LabeledClip,
                     cfg: FrontendConfig,
                     cache_dir: str | Path | None = None) -> LogMelSpectrogram:
    """Log-mel features for one clip, using the on-disk cache when given."""
    if cache_dir is not None:
        cache = Path(cache_dir) / _cache_name(clip, cfg)
        if cache.exists():
            return load_spectrogram(cache, cfg.frame_hop_s)
    spec = log_mel(read_wav(manifest.root / clip.wav), cfg)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_spectrogram(Path(cache_dir) / _cache_name(clip, cfg), spec)
    return spec


def iterate_split(manifest: CorpusManifest, split_name: str,
                  cfg: FrontendConfig, cache_dir: str | Path | None = None):
    """Deterministically ordered stream of (clip, spectrogram) pairs."""
    for clip in manifest.split(split_name):
        yield clip, clip_spectrogram(manifest, clip, cfg, cache_dir)
