"""LFCC front-end, frequency masking, length fixing, protocol ingestion and synthetic data."""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.fft
import scipy.signal

from .network import BONAFIDE, SPOOF

KEYS = {"bonafide": BONAFIDE, "spoof": SPOOF}


@dataclass(frozen=True)
class AudioUtterance:
    samples: np.ndarray
    sample_rate: int
    utterance_id: str

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"{self.utterance_id}: sample rate must be positive")
        if len(self.samples) == 0:
            raise ValueError(f"{self.utterance_id}: empty audio")


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    win_ms: float = 64.0
    shift_ms: float = 16.0
    n_fft: int = 1024
    n_ceps: int = 20
    n_filters: int = 70
    delta_window: int = 2
    log_floor: float = 1e-30

    @property
    def win_length(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.shift_ms * self.sample_rate / 1000))

    @property
    def n_rows(self) -> int:
        return 3 * self.n_ceps

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def linear_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters with linearly spaced centres between 0 and Nyquist.

    Returns the (n_filters, n_fft // 2 + 1) weight matrix and the centre
    frequencies in Hz.
    """
    edges = np.linspace(0.0, sample_rate / 2, n_filters + 2)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    return weights, edges[1:-1]


def frame_signal(samples: np.ndarray, win_length: int, hop_length: int) -> np.ndarray:
    n = len(samples)
    if n < win_length:
        raise ValueError(f"signal of {n} samples is shorter than one {win_length}-sample window")
    n_frames = (n - win_length) // hop_length + 1
    idx = np.arange(win_length)[None, :] + hop_length * np.arange(n_frames)[:, None]
    return np.asarray(samples, dtype=np.float64)[idx]


def power_spectrum(u: AudioUtterance, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """(T, n_fft // 2 + 1) power spectrum of Hamming-windowed frames."""
    frames = frame_signal(u.samples, cfg.win_length, cfg.hop_length) * np.hamming(cfg.win_length)
    return np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2


def filterbank_energies(u: AudioUtterance, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    weights, _ = linear_filterbank(cfg.n_filters, cfg.n_fft, u.sample_rate)
    return power_spectrum(u, cfg) @ weights.T


def deltas(feat: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas along the frame axis (rows = coefficients), edge frames replicated."""
    n_frames = feat.shape[1]
    padded = np.pad(feat, ((0, 0), (window, window)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(feat, dtype=np.float64)
    for n in range(1, window + 1):
        out += n * (padded[:, window + n : window + n + n_frames] - padded[:, window - n : window - n + n_frames])
    return out / denom


def lfcc_extract(u: AudioUtterance, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Static, delta and delta-delta LFCCs as a (3 * n_ceps, T) matrix."""
    if u.sample_rate != cfg.sample_rate:
        raise ValueError(f"{u.utterance_id}: sample rate {u.sample_rate} != front-end rate {cfg.sample_rate}")
    energies = filterbank_energies(u, cfg)
    log_e = np.log(np.maximum(energies, cfg.log_floor))
    static = scipy.fft.dct(log_e, type=2, norm="ortho", axis=1)[:, : cfg.n_ceps].T
    d1 = deltas(static, cfg.delta_window)
    d2 = deltas(d1, cfg.delta_window)
    return np.concatenate([static, d1, d2], axis=0)


# ---------------------------------------------------------------------------
# augmentation and batching helpers
# ---------------------------------------------------------------------------


def draw_freq_mask(rng: np.random.Generator, max_channels: int, n_channels: int) -> tuple[int, int]:
    """Band width f ~ U{0..max_channels} and start f0 ~ U{0..n_channels - f}."""
    width = int(rng.integers(0, max_channels + 1))
    start = int(rng.integers(0, n_channels - width + 1))
    return width, start


def _filterbank_mask_operator(n_ceps: int, n_filters: int, start: int, width: int) -> np.ndarray:
    basis = scipy.fft.idct(np.eye(n_filters)[:, :n_ceps], type=2, norm="ortho", axis=0)  # (n_filters, n_ceps)
    keep = np.ones(n_filters)
    keep[start : start + width] = 0.0
    return basis.T @ (keep[:, None] * basis)


def freq_mask(
    f: np.ndarray,
    max_channels: int = 12,
    rng: Optional[np.random.Generator] = None,
    domain: str = "cepstral",
    n_filters: int = 70,
    draw: Optional[tuple[int, int]] = None,
) -> np.ndarray:
    """Mask one random contiguous frequency band.

    ``f`` is a (rows, T) matrix or a (batch, rows, T) stack; a single draw
    is shared by the whole stack. Rows are split into three equal blocks
    (static, delta, delta-delta). In the cepstral domain the same band of
    rows is zeroed in every block; in the filterbank domain the band is
    zeroed in the smoothed log filterbank spectrum implied by each block.
    """
    if domain not in ("cepstral", "filterbank"):
        raise ValueError(f"domain must be 'cepstral' or 'filterbank', got {domain!r}")
    rows = f.shape[-2]
    if rows % 3:
        raise ValueError(f"expected static+delta+delta-delta rows, got {rows}")
    n_ceps = rows // 3
    span = n_ceps if domain == "cepstral" else n_filters
    if draw is None:
        if rng is None:
            raise ValueError("freq_mask needs a generator or an explicit draw")
        draw = draw_freq_mask(rng, max_channels, span)
    width, start = draw
    if width == 0:
        return f.copy()
    out = f.copy()
    if domain == "cepstral":
        for block in range(3):
            lo = block * n_ceps + start
            out[..., lo : lo + width, :] = 0.0
        return out
    op = _filterbank_mask_operator(n_ceps, n_filters, start, width).astype(f.dtype)
    for block in range(3):
        sl = slice(block * n_ceps, (block + 1) * n_ceps)
        out[..., sl, :] = np.einsum("ij,...jt->...it", op, f[..., sl, :])
    return out


def fix_length(f: np.ndarray, target_T: int = 400, train: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Crop (random in training, centred otherwise) or cyclically repeat to ``target_T`` frames."""
    n = f.shape[1]
    if n < 1:
        raise ValueError("cannot fix the length of an empty feature matrix")
    if n < target_T:
        reps = -(-target_T // n)
        f = np.tile(f, (1, reps))
        n = f.shape[1]
    if n == target_T:
        return f.copy()
    if train:
        if rng is None:
            raise ValueError("random cropping needs a generator")
        start = int(rng.integers(0, n - target_T + 1))
    else:
        start = (n - target_T) // 2
    return f[:, start : start + target_T].copy()


# ---------------------------------------------------------------------------
# protocol files and audio
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolEntry:
    speaker_id: str
    utterance_id: str
    system_id: str
    key: str

    @property
    def label(self) -> int:
        return KEYS[self.key]


class ProtocolError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def parse_protocol_line(line: str, lineno: int = 1) -> ProtocolEntry:
    fields = line.split()
    if len(fields) != 5:
        raise ProtocolError(f"expected 5 whitespace-separated fields, found {len(fields)}", lineno)
    speaker, utt, _, system, key = fields
    if key not in KEYS:
        raise ProtocolError(f"key must be 'bonafide' or 'spoof', got {key!r}", lineno)
    return ProtocolEntry(speaker, utt, system, key)


def load_protocol(path) -> list[ProtocolEntry]:
    """Parse an ASVspoof-style CM protocol (speaker utt - system key), keeping file order."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entries.append(parse_protocol_line(line, lineno))
    return entries


def write_protocol(path, entries: Iterable[ProtocolEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.speaker_id} {e.utterance_id} - {e.system_id} {e.key}\n")


AUDIO_EXTENSIONS = (".flac", ".wav")


def read_audio(path) -> AudioUtterance:
    """Read 16-bit PCM or 32-bit float WAV/FLAC as float64 samples in [-1, 1]."""
    import soundfile as sf

    samples, rate = sf.read(str(path), dtype="float64", always_2d=False)
    if samples.ndim > 1:
        samples = samples.mean(axis=1)
    return AudioUtterance(samples, int(rate), Path(path).stem)


def find_audio(audio_dir, utterance_id: str) -> Path:
    for ext in AUDIO_EXTENSIONS:
        p = Path(audio_dir) / f"{utterance_id}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no audio file for {utterance_id} under {audio_dir}")


class FeatureCache:
    """One .npy file per (utterance id, front-end configuration digest)."""

    def __init__(self, directory, cfg: FrontendConfig = FrontendConfig()):
        self.directory = Path(directory)
        self.cfg = cfg
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, utterance_id: str) -> Path:
        return self.directory / f"{utterance_id}.{self.cfg.digest()}.npy"

    def get(self, utterance_id: str) -> Optional[np.ndarray]:
        p = self.path(utterance_id)
        return np.load(p) if p.exists() else None

    def put(self, utterance_id: str, feat: np.ndarray) -> None:
        p = self.path(utterance_id)
        tmp = p.with_suffix(".tmp.npy")
        np.save(tmp, feat.astype(np.float32))
        os.replace(tmp, p)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class FeatureSet:
    """Variable-length feature matrices with labels (1 = bona fide, 0 = spoof)."""

    features: list
    labels: np.ndarray
    utterance_ids: list
    system_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.system_ids:
            self.system_ids = ["-"] * len(self.features)
        if not (len(self.features) == len(self.labels) == len(self.utterance_ids) == len(self.system_ids)):
            raise ValueError("features, labels, ids and system ids must have equal length")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx: Sequence[int]) -> "FeatureSet":
        idx = list(idx)
        return FeatureSet(
            [self.features[i] for i in idx],
            self.labels[idx],
            [self.utterance_ids[i] for i in idx],
            [self.system_ids[i] for i in idx],
        )

    def batch(
        self,
        idx: Sequence[int],
        target_T: int,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        mask_max: int = 0,
        mask_domain: str = "cepstral",
        n_filters: int = 70,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Stack to (B, 1, rows, target_T) float32; training batches are randomly cropped and masked."""
        mats = np.stack([fix_length(self.features[i], target_T, train, rng) for i in idx])
        if train and mask_max > 0:
            mats = freq_mask(mats, mask_max, rng, mask_domain, n_filters)
        return mats[:, None].astype(np.float32), self.labels[list(idx)]

    def all_fixed(self, target_T: int) -> np.ndarray:
        return self.batch(range(len(self)), target_T)[0]


def features_from_utterances(
    utterances: Sequence[AudioUtterance],
    labels: Sequence[int],
    system_ids: Sequence[str],
    cfg: FrontendConfig = FrontendConfig(),
    cache: Optional[FeatureCache] = None,
) -> FeatureSet:
    feats = []
    for u in utterances:
        f = cache.get(u.utterance_id) if cache is not None else None
        if f is None:
            f = lfcc_extract(u, cfg).astype(np.float32)
            if cache is not None:
                cache.put(u.utterance_id, f)
        feats.append(f)
    return FeatureSet(feats, np.asarray(labels), [u.utterance_id for u in utterances], list(system_ids))


def features_from_protocol(
    protocol_path,
    audio_dir,
    cfg: FrontendConfig = FrontendConfig(),
    cache: Optional[FeatureCache] = None,
) -> FeatureSet:
    entries = load_protocol(protocol_path)
    feats = []
    for e in entries:
        f = cache.get(e.utterance_id) if cache is not None else None
        if f is None:
            f = lfcc_extract(read_audio(find_audio(audio_dir, e.utterance_id)), cfg).astype(np.float32)
            if cache is not None:
                cache.put(e.utterance_id, f)
        feats.append(f)
    return FeatureSet(feats, [e.label for e in entries], [e.utterance_id for e in entries], [e.system_id for e in entries])


# ---------------------------------------------------------------------------
# synthetic desk-scale corpus
# ---------------------------------------------------------------------------

SYNTH_SYSTEMS = ("A01", "A02", "A03")
_NOTCH_BANDS = {"A01": (2500.0, 3500.0), "A02": (3500.0, 4500.0), "A03": (4500.0, 5500.0)}


@dataclass(frozen=True)
class LabeledUtterance:
    utterance: AudioUtterance
    key: str
    system_id: str
    speaker_id: str

    @property
    def label(self) -> int:
        return KEYS[self.key]


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    pink = np.fft.irfft(spec / np.sqrt(f), n)
    return pink / (np.std(pink) + 1e-12)


def _synth_one(rng: np.random.Generator, spoof: bool, system: str, strength: float, sr: int, duration: float) -> np.ndarray:
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    # harmonic source with slow vibrato and per-sample jitter
    f0 = rng.uniform(90.0, 250.0)
    vib_rate, vib_depth = rng.uniform(3.0, 6.0), rng.uniform(0.01, 0.03)
    jitter = np.cumsum(rng.standard_normal(n)) * 0.02 / np.sqrt(n)
    f0_track = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)) + jitter)
    n_harm = int(min(30, (0.45 * sr) // f0))
    amps = rng.uniform(0.8, 1.2, n_harm) / np.arange(1, n_harm + 1)
    phases0 = rng.uniform(0, 2 * np.pi, n_harm)
    # artifact parameters are always drawn so both classes consume the same random stream
    period = int(rng.integers(int(0.010 * sr), int(0.025 * sr)))
    jump_signs = rng.choice([-1.0, 1.0], size=n // period + 1)
    lo, hi = _NOTCH_BANDS.get(system, (2500.0, 5500.0))
    notch_freq = rng.uniform(lo, hi)
    snr_db = rng.uniform(15.0, 30.0)
    noise = _pink_noise(n, rng)
    gain = rng.uniform(0.3, 1.0)

    base_phase = 2 * np.pi * np.cumsum(f0_track) / sr
    if spoof and strength > 0:
        base_phase = base_phase + strength * np.pi * np.cumsum(jump_signs)[np.arange(n) // period]
    k = np.arange(1, n_harm + 1)[:, None]
    voiced = (amps[:, None] * np.sin(k * base_phase[None, :] + phases0[:, None])).sum(axis=0)
    envelope = 0.6 + 0.4 * np.sin(np.pi * t / duration)
    x = voiced * envelope
    x = x / (np.std(x) + 1e-12)
    x = x + noise * 10 ** (-snr_db / 20)
    if spoof and strength > 0:
        b, a = scipy.signal.iirpeak(notch_freq, Q=1.0, fs=sr)
        x = x - strength * scipy.signal.lfilter(b, a, x)
    x = gain * x / (np.max(np.abs(x)) + 1e-12)
    return x


def synth_dataset(
    n_per_class: int,
    artifact_strength: float,
    rng: np.random.Generator,
    sample_rate: int = 16000,
    duration: float = 1.0,
    prefix: str = "SYN",
) -> list[LabeledUtterance]:
    """Bona fide harmonic tones plus pink noise; spoofs add phase jumps and a spectral notch.

    At ``artifact_strength=0`` both classes are drawn from the same distribution.
    Utterances alternate bona fide / spoof; each has its own child generator.
    """
    if not 0.0 <= artifact_strength <= 1.0:
        raise ValueError(f"artifact_strength must lie in [0, 1], got {artifact_strength}")
    seeds = rng.bit_generator.seed_seq.spawn(2 * n_per_class) if hasattr(rng.bit_generator, "seed_seq") else None
    if seeds is None:  # pragma: no cover - exotic bit generators
        seeds = [np.random.SeedSequence(int(s)) for s in rng.integers(0, 2**63, 2 * n_per_class)]
    out = []
    for i in range(2 * n_per_class):
        spoof = i % 2 == 1
        child = np.random.default_rng(seeds[i])
        attack = SYNTH_SYSTEMS[(i // 2) % len(SYNTH_SYSTEMS)]
        audio = _synth_one(child, spoof, attack, artifact_strength, sample_rate, duration)
        uid = f"{prefix}_{i:06d}"
        out.append(
            LabeledUtterance(
                AudioUtterance(audio, sample_rate, uid),
                "spoof" if spoof else "bonafide",
                attack if spoof else "-",
                f"{prefix}_SPK{(i // 2) % 20:03d}",
            )
        )
    return out


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent generator derived from one global seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),)))


def save_feature_set(path, fs: FeatureSet, cfg: Optional[FrontendConfig] = None) -> None:
    """One .npz: concatenated frames, per-utterance lengths, labels and ids."""
    lengths = np.array([f.shape[1] for f in fs.features], dtype=np.int64)
    values = np.concatenate(fs.features, axis=1) if fs.features else np.zeros((0, 0), np.float32)
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            values=values.astype(np.float32),
            lengths=lengths,
            labels=fs.labels,
            utterance_ids=np.array(fs.utterance_ids, dtype=str),
            system_ids=np.array(fs.system_ids, dtype=str),
            frontend=np.array(json.dumps(asdict(cfg) if cfg else {})),
        )
    os.replace(tmp, path)


def load_feature_set(path) -> FeatureSet:
    with np.load(path, allow_pickle=False) as z:
        bounds = np.concatenate([[0], np.cumsum(z["lengths"])])
        values = z["values"]
        feats = [values[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        return FeatureSet(feats, z["labels"], [str(u) for u in z["utterance_ids"]], [str(s) for s in z["system_ids"]])


def synth_feature_set(n_per_class: int, strength: float, rng: np.random.Generator, cfg: FrontendConfig = FrontendConfig(), prefix: str = "SYN") -> FeatureSet:
    utts = synth_dataset(n_per_class, strength, rng, cfg.sample_rate, prefix=prefix)
    return features_from_utterances([u.utterance for u in utts], [u.label for u in utts], [u.system_id for u in utts], cfg)
