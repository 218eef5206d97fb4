"""Audio ingestion, manifests, chunk framing, a synthetic speaker corpus and
synthetic reverberation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import DegenerateError, FormatError, ManifestError, TooShortError

SAMPLE_RATE = 16000
SPLITS = ("train", "enroll", "test")
UNLABELED = "-"  # speaker column value for utterances without a label


@dataclass
class Utterance:
    utterance_id: str
    speaker_label: str
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)


@dataclass
class Chunk:
    samples: np.ndarray
    source_utterance: str
    offset: int


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_label: str
    path: Path
    split: str


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name):
        return Manifest([e for e in self.entries if e.split == name])

    def speakers(self):
        return sorted({e.speaker_label for e in self.entries if e.speaker_label != UNLABELED})

    def is_labeled(self):
        return all(e.speaker_label != UNLABELED for e in self.entries)

    def load(self):
        """Read every entry's audio; returns a list of :class:`Utterance`."""
        out = []
        for e in self.entries:
            samples, sr = read_wav(e.path)
            out.append(Utterance(e.utterance_id, e.speaker_label, samples, sr))
        return out

    def write(self, path):
        path = Path(path)
        base = path.parent.resolve()
        lines = ["# utterance_id\tspeaker_label\tpath\tsplit"]
        for e in self.entries:
            p = Path(e.path).resolve()
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            lines.append(f"{e.utterance_id}\t{e.speaker_label}\t{p.as_posix()}\t{e.split}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------
def read_wav(path):
    """Read a mono 16-bit PCM RIFF/WAVE file.

    Returns ``(samples, sample_rate)`` with samples scaled by 1/32768.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos : pos + 4], struct.unpack("<I", raw[pos + 4 : pos + 8])[0]
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: truncated chunk {cid.decode(errors='replace')!r} (size={size}, have {len(body)})")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too short (size={size})")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format != 1:
        raise FormatError(f"{path}: audio_format={audio_format} (only PCM=1 supported)")
    if channels != 1:
        raise FormatError(f"{path}: channels={channels} (only mono supported)")
    if bits != 16:
        raise FormatError(f"{path}: bits_per_sample={bits} (only 16 supported)")
    if len(data) % 2:
        raise FormatError(f"{path}: data size={len(data)} is not a whole number of samples")
    ints = np.frombuffer(data, dtype="<i2")
    return ints.astype(np.float32) / np.float32(32768), int(rate)


def to_pcm16(samples):
    return np.clip(np.round(np.asarray(samples, np.float64) * 32768), -32768, 32767).astype("<i2")


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    """Write mono 16-bit PCM; float input in [-1, 1) is scaled by 32768."""
    pcm = to_pcm16(samples).tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    Path(path).write_bytes(header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------
def load_manifest(path, check_paths=True):
    """Parse ``utterance_id<TAB>speaker<TAB>path<TAB>split`` lines.

    Relative paths resolve against the manifest's directory.  ``#`` lines
    and blank lines are skipped.
    """
    path = Path(path)
    base = path.parent
    entries, seen = [], {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        uid, spk, wav, split = (f.strip() for f in fields)
        if not uid or not spk or not wav:
            raise ManifestError(f"{path}:{lineno}: empty field")
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if uid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utterance_id {uid!r} (first at line {seen[uid]})")
        seen[uid] = lineno
        wav_path = Path(wav) if Path(wav).is_absolute() else base / wav
        if check_paths and not wav_path.is_file():
            raise ManifestError(f"{path}:{lineno}: audio file not found: {wav_path}")
        entries.append(ManifestEntry(uid, spk, wav_path, split))
    return Manifest(entries)


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------
def chunk_length(chunk_ms=200, sample_rate=SAMPLE_RATE):
    return int(round(chunk_ms * sample_rate / 1000))


def frame_offsets(n_samples, chunk_ms=200, overlap_ms=10, sample_rate=SAMPLE_RATE):
    size = chunk_length(chunk_ms, sample_rate)
    hop = size - chunk_length(overlap_ms, sample_rate)
    if hop <= 0:
        raise ValueError(f"overlap {overlap_ms} ms leaves no hop for {chunk_ms} ms chunks")
    if n_samples < size:
        raise TooShortError(f"utterance of {n_samples} samples is shorter than one chunk ({size})")
    count = (n_samples - size) // hop + 1
    return [i * hop for i in range(count)], size


def frame_chunks(utterance, chunk_ms=200, overlap_ms=10):
    """Cut consecutive chunks of ``chunk_ms`` overlapping by ``overlap_ms``.

    The trailing remainder shorter than one chunk is dropped.
    """
    offsets, size = frame_offsets(len(utterance.samples), chunk_ms, overlap_ms, utterance.sample_rate)
    return [Chunk(utterance.samples[o : o + size], utterance.utterance_id, o) for o in offsets]


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SpeakerProfile:
    f0: float
    formants: tuple
    bandwidths: tuple
    tilt: float
    breathiness: float


def draw_speaker(rng):
    f0 = float(np.exp(rng.uniform(np.log(80), np.log(300))))
    formants = (rng.uniform(300, 900), rng.uniform(1000, 2400), rng.uniform(2500, 3800))
    bandwidths = tuple(rng.uniform(60, 160, 3))
    return SpeakerProfile(
        f0=f0,
        formants=tuple(float(f) for f in formants),
        bandwidths=tuple(float(b) for b in bandwidths),
        tilt=float(rng.uniform(0.5, 0.95)),
        breathiness=float(rng.uniform(0.02, 0.3)),
    )


def _resonate(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    a = [1.0, -2 * r * np.cos(2 * np.pi * freq / sr), r * r]
    return signal.lfilter([1 - r], a, x)


def synth_utterance(profile, n_samples, rng, sr=SAMPLE_RATE):
    """Harmonic excitation on a wandering f0 plus shaped noise, through the
    speaker's resonators, peak-normalised to 0.7."""
    t = np.arange(n_samples) / sr
    # slow f0 contour, bounded to +-10 % of the speaker's f0
    phases = rng.uniform(0, 2 * np.pi, 3)
    rates = rng.uniform(0.3, 2.5, 3)
    wander = sum(np.sin(2 * np.pi * r * t + p) for r, p in zip(rates, phases)) / 3
    f0 = profile.f0 * (1 + 0.1 * wander)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(7000 // (profile.f0 * 1.1))
    k = np.arange(1, n_harm + 1)[:, None]
    excitation = (np.sin(k * phase[None, :]) / k).sum(axis=0)
    noise = rng.standard_normal(n_samples) * profile.breathiness * np.std(excitation)
    source = signal.lfilter([1.0], [1.0, -profile.tilt], excitation + noise)
    # syllable-rate amplitude envelope
    env_rate = rng.uniform(3, 6)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * env_rate * t + rng.uniform(0, 2 * np.pi))
    y = source * env
    for freq, bw in zip(profile.formants, profile.bandwidths):
        y = _resonate(y, freq, bw, sr)
    y = signal.lfilter([1.0, -1.0], [1.0, -0.95], y)  # remove DC
    return 0.7 * y / np.max(np.abs(y))


def split_plan(utts_per_speaker, ratio=(6, 1, 1)):
    """Per-speaker split labels; fewer than 3 utterances stay all-train."""
    if utts_per_speaker < 3:
        return ["train"] * utts_per_speaker
    total = sum(ratio)
    n_enroll = max(1, int(round(utts_per_speaker * ratio[1] / total)))
    n_test = max(1, int(round(utts_per_speaker * ratio[2] / total)))
    n_train = utts_per_speaker - n_enroll - n_test
    if n_train < 1:
        n_train, n_enroll, n_test = utts_per_speaker - 2, 1, 1
    return ["train"] * n_train + ["enroll"] * n_enroll + ["test"] * n_test


def synth_corpus(n_speakers, utts_per_speaker, utt_seconds, seed, out_dir, ratio=(6, 1, 1), reverb_t60=None):
    """Generate a deterministic synthetic multi-speaker corpus on disk.

    Writes one WAV per utterance plus ``manifest.tsv`` into ``out_dir`` and
    returns the :class:`Manifest`.  With ``reverb_t60`` every utterance is
    convolved with its own synthetic room impulse response.
    """
    if min(n_speakers, utts_per_speaker) < 1 or utt_seconds <= 0:
        raise ValueError("speaker count, utterance count and duration must be positive")
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    root = np.random.SeedSequence(seed)
    spk_seq, utt_seq, rir_seq = root.spawn(3)
    spk_rng = np.random.default_rng(spk_seq)
    profiles = [draw_speaker(spk_rng) for _ in range(n_speakers)]
    n_samples = int(round(utt_seconds * SAMPLE_RATE))
    plan = split_plan(utts_per_speaker, ratio)
    utt_seeds = utt_seq.spawn(n_speakers * utts_per_speaker)
    rir_seeds = rir_seq.generate_state(n_speakers * utts_per_speaker)
    entries = []
    for s, prof in enumerate(profiles):
        spk = f"spk{s:03d}"
        for u in range(utts_per_speaker):
            n = s * utts_per_speaker + u
            y = synth_utterance(prof, n_samples, np.random.default_rng(utt_seeds[n]))
            uid = f"{spk}_u{u:02d}"
            if reverb_t60:
                rir = make_rir(reverb_t60, min(2 * reverb_t60, 1.0), int(rir_seeds[n]))
                y = apply_reverb(Utterance(uid, spk, y), rir).samples
            path = out / "wav" / f"{uid}.wav"
            try:
                write_wav(path, y)
            except OSError as exc:
                raise OSError(f"cannot write {path}: {exc}") from exc
            entries.append(ManifestEntry(uid, spk, path, plan[u]))
    manifest = Manifest(entries)
    manifest.write(out / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# Reverberation
# ---------------------------------------------------------------------------
def make_rir(t60_seconds, length_seconds, seed, sample_rate=SAMPLE_RATE):
    """Exponentially decaying white noise with a unit leading tap.

    The energy envelope is ``exp(-6 ln(10) t / T60)``: 60 dB down at T60.
    """
    if not t60_seconds > 0:
        raise ValueError(f"t60 must be positive, got {t60_seconds}")
    n = max(1, int(round(length_seconds * sample_rate)))
    t = np.arange(n) / sample_rate
    energy_env = np.exp(-6 * np.log(10) * t / t60_seconds)
    rir = np.random.default_rng(seed).standard_normal(n) * np.sqrt(energy_env)
    rir[0] = 1.0
    return rir


def apply_reverb(utterance, rir, normalize=True):
    """Convolve with ``rir``, truncate to the input length, restore the input peak."""
    rir = np.asarray(rir, dtype=np.float64)
    if rir.size == 0 or not np.all(np.isfinite(rir)):
        raise DegenerateError("impulse response must be non-empty and finite")
    if not np.any(rir):
        raise DegenerateError("impulse response is all zeros")
    x = np.asarray(utterance.samples, dtype=np.float64)
    if rir.size < 64:
        y = np.convolve(x, rir)[: len(x)]
    else:
        y = signal.fftconvolve(x, rir, mode="full")[: len(x)]
    if normalize:
        peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
        if peak_out > 0:
            y = y * (peak_in / peak_out)
    return Utterance(utterance.utterance_id, utterance.speaker_label, y.astype(np.float32), utterance.sample_rate)
