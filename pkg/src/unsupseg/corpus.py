"""Audio and annotation I/O, manifests, training crops, and a synthetic corpus.

File formats
------------
WAV
    RIFF, PCM 16-bit, mono, 16 kHz only.  Anything else is rejected.
Annotation (``.phn``)
    One segment per line: ``start_sample end_sample label``, whitespace
    separated, contiguous segments in time order (TIMIT convention).
Manifest
    UTF-8 text, one utterance per line: ``audio_path`` optionally followed by
    a tab and ``annotation_path``.  Relative paths resolve against the
    manifest's directory.  Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import logging
import wave
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AnnotationParseError, DataError, SampleRateError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
MIN_CROP_SAMPLES = 465 + 160

# Band centres (Hz) for synthetic segments; neighbours are >= 1 octave apart.
SYNTH_BANDS = (300.0, 650.0, 1400.0, 3000.0, 6000.0)
SYNTH_BAND_RATIO = 1.25
SYNTH_RMS = 0.1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be mono 1-D, got shape {self.samples.shape}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def load_wav(path, expected_rate=SAMPLE_RATE):
    """Decode a PCM16 mono WAV; samples are scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            frames = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a PCM WAV file ({exc})") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if width != 2:
        raise DataError(f"{path}: {8 * width}-bit samples, only PCM16 is supported")
    if channels != 1:
        raise DataError(f"{path}: {channels} channels, only mono is supported")
    if rate != expected_rate:
        raise SampleRateError(rate, expected_rate, path)
    pcm = np.frombuffer(frames, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0, rate)


def to_pcm16(samples):
    return np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0),
                   -32768, 32767).astype("<i2")


def save_wav(path, waveform):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(waveform.sample_rate)
        f.writeframes(to_pcm16(waveform.samples).tobytes())


@dataclass
class Annotation:
    segments: list  # (start_sample, end_sample, label)
    sample_rate: int = SAMPLE_RATE

    def boundaries(self, include_edges=False):
        """Gold boundary times in seconds.

        By default only the junctions between consecutive segments; with
        ``include_edges`` the first start and last end are added too.
        """
        if not self.segments:
            return []
        samples = [end for _, end, _ in self.segments[:-1]]
        if include_edges:
            samples = [self.segments[0][0]] + samples + [self.segments[-1][1]]
        return [s / self.sample_rate for s in samples]

    def to_text(self):
        return "".join(f"{s} {e} {label}\n" for s, e, label in self.segments)


def parse_annotation(path, sample_rate=SAMPLE_RATE):
    """Parse a 3-column ``.phn`` file, checking contiguity line by line."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read annotation {path}: {exc}") from exc
    return parse_annotation_text(text, sample_rate, path)


def parse_annotation_text(text, sample_rate=SAMPLE_RATE, path=None):
    segments = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise AnnotationParseError(f"expected 3 columns, got {len(parts)}", lineno, path)
        try:
            start, end = int(parts[0]), int(parts[1])
        except ValueError:
            raise AnnotationParseError("start/end must be integer sample indices",
                                       lineno, path) from None
        if start < 0 or end <= start:
            raise AnnotationParseError(f"bad segment [{start}, {end})", lineno, path)
        if segments and start != segments[-1][1]:
            kind = "gap" if start > segments[-1][1] else "overlap"
            raise AnnotationParseError(f"{kind}: segment starts at {start} but previous "
                                       f"ends at {segments[-1][1]}", lineno, path)
        segments.append((start, end, parts[2]))
    return Annotation(segments, sample_rate)


@dataclass
class ManifestRecord:
    audio: Path
    annotation: Path | None = None

    @property
    def key(self):
        return str(self.audio)


@dataclass
class Manifest:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def require_annotations(self):
        missing = [r.key for r in self.records if r.annotation is None]
        if missing:
            raise DataError(f"{len(missing)} manifest entries lack annotations, "
                            f"e.g. {missing[0]}")


def read_manifest(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) > 2:
            raise DataError(f"{path}:{lineno}: expected 1 or 2 tab-separated fields")
        audio = base / parts[0]
        ann = base / parts[1] if len(parts) == 2 and parts[1] else None
        records.append(ManifestRecord(audio, ann))
    return Manifest(records)


def write_manifest(path, records):
    path = Path(path)
    lines = []
    for r in records:
        audio = _relative(r.audio, path.parent)
        if r.annotation is not None:
            lines.append(f"{audio}\t{_relative(r.annotation, path.parent)}")
        else:
            lines.append(audio)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _relative(p, base):
    try:
        return Path(p).resolve().relative_to(Path(base).resolve()).as_posix()
    except ValueError:
        return str(Path(p).resolve())


def make_crops(waveform, crop_seconds, rng, min_samples=MIN_CROP_SAMPLES):
    """Random fixed-length training crops of one utterance.

    An utterance of ``n`` crop lengths yields ``n`` crops with independent
    uniform start offsets.  One shorter than a crop is returned whole if it
    has at least ``min_samples`` samples, otherwise nothing is returned.
    """
    crop = int(round(crop_seconds * waveform.sample_rate))
    if crop < min_samples:
        raise DataError(f"crop of {crop} samples is below the {min_samples}-sample minimum")
    total = len(waveform)
    if total < crop:
        if total < min_samples:
            log.debug("skipping %d-sample utterance (< %d)", total, min_samples)
            return []
        return [waveform]
    starts = rng.integers(0, total - crop, size=total // crop, endpoint=True)
    return [Waveform(waveform.samples[s:s + crop], waveform.sample_rate) for s in starts]


def stream_rng(seed, name, *extra):
    """Independent generator for a named purpose, stable across runs."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]))


def band_noise(n, centre, rng, ratio=SYNTH_BAND_RATIO, sample_rate=SAMPLE_RATE):
    """White noise restricted to ``[centre/ratio, centre*ratio]`` Hz, unit RMS."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spectrum[(freqs < centre / ratio) | (freqs > centre * ratio)] = 0
    x = np.fft.irfft(spectrum, n)
    return x / np.sqrt(np.mean(x * x))


def synth_utterance(rng, segment_ms_range=(50, 200), segments_per_utt_range=(4, 10),
                    sample_rate=SAMPLE_RATE):
    """One synthetic utterance: concatenated band-noise segments.

    Adjacent segments never share a band, so every junction is a spectral
    change.  Returns ``(Waveform, Annotation)``.
    """
    lo = int(round(segment_ms_range[0] * sample_rate / 1000))
    hi = int(round(segment_ms_range[1] * sample_rate / 1000))
    n_seg = int(rng.integers(segments_per_utt_range[0], segments_per_utt_range[1], endpoint=True))
    pieces, segments = [], []
    start, prev = 0, None
    for _ in range(n_seg):
        length = int(rng.integers(lo, hi, endpoint=True))
        choices = [b for b in range(len(SYNTH_BANDS)) if b != prev]
        band = choices[int(rng.integers(len(choices)))]
        pieces.append(SYNTH_RMS * band_noise(length, SYNTH_BANDS[band], rng))
        segments.append((start, start + length, f"b{band}"))
        start += length
        prev = band
    samples = to_pcm16(np.concatenate(pieces)).astype(np.float32) / 32768.0
    return Waveform(samples, sample_rate), Annotation(segments, sample_rate)


def synth_corpus(out_dir, n_utterances, seed, segment_ms_range=(50, 200),
                 segments_per_utt_range=(4, 10)):
    """Write ``n_utterances`` synthetic WAV + ``.phn`` pairs and return a Manifest.

    Each utterance draws from its own generator derived from ``(seed, index)``
    so the corpus is byte-identical for a fixed seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_utterances):
        rng = stream_rng(seed, "synth", i)
        wav, ann = synth_utterance(rng, segment_ms_range, segments_per_utt_range)
        stem = f"utt{i:05d}"
        save_wav(out_dir / f"{stem}.wav", wav)
        (out_dir / f"{stem}.phn").write_text(ann.to_text())
        records.append(ManifestRecord(out_dir / f"{stem}.wav", out_dir / f"{stem}.phn"))
    return Manifest(records)


def split_manifest(manifest, fractions=(0.8, 0.1, 0.1)):
    """Split in record order into consecutive train/val/test parts."""
    n = len(manifest)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    recs = manifest.records
    return (Manifest(recs[:n_train]), Manifest(recs[n_train:n_train + n_val]),
            Manifest(recs[n_train + n_val:]))


def load_corpus(manifest, need_annotations=False):
    """Load every record into ``(key, Waveform, Annotation | None)`` triples."""
    if need_annotations:
        manifest.require_annotations()
    out = []
    for r in manifest:
        wav = load_wav(r.audio)
        ann = parse_annotation(r.annotation) if r.annotation is not None else None
        out.append((r.key, wav, ann))
    return out
