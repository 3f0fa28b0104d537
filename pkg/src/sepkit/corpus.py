"""Synthetic two-speaker corpus: grammar, rendering, mixing, and persistence.

Transcripts come from a sparse Markov grammar, each symbol renders as a fixed
80 ms harmonic segment with a per-utterance speaker signature, and mixtures
add a noise floor at a controlled SNR. All stored waveforms live on the
k/32768 amplitude grid: grid values and their few-term sums are exactly
representable in float32, which makes the mixture additivity identities hold
bit-exactly in any association order.
"""

import json
import struct
import wave as wave_module
from dataclasses import dataclass, field

import numpy as np

from sepkit import dsp
from sepkit.errors import ConfigError, FormatError

SAMPLE_RATE = 8000
SEGMENT_SECONDS = 0.08
RAMP_SECONDS = 0.005
RENDER_PEAK = 0.9
NUM_HARMONICS = 3
AMPLITUDE_GRID = 32768.0
MEL_BANDS = 24
LOG_FLOOR = -10.0
MAGIC = b"SEPTOY01"
DATASET_VERSION = 1


def segment_length(sample_rate: int = SAMPLE_RATE) -> int:
    return int(round(SEGMENT_SECONDS * sample_rate))


def quantize(wave: np.ndarray) -> np.ndarray:
    """Snap samples to the k/32768 grid and store as float32."""
    grid = np.round(np.asarray(wave, dtype=np.float64) * AMPLITUDE_GRID)
    return (grid / AMPLITUDE_GRID).astype(np.float32)


# -- grammar ----------------------------------------------------------------------


@dataclass(frozen=True)
class Grammar:
    """Markov source over symbol ids with a sparsified transition matrix."""

    initial: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        init = np.asarray(self.initial, dtype=np.float64)
        trans = np.asarray(self.transition, dtype=np.float64)
        v = init.shape[0]
        if trans.shape != (v, v):
            raise ConfigError(f"transition shape {trans.shape} does not match {v} symbols")
        if np.any(init < 0) or np.any(trans < 0):
            raise ConfigError("grammar probabilities must be nonnegative")
        if abs(init.sum() - 1.0) > 1e-12:
            raise ConfigError("initial distribution must sum to 1")
        rows = trans.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-12:
            raise ConfigError("every transition row must sum to 1")
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "transition", trans)

    @property
    def vocab_size(self) -> int:
        return self.initial.shape[0]

    def bigram_allowed(self, a: int, b: int) -> bool:
        return self.transition[a, b] > 0.0


def random_grammar(rng, vocab_size: int = 16, min_zeros_per_row: int = 8) -> Grammar:
    """Row-stochastic transitions with at least the requested zeros per row."""
    keep = vocab_size - min_zeros_per_row
    if keep < 1:
        raise ConfigError("sparsity leaves no allowed transitions")
    trans = np.zeros((vocab_size, vocab_size))
    for row in range(vocab_size):
        cols = rng.choice(vocab_size, size=keep, replace=False)
        weights = rng.uniform(0.2, 1.0, size=keep)
        trans[row, cols] = weights / weights.sum()
        trans[row] /= trans[row].sum()  # kill residual rounding in the row sum
    init = rng.uniform(0.2, 1.0, size=vocab_size)
    init /= init.sum()
    return Grammar(initial=init, transition=trans)


@dataclass(frozen=True)
class Transcript:
    symbols: tuple

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(int(s) for s in self.symbols))

    def __len__(self):
        return len(self.symbols)


def sample_transcript(grammar: Grammar, rng, length_range=(8, 16)) -> Transcript:
    lo, hi = length_range
    length = int(rng.integers(lo, hi + 1))
    symbols = [int(rng.choice(grammar.vocab_size, p=grammar.initial))]
    for _ in range(length - 1):
        symbols.append(int(rng.choice(grammar.vocab_size, p=grammar.transition[symbols[-1]])))
    return Transcript(tuple(symbols))


def transcript_is_valid(grammar: Grammar, symbols) -> bool:
    """True when every adjacent pair has nonzero transition probability."""
    syms = list(symbols)
    if not syms or any(not 0 <= s < grammar.vocab_size for s in syms):
        return False
    return all(grammar.bigram_allowed(a, b) for a, b in zip(syms, syms[1:]))


# -- rendering --------------------------------------------------------------------


@dataclass(frozen=True)
class SpeakerParams:
    pitch_multiplier: float
    spectral_tilt: float  # dB per octave

    def __post_init__(self):
        if not 0.8 <= self.pitch_multiplier <= 1.25:
            raise ConfigError(f"pitch multiplier {self.pitch_multiplier} outside [0.8, 1.25]")
        if not -3.0 <= self.spectral_tilt <= 3.0:
            raise ConfigError(f"spectral tilt {self.spectral_tilt} outside [-3, 3]")


def sample_speaker(rng, pitch_range=(0.8, 1.25), tilt_range=(-3.0, 3.0)) -> SpeakerParams:
    return SpeakerParams(
        pitch_multiplier=float(rng.uniform(*pitch_range)),
        spectral_tilt=float(rng.uniform(*tilt_range)),
    )


def symbol_frequency(symbol: int, params: SpeakerParams) -> float:
    return 200.0 * params.pitch_multiplier + 40.0 * symbol


def render_utterance(
    transcript: Transcript, params: SpeakerParams, sample_rate: int = SAMPLE_RATE
) -> np.ndarray:
    """Fixed-duration harmonic segments, one per symbol, peak-normalized."""
    if len(transcript) == 0:
        raise ValueError("cannot render an empty transcript")
    seg = segment_length(sample_rate)
    ramp = int(round(RAMP_SECONDS * sample_rate))
    t = np.arange(seg) / sample_rate
    envelope = np.ones(seg)
    rise = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
    envelope[:ramp] = rise
    envelope[-ramp:] = rise[::-1]

    out = np.zeros(seg * len(transcript))
    for i, sym in enumerate(transcript.symbols):
        base = symbol_frequency(sym, params)
        if NUM_HARMONICS * base >= sample_rate / 2:
            raise ValueError(
                f"symbol {sym} needs {NUM_HARMONICS * base:.0f} Hz, above Nyquist"
            )
        segment = np.zeros(seg)
        for k in range(1, NUM_HARMONICS + 1):
            gain = 10.0 ** (params.spectral_tilt * np.log2(k) / 20.0)
            segment += gain * np.sin(2.0 * np.pi * k * base * t)
        out[i * seg : (i + 1) * seg] = segment * envelope
    out *= RENDER_PEAK / np.abs(out).max()
    return quantize(out)


# -- mixing -----------------------------------------------------------------------


@dataclass
class MixtureExample:
    mixture: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    noise: np.ndarray  # already scaled to the recorded SNR
    transcripts: tuple
    snr_db: float
    seed: int

    def __len__(self):
        return self.mixture.shape[0]


def _pad_to(wave: np.ndarray, length: int) -> np.ndarray:
    if wave.shape[0] == length:
        return wave
    return np.pad(wave, (0, length - wave.shape[0]))


def _babble(length: int, vocab_size: int, rng, sample_rate: int, tracks: int = 6) -> np.ndarray:
    """Sum of random-symbol renderings at random offsets: speech-shaped noise."""
    seg = segment_length(sample_rate)
    total = np.zeros(length)
    symbols_needed = -(-(length + seg) // seg)
    for _ in range(tracks):
        syms = Transcript(tuple(int(s) for s in rng.integers(0, vocab_size, size=symbols_needed)))
        track = render_utterance(syms, sample_speaker(rng), sample_rate).astype(np.float64)
        offset = int(rng.integers(0, seg))
        total += track[offset : offset + length]
    peak = np.abs(total).max()
    if peak > 0:
        total *= RENDER_PEAK / peak
    return total


def make_mixture(
    transcript_a: Transcript,
    transcript_b: Transcript,
    speaker_a: SpeakerParams,
    speaker_b: SpeakerParams,
    noise_kind: str,
    snr_db: float,
    rng,
    sample_rate: int = SAMPLE_RATE,
    vocab_size: int = 16,
    seed: int = 0,
) -> MixtureExample:
    if noise_kind not in ("white", "babble"):
        raise ConfigError(f"unknown noise kind {noise_kind!r}")
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    s1 = render_utterance(transcript_a, speaker_a, sample_rate)
    s2 = render_utterance(transcript_b, speaker_b, sample_rate)
    length = max(s1.shape[0], s2.shape[0])
    s1 = _pad_to(s1, length)
    s2 = _pad_to(s2, length)

    if noise_kind == "white":
        raw = rng.standard_normal(length)
        raw *= RENDER_PEAK / np.abs(raw).max()
    else:
        raw = _babble(length, vocab_size, rng, sample_rate)

    speech = s1.astype(np.float64) + s2.astype(np.float64)
    gain = dsp.snr_gain(speech, raw, snr_db)
    noise = quantize(gain * raw)
    mixture = (s1 + s2) + noise  # grid values: exact in float32
    return MixtureExample(
        mixture=mixture,
        s1=s1,
        s2=s2,
        noise=noise,
        transcripts=(transcript_a, transcript_b),
        snr_db=float(np.float32(snr_db)),
        seed=seed,
    )


# -- corpus generation --------------------------------------------------------------


@dataclass(frozen=True)
class CorpusParams:
    vocab_size: int = 16
    length_range: tuple = (8, 16)
    snr_range: tuple = (-6.0, 3.0)
    pitch_range: tuple = (0.8, 1.25)
    tilt_range: tuple = (-3.0, 3.0)
    noise_kind: str = "mixed"  # white | babble | mixed
    sample_rate: int = SAMPLE_RATE
    grammar_seed: int = 7

    def grammar(self) -> Grammar:
        return random_grammar(np.random.default_rng(self.grammar_seed), self.vocab_size)


def make_example(seed: int, params: CorpusParams, grammar: Grammar | None = None) -> MixtureExample:
    """Deterministic example from an integer seed."""
    grammar = grammar if grammar is not None else params.grammar()
    rng = np.random.default_rng(seed)
    ta = sample_transcript(grammar, rng, params.length_range)
    tb = sample_transcript(grammar, rng, params.length_range)
    sa = sample_speaker(rng, params.pitch_range, params.tilt_range)
    sb = sample_speaker(rng, params.pitch_range, params.tilt_range)
    snr = float(rng.uniform(*params.snr_range))
    kind = params.noise_kind
    if kind == "mixed":
        kind = "babble" if rng.uniform() < 0.5 else "white"
    return make_mixture(
        ta, tb, sa, sb, kind, snr, rng,
        sample_rate=params.sample_rate, vocab_size=params.vocab_size, seed=seed,
    )


def generate_examples(count: int, base_seed: int, params: CorpusParams) -> list:
    grammar = params.grammar()
    return [make_example(base_seed + i, params, grammar) for i in range(count)]


# -- teacher features ---------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(
    num_bands: int = MEL_BANDS,
    num_bins: int = 129,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Triangular mel filters, (bands, bins)."""
    points = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), num_bands + 2))
    bin_freqs = np.linspace(0.0, sample_rate / 2, num_bins)
    fb = np.zeros((num_bands, num_bins))
    for b in range(num_bands):
        lo, mid, hi = points[b], points[b + 1], points[b + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def segment_logmel(wave: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Per 80 ms segment, frame-averaged 24-band log-mel energies.

    The tail is zero-padded to a whole segment; silence sits exactly at the
    log floor.
    """
    seg = segment_length(sample_rate)
    x = np.asarray(wave, dtype=np.float64)
    n_segs = max(1, -(-x.shape[0] // seg))
    x = np.pad(x, (0, n_segs * seg - x.shape[0]))
    cfg = dsp.StftConfig()
    fb = mel_filterbank(num_bins=cfg.num_bins, sample_rate=sample_rate)
    rows = np.zeros((n_segs, MEL_BANDS))
    for i in range(n_segs):
        spec = dsp.stft(x[i * seg : (i + 1) * seg], cfg)
        mel = fb @ (np.abs(spec) ** 2)  # (bands, frames)
        rows[i] = np.log10(np.maximum(mel, 10.0 ** LOG_FLOOR)).mean(axis=1)
    return rows


# -- wav export ---------------------------------------------------------------------


def write_wav(path, wave: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Mono 16-bit PCM; amplitudes beyond +/-1 saturate."""
    scaled = np.round(np.clip(np.asarray(wave, dtype=np.float64), -1.0, 1.0) * 32767.0)
    pcm = scaled.astype("<i2")
    with wave_module.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave_module.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise FormatError("expected mono 16-bit PCM")
        rate = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return (pcm.astype(np.float64) / 32767.0).astype(np.float32), rate


# -- dataset persistence --------------------------------------------------------------


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"dataset truncated: wanted {n} bytes, got {len(data)}")
    return data


def _write_transcript(f, t: Transcript) -> None:
    f.write(struct.pack("<H", len(t)))
    f.write(np.asarray(t.symbols, dtype="<u2").tobytes())


def _read_transcript(f) -> Transcript:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    syms = np.frombuffer(_read_exact(f, 2 * n), dtype="<u2")
    return Transcript(tuple(int(s) for s in syms))


def _write_block(f, wave: np.ndarray) -> None:
    f.write(struct.pack("<I", wave.shape[0]))
    f.write(np.asarray(wave, dtype="<f4").tobytes())


def _read_block(f) -> np.ndarray:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").copy()


def write_dataset(path, examples, meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(examples)))
        for ex in examples:
            f.write(struct.pack("<Qf", ex.seed, ex.snr_db))
            for t in ex.transcripts:
                _write_transcript(f, t)
            for w in (ex.mixture, ex.s1, ex.s2, ex.noise):
                _write_block(f, w)
    if meta is not None:
        with open(str(path) + ".meta", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)


def read_meta(path) -> dict:
    with open(str(path) + ".meta") as f:
        return json.load(f)


def read_dataset(path, verify: bool = False) -> list:
    with open(path, "rb") as f:
        magic = _read_exact(f, 8)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        examples = []
        for _ in range(count):
            seed, snr = struct.unpack("<Qf", _read_exact(f, 12))
            ta = _read_transcript(f)
            tb = _read_transcript(f)
            mixture, s1, s2, noise = (_read_block(f) for _ in range(4))
            ex = MixtureExample(
                mixture=mixture, s1=s1, s2=s2, noise=noise,
                transcripts=(ta, tb), snr_db=snr, seed=seed,
            )
            if verify and not np.array_equal(ex.mixture, (ex.s1 + ex.s2) + ex.noise):
                raise FormatError(f"example seed {seed} violates mixture additivity")
            examples.append(ex)
    return examples
