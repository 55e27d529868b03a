"""Disk corpus layout and the synthetic desk-scale corpus generator.

Layout per utterance id (ids look like "doc0-utt003"; the part before the
first hyphen is the document key):

    <id>.wav   16-bit PCM mono, 16 kHz
    <id>.phn   one integer phone id per encoder frame (20 ms hop)
    <id>.spk   single line: speaker id
    <id>.txt   transcript as phone symbols (one letter per segment)

Synthetic utterances are concatenated filtered-tone segments: each phone
is a fixed harmonic recipe, each speaker a spectral tilt plus a small
pitch offset, so phone and speaker labels exist by construction.
"""

from __future__ import annotations

import os
import wave as wavemod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, InvalidLengthError

SAMPLE_RATE = 16000
HOP = 320
WIN = 400

PHONE_SYMBOLS = "abcdefghijklmnopqrstuvwxyz"


def write_wav(path, wave):
    """Write a float waveform in [-1, 1) as 16-bit PCM."""
    pcm = np.clip(np.asarray(wave) * 32767.0, -32768, 32767).astype("<i2")
    with wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


def read_wav(path):
    with wavemod.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise InvalidLengthError(f"{path}: expected 16-bit mono PCM")
        if fh.getframerate() != SAMPLE_RATE:
            raise InvalidLengthError(f"{path}: expected {SAMPLE_RATE} Hz")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def frames_for_samples(n_samples):
    if n_samples < WIN:
        raise InvalidLengthError(f"waveform of {n_samples} samples is shorter than one window")
    return (n_samples - WIN) // HOP + 1


def samples_for_frames(n_frames):
    return WIN + HOP * (n_frames - 1)


@dataclass
class Utterance:
    utt_id: str
    wave: np.ndarray
    transcript: str | None = None
    phones: np.ndarray | None = None
    speaker: str | None = None

    @property
    def document(self):
        return self.utt_id.split("-", 1)[0]

    @property
    def seconds(self):
        return len(self.wave) / SAMPLE_RATE


def load_corpus(corpus_dir, with_labels=True):
    """Load every utterance under corpus_dir, sorted by id."""
    corpus_dir = Path(corpus_dir)
    items = []
    for wav_path in sorted(corpus_dir.glob("*.wav")):
        utt_id = wav_path.stem
        wave = read_wav(wav_path)
        transcript = None
        phones = None
        speaker = None
        if with_labels:
            txt = wav_path.with_suffix(".txt")
            if txt.exists():
                transcript = txt.read_text().strip()
            phn = wav_path.with_suffix(".phn")
            if phn.exists():
                phones = np.array([int(line) for line in phn.read_text().split()],
                                  dtype=np.int64)
            spk = wav_path.with_suffix(".spk")
            if spk.exists():
                speaker = spk.read_text().strip()
        items.append(Utterance(utt_id, wave, transcript, phones, speaker))
    if not items:
        raise InvalidLengthError(f"no .wav files under {corpus_dir}")
    return items


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _phone_recipe(n_phones, rng):
    """Fundamental frequency and harmonic amplitudes per phone."""
    f0 = np.geomspace(200.0, 3200.0, n_phones)
    harmonics = rng.uniform(0.15, 0.75, size=(n_phones, 2))
    return f0, harmonics


def _speaker_recipe(n_speakers, rng):
    """Spectral tilt exponent, gain and pitch offset per speaker."""
    tilt = rng.uniform(-0.7, 0.7, size=n_speakers)
    gain = rng.uniform(0.25, 0.4, size=n_speakers)
    pitch = rng.uniform(0.97, 1.03, size=n_speakers)
    return tilt, gain, pitch


def _segment_wave(n_samples, f0, harm, tilt, gain, pitch, phase_rng):
    t = np.arange(n_samples) / SAMPLE_RATE
    freqs = f0 * pitch * np.array([1.0, 2.0, 3.0])
    amps = np.array([1.0, harm[0], harm[1]])
    amps = amps * (freqs / 1000.0) ** tilt
    out = np.zeros(n_samples)
    for f, a in zip(freqs, amps):
        if f < SAMPLE_RATE / 2:
            out += a * np.sin(2 * np.pi * f * t + phase_rng.uniform(0, 2 * np.pi))
    out *= gain / max(1.0, np.abs(out).max())
    ramp = min(80, n_samples // 4)
    env = np.ones(n_samples)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return out * env


def generate_synthetic_corpus(n_utts, n_phones, n_speakers, seed, out_dir,
                              min_frames=20, max_frames=60, utts_per_doc=10,
                              noise_level=0.003):
    """Write a labelled synthetic corpus; same seed gives identical bytes.

    Each document has one speaker. Returns the list of utterance ids.
    """
    if n_phones < 2:
        raise ConfigError("need at least 2 phones")
    if n_phones > len(PHONE_SYMBOLS):
        raise ConfigError(f"at most {len(PHONE_SYMBOLS)} phones supported")
    if n_speakers < 1:
        raise ConfigError("need at least 1 speaker")
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    emb_dir = out_dir / "embeds" / "speaker"
    os.makedirs(emb_dir, exist_ok=True)

    rng = np.random.default_rng(seed)
    f0, harmonics = _phone_recipe(n_phones, rng)
    tilt, gain, pitch = _speaker_recipe(n_speakers, rng)

    ids = []
    for u in range(n_utts):
        doc = u // utts_per_doc
        spk = doc % n_speakers
        utt_id = f"doc{doc}-utt{u:04d}"
        n_frames_total = int(rng.integers(min_frames, max_frames + 1))

        seg_frames = []
        remaining = n_frames_total
        while remaining > 0:
            seg = int(rng.integers(4, 13))
            seg = min(seg, remaining)
            seg_frames.append(seg)
            remaining -= seg
        seg_phones = [int(rng.integers(n_phones)) for _ in seg_frames]

        phones = np.repeat(seg_phones, seg_frames)
        total_samples = samples_for_frames(n_frames_total)
        wave = np.zeros(total_samples)
        cursor = 0
        for si, (ph, nf) in enumerate(zip(seg_phones, seg_frames)):
            # segment spans its frames' hops; the last segment also covers
            # the final window tail
            n_samp = nf * HOP if si < len(seg_frames) - 1 else total_samples - cursor
            wave[cursor:cursor + n_samp] = _segment_wave(
                n_samp, f0[ph], harmonics[ph], tilt[spk], gain[spk], pitch[spk], rng)
            cursor += n_samp
        wave += noise_level * rng.standard_normal(total_samples)

        write_wav(out_dir / f"{utt_id}.wav", wave)
        (out_dir / f"{utt_id}.phn").write_text("\n".join(str(p) for p in phones) + "\n")
        (out_dir / f"{utt_id}.spk").write_text(f"spk{spk}\n")
        transcript = "".join(PHONE_SYMBOLS[p] for p in seg_phones)
        (out_dir / f"{utt_id}.txt").write_text(transcript + "\n")
        emb = np.zeros(n_speakers)
        emb[spk] = 1.0
        nm.save_tensor(emb_dir / f"{utt_id}.sslt", emb)
        ids.append(utt_id)
    return ids
