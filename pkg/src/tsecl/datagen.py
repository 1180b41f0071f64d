"""Synthetic speakers, controlled-SDR mixtures and JSON-lines manifests.

A speaker is a harmonic source at a characteristic f0 shaped by a few
formant resonators. Utterances are regenerated on demand from their seeds, so
a manifest can live without any audio on disk.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import dsp
from .metrics import mixture_sdr

MANIFEST_SCHEMA = "tsecl.manifest"
MANIFEST_VERSION = 1
TARGET_RMS = 0.1

GENDER_F0_BANDS = {"A": (100.0, 140.0), "B": (190.0, 240.0)}
# per-gender formant centre ranges (Hz) for F1..F3, and shared bandwidth ranges
_FORMANT_RANGES = {
    "A": ((300.0, 600.0), (900.0, 1500.0), (2100.0, 2700.0)),
    "B": ((550.0, 900.0), (1400.0, 2200.0), (2600.0, 3300.0)),
}
_BANDWIDTH_RANGES = ((60.0, 120.0), (80.0, 150.0), (120.0, 200.0))


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    gender: str
    f0_hz: float
    formants: tuple[tuple[float, float], ...]
    seed: int

    def validate(self, sample_rate: int = dsp.DEFAULT_SAMPLE_RATE) -> None:
        if self.gender not in GENDER_F0_BANDS:
            raise ValueError(f"{self.speaker_id}: unknown gender {self.gender!r}")
        lo, hi = GENDER_F0_BANDS[self.gender]
        if not lo <= self.f0_hz <= hi:
            raise ValueError(f"{self.speaker_id}: f0 {self.f0_hz} outside [{lo}, {hi}]")
        if not 2 <= len(self.formants) <= 3:
            raise ValueError(f"{self.speaker_id}: need 2-3 formants")
        for freq, bw in self.formants:
            if not (0 < freq < sample_rate / 2) or bw <= 0:
                raise ValueError(f"{self.speaker_id}: bad formant ({freq}, {bw})")

    def to_dict(self) -> dict:
        return {"speaker_id": self.speaker_id, "gender": self.gender,
                "f0_hz": self.f0_hz, "formants": [list(f) for f in self.formants],
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerProfile":
        return cls(d["speaker_id"], d["gender"], float(d["f0_hz"]),
                   tuple((float(a), float(b)) for a, b in d["formants"]), int(d["seed"]))


def make_profile(speaker_id: str, gender: str, seed: int) -> SpeakerProfile:
    rng = np.random.default_rng(seed)
    lo, hi = GENDER_F0_BANDS[gender]
    f0 = float(rng.uniform(lo, hi))
    formants = tuple(
        (round(float(rng.uniform(*fr)), 3), round(float(rng.uniform(*br)), 3))
        for fr, br in zip(_FORMANT_RANGES[gender], _BANDWIDTH_RANGES)
    )
    return SpeakerProfile(speaker_id, gender, round(f0, 3), formants, seed)


def _resonator(freq: float, bw: float, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / sample_rate)
    theta = 2.0 * np.pi * freq / sample_rate
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unity gain at DC


@lru_cache(maxsize=2048)
def _synth_cached(p: SpeakerProfile, n: int, utterance_seed: int, sample_rate: int) -> np.ndarray:
    rng = np.random.default_rng([p.seed, utterance_seed])
    t = np.arange(n) / sample_rate
    # slow intonation drift plus smoothed jitter, kept within about 2% of f0
    drift = 0.012 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 2 * np.pi))
    jitter = lfilter([0.01], [1.0, -0.99], rng.standard_normal(n)) * 0.05
    jitter = np.clip(jitter, -0.008, 0.008)
    f0 = p.f0_hz * (1.0 + drift + jitter)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int((sample_rate / 2) // (p.f0_hz * 1.05))
    k = np.arange(1, n_harm + 1)
    amps = 1.0 / k
    source = (amps[:, None] * np.sin(k[:, None] * phase[None, :])).sum(axis=0)
    # per-utterance vowel colour: formants perturbed by a few percent
    y = source
    for freq, bw in p.formants:
        b, a = _resonator(freq * rng.uniform(0.95, 1.05), bw, sample_rate)
        y = lfilter(b, a, y)
    rate = rng.uniform(3.0, 5.0)
    env = 0.25 + 0.75 * np.sin(np.pi * rate * t + rng.uniform(0, np.pi)) ** 2
    y = y * env
    y *= TARGET_RMS / np.sqrt(np.mean(y ** 2))
    y.setflags(write=False)
    return y


def synth_utterance(p: SpeakerProfile, duration_s: float, utterance_seed: int,
                    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Deterministic voiced utterance of profile ``p`` at RMS 0.1."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    p.validate(sample_rate)
    n = int(round(duration_s * sample_rate))
    return _synth_cached(p, n, int(utterance_seed), int(sample_rate)).copy()


def mix_at_sdr(target, interferer, sdr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Rescale ``interferer`` so the pair sits at ``sdr_db``; return
    ``(mixture, scaled_interferer)``."""
    s = np.asarray(target, dtype=np.float64)
    i = np.asarray(interferer, dtype=np.float64)
    if s.shape != i.shape:
        raise ValueError("target and interferer lengths differ")
    e_s, e_i = float(np.dot(s, s)), float(np.dot(i, i))
    if e_s <= 0 or e_i <= 0:
        raise ValueError("zero-energy input")
    gain = np.sqrt(e_s / (e_i * 10.0 ** (sdr_db / 10.0)))
    scaled = i * gain
    return s + scaled, scaled


# --- records and manifests ---------------------------------------------------

@dataclass
class SampleAudio:
    mixture: np.ndarray
    target: np.ndarray
    interferer: np.ndarray
    reference: np.ndarray


@dataclass
class SampleRecord:
    sample_id: str
    target: SpeakerProfile
    interferer: SpeakerProfile
    mix_sdr_db: float
    duration_s: float
    reference_duration_s: float
    target_seed: int
    interferer_seed: int
    reference_seed: int
    difficulty: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target.speaker_id == self.interferer.speaker_id:
            raise ValueError(f"{self.sample_id}: target and interferer are the same speaker")
        if self.reference_seed == self.target_seed:
            raise ValueError(f"{self.sample_id}: reference must be a different utterance")

    @property
    def same_gender(self) -> bool:
        return self.target.gender == self.interferer.gender

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["target"] = self.target.to_dict()
        d["interferer"] = self.interferer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        d = dict(d)
        d["target"] = SpeakerProfile.from_dict(d["target"])
        d["interferer"] = SpeakerProfile.from_dict(d["interferer"])
        return cls(**d)


def load_audio(r: SampleRecord, sample_rate: int = dsp.DEFAULT_SAMPLE_RATE) -> SampleAudio:
    if r.paths:
        mixture, target, interferer, reference = (
            dsp.read_wav(r.paths[k])[0] for k in ("mixture", "target", "interferer", "reference"))
        return SampleAudio(mixture, target, interferer, reference)
    s = synth_utterance(r.target, r.duration_s, r.target_seed, sample_rate)
    i = synth_utterance(r.interferer, r.duration_s, r.interferer_seed, sample_rate)
    m, scaled = mix_at_sdr(s, i, r.mix_sdr_db)
    ref = synth_utterance(r.target, r.reference_duration_s, r.reference_seed, sample_rate)
    return SampleAudio(m, s, scaled, ref)


@dataclass
class Manifest:
    records: list
    partition: str
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in manifest")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def subset(self, records) -> "Manifest":
        return Manifest(list(records), self.partition, self.sample_rate)

    def speaker_ids(self) -> set[str]:
        return {p.speaker_id for r in self.records for p in (r.target, r.interferer)}

    def header(self) -> dict:
        return {"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION,
                "partition": self.partition, "sample_rate": self.sample_rate,
                "num_records": len(self.records)}

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "Manifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValueError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{path}: not a manifest (schema {header.get('schema')!r})")
        if header.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {header.get('version')}")
        records = [SampleRecord.from_dict(json.loads(line)) for line in lines[1:] if line.strip()]
        return cls(records, header["partition"], int(header["sample_rate"]))


def materialize_audio(manifest: Manifest, audio_dir, pcm16: bool = False) -> Manifest:
    """Write every record's audio as WAV into a content-addressed tree and
    return a manifest whose records point at those files."""
    audio_dir = Path(audio_dir)
    out = []
    for r in manifest:
        a = load_audio(r, manifest.sample_rate)
        paths = {}
        for role in ("mixture", "target", "interferer", "reference"):
            w = getattr(a, role)
            digest = hashlib.sha256(w.astype("<f8").tobytes()).hexdigest()
            path = audio_dir / digest[:2] / f"{digest}.wav"
            if not path.exists():
                dsp.write_wav(path, w, manifest.sample_rate, pcm16=pcm16)
            paths[role] = str(path)
        out.append(dataclasses.replace(r, paths=paths, difficulty=dict(r.difficulty)))
    return manifest.subset(out)


# --- dataset construction ----------------------------------------------------

@dataclass
class DatasetConfig:
    seed: int = 0
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE
    train_profiles_per_gender: int = 12
    test_profiles_per_gender: int = 4
    train_pairs: int = 200
    dev_pairs: int = 24
    test_pairs: int = 40
    pairing: str = "balanced"
    sdr_range: tuple = (-5.0, 5.0)
    mixture_duration: float = 1.0
    reference_duration: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "sdr_range" in d:
            d["sdr_range"] = tuple(d["sdr_range"])
        return cls(**d)


def _profiles(prefix: str, per_gender: int, rng: np.random.Generator) -> list[SpeakerProfile]:
    return [make_profile(f"{prefix}{g}{k:02d}", g, int(rng.integers(2 ** 31)))
            for g in ("A", "B") for k in range(per_gender)]


def _draw_pairs(profiles, n_pairs: int, pairing: str, rng) -> list[tuple]:
    all_pairs = [(a, b) for i, a in enumerate(profiles) for b in profiles[i + 1:]]
    if pairing == "random":
        order = rng.permutation(len(all_pairs))
        return [all_pairs[order[k % len(order)]] for k in range(n_pairs)]
    if pairing != "balanced":
        raise ValueError(f"unknown pairing {pairing!r}")
    same = [p for p in all_pairs if p[0].gender == p[1].gender]
    diff = [p for p in all_pairs if p[0].gender != p[1].gender]
    same = [same[k] for k in rng.permutation(len(same))]
    diff = [diff[k] for k in rng.permutation(len(diff))]
    # alternate same/different so any prefix stays balanced
    return [(same if k % 2 == 0 else diff)[(k // 2) % len(same if k % 2 == 0 else diff)]
            for k in range(n_pairs)]


def _partition(partition: str, profiles, n_pairs: int, cfg: DatasetConfig, rng) -> Manifest:
    lo, hi = cfg.sdr_range
    records = []
    for k, (a, b) in enumerate(_draw_pairs(profiles, n_pairs, cfg.pairing, rng)):
        seed_a, seed_b, ref_a, ref_b = (int(x) for x in rng.integers(2 ** 31, size=4))
        sdr = round(float(rng.uniform(lo, hi)), 6)
        common = dict(duration_s=cfg.mixture_duration,
                      reference_duration_s=cfg.reference_duration)
        records.append(SampleRecord(f"{partition}-{k:05d}-a", a, b, sdr, target_seed=seed_a,
                                    interferer_seed=seed_b, reference_seed=ref_a, **common))
        records.append(SampleRecord(f"{partition}-{k:05d}-b", b, a, -sdr, target_seed=seed_b,
                                    interferer_seed=seed_a, reference_seed=ref_b, **common))
    return Manifest(records, partition, cfg.sample_rate)


def build_dataset(cfg: DatasetConfig) -> dict[str, Manifest]:
    """Train/dev/test manifests; every mixture appears twice with target and
    interferer roles swapped. Test speakers never occur in train or dev."""
    lo, hi = cfg.sdr_range
    if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
        raise ValueError(f"invalid SDR range {cfg.sdr_range}")
    if 2 * cfg.train_profiles_per_gender < 2 or (
            cfg.test_pairs and 2 * cfg.test_profiles_per_gender < 2):
        raise ValueError("need at least two speaker profiles per partition")
    if cfg.pairing == "balanced" and (cfg.train_profiles_per_gender < 2 or
                                      (cfg.test_pairs and cfg.test_profiles_per_gender < 2)):
        raise ValueError("balanced pairing needs two profiles per gender")
    rng = np.random.default_rng(cfg.seed)
    train_profiles = _profiles("tr", cfg.train_profiles_per_gender, rng)
    test_profiles = _profiles("te", cfg.test_profiles_per_gender, rng)
    out = {}
    for i, (name, profiles, n) in enumerate((("train", train_profiles, cfg.train_pairs),
                                             ("dev", train_profiles, cfg.dev_pairs),
                                             ("test", test_profiles, cfg.test_pairs))):
        out[name] = _partition(name, profiles, n, cfg,
                               np.random.default_rng([cfg.seed, 1000 + i]))
    return out


def check_mixture(r: SampleRecord, sample_rate: int = dsp.DEFAULT_SAMPLE_RATE) -> float:
    """Re-measured SDR of a record's stems."""
    a = load_audio(r, sample_rate)
    return mixture_sdr(a.target, a.interferer)
