"""Minimal RIFF/WAVE reader and writer for 16-bit mono PCM."""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class WavError(ValueError):
    """Base class for WAV ingestion errors."""


class MalformedWavError(WavError):
    pass


class NonPCMError(WavError):
    pass


class UnsupportedFormatError(WavError):
    """PCM, but not 16-bit mono."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if len(self.samples) == 0:
            raise ValueError("empty audio buffer")
        if not np.isfinite(self.samples).all():
            raise ValueError("non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def parse_wav(data: bytes) -> AudioBuffer:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError("not a RIFF/WAVE file")
    fmt = pcm = None
    for cid, body in _chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise MalformedWavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data" and pcm is None:
            pcm = body
    if fmt is None:
        raise MalformedWavError("missing fmt chunk")
    if pcm is None:
        raise MalformedWavError("missing data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if tag == 0xFFFE:
        raise NonPCMError("extensible WAV format is not supported")
    if tag != 1:
        raise NonPCMError(f"format tag {tag} is not integer PCM")
    if channels != 1:
        raise UnsupportedFormatError(f"{channels} channels; only mono is supported")
    if bits != 16:
        raise UnsupportedFormatError(f"{bits}-bit samples; only 16-bit is supported")
    if rate <= 0 or block_align != 2:
        raise MalformedWavError("inconsistent fmt fields")
    if len(pcm) % 2:
        raise MalformedWavError("odd-length data chunk")
    samples = np.frombuffer(pcm, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def read_wav(path) -> AudioBuffer:
    return parse_wav(Path(path).read_bytes())


def write_wav(path, samples, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as 16-bit mono PCM (clipped, rounded)."""
    x = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    pcm = x.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, sample_rate, sample_rate * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
