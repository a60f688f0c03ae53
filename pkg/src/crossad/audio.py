"""Sample-accurate WAV handling: parse, split into ten equal segments, write.

Only the canonical container is accepted: RIFF/WAVE, PCM format code 1,
16-bit, mono.  Anything else fails loudly -- corpus recordings with
unknown channel semantics must not be silently downmixed.

Segment ``i`` of an N-sample clip covers ``[floor(i*N/10), floor((i+1)*N/10))``,
so the segments partition the clip exactly and lengths differ by at most
one sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    TooShortError,
    TruncatedDataError,
    UnsupportedContainerError,
    UnsupportedFormatError,
)

N_SEGMENTS = 10


@dataclass
class PcmClip:
    """Mono 16-bit PCM audio; samples are little-endian signed ints on disk."""

    sample_rate: int
    samples: np.ndarray  # int16

    def __post_init__(self):
        if self.sample_rate < 1:
            raise DataError("sample_rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.int16)

    def __len__(self) -> int:
        return int(self.samples.shape[0])


def parse_wav(data: bytes) -> PcmClip:
    """Decode a canonical RIFF/WAVE byte blob."""
    if len(data) < 12:
        raise TruncatedDataError("file shorter than a RIFF header")
    magic = data[0:4]
    if magic != b"RIFF":
        raise UnsupportedContainerError(
            f"unsupported container magic {magic!r} (expected b'RIFF')")
    if data[8:12] != b"WAVE":
        raise UnsupportedContainerError(
            f"unsupported RIFF form {data[8:12]!r} (expected b'WAVE')")

    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise TruncatedDataError("fmt chunk shorter than 16 bytes")
            audio_format, channels, rate, _, _, bits = struct.unpack_from(
                "<HHIIHH", body, 0)
            if audio_format != 1:
                raise UnsupportedFormatError(
                    f"unsupported format code {audio_format} (expected PCM=1)")
            if channels != 1:
                raise UnsupportedFormatError(
                    f"unsupported channel count {channels} (mono only)")
            if bits != 16:
                raise UnsupportedFormatError(
                    f"unsupported bit depth {bits} (16-bit only)")
            fmt = rate
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise TruncatedDataError(
                    f"data chunk claims {chunk_size} bytes, only {len(body)} present")
            pcm = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None:
        raise TruncatedDataError("missing fmt chunk")
    if pcm is None:
        raise TruncatedDataError("missing data chunk")
    if len(pcm) % 2 != 0:
        raise TruncatedDataError("data chunk holds a torn 16-bit sample")
    samples = np.frombuffer(pcm, dtype="<i2").astype(np.int16)
    return PcmClip(sample_rate=fmt, samples=samples)


def split_ten(clip: PcmClip) -> list[PcmClip]:
    """Partition a clip into ten contiguous segments of near-equal length."""
    n = len(clip)
    if n < N_SEGMENTS:
        raise TooShortError(
            f"clip has {n} samples; need at least {N_SEGMENTS} to split")
    segments = []
    for i in range(N_SEGMENTS):
        lo = (i * n) // N_SEGMENTS
        hi = ((i + 1) * n) // N_SEGMENTS
        segments.append(PcmClip(clip.sample_rate, clip.samples[lo:hi].copy()))
    return segments


def encode_wav(clip: PcmClip) -> bytes:
    """Canonical 44-byte header followed by little-endian samples."""
    payload = clip.samples.astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, clip.sample_rate,
        clip.sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def write_wav(clip: PcmClip, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_wav(clip))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_wav(path: str | Path) -> PcmClip:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_wav(data)


def segment_file(wav_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Split one recording into ``<out_dir>/<stem>/seg_0.wav ... seg_9.wav``."""
    wav_path = Path(wav_path)
    clip = read_wav(wav_path)
    target = Path(out_dir) / wav_path.stem
    written = []
    for i, seg in enumerate(split_ten(clip)):
        p = target / f"seg_{i}.wav"
        write_wav(seg, p)
        written.append(p)
    return written
