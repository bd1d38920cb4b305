"""File formats: spectrogram (BSPC), activations (BACT), annotation text,
run manifests."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import N_TEMPO, ActivationTrack, DemixedClip
from .targets import Annotation

SPEC_MAGIC = b"BSPC"
ACT_MAGIC = b"BACT"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(buf: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise FormatError("file truncated")
    return bytes(buf[pos:pos + n]), pos + n


def _header(buf: memoryview, magic: bytes) -> int:
    got, pos = _read_exact(buf, 0, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    raw, pos = _read_exact(buf, pos, 4)
    (version,) = struct.unpack("<I", raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return pos


# spectrogram ---------------------------------------------------------------

def spectrogram_bytes(clip: DemixedClip) -> bytes:
    T, C, F = clip.values.shape
    parts = [SPEC_MAGIC, struct.pack("<IQQQd", VERSION, T, C, F, clip.fps)]
    for name in clip.channel_names:
        enc = name.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)) + enc)
    parts.append(np.ascontiguousarray(clip.values, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_spectrogram(data: bytes) -> DemixedClip:
    buf = memoryview(data)
    pos = _header(buf, SPEC_MAGIC)
    raw, pos = _read_exact(buf, pos, 32)
    T, C, F, fps = struct.unpack("<QQQd", raw)
    names = []
    for _ in range(C):
        raw, pos = _read_exact(buf, pos, 4)
        (n,) = struct.unpack("<I", raw)
        raw, pos = _read_exact(buf, pos, n)
        names.append(raw.decode("utf-8"))
    raw, pos = _read_exact(buf, pos, 4 * T * C * F)
    if pos != len(buf):
        raise FormatError("trailing bytes after spectrogram payload")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(T, C, F)
    return DemixedClip(values, fps, names)


def write_spectrogram(path, clip: DemixedClip) -> None:
    Path(path).write_bytes(spectrogram_bytes(clip))


def read_spectrogram(path) -> DemixedClip:
    return parse_spectrogram(Path(path).read_bytes())


# activations ----------------------------------------------------------------

def activation_bytes(track: ActivationTrack) -> bytes:
    T = len(track)
    tempo = np.asarray(track.tempo, dtype=np.float64)
    if tempo.size != N_TEMPO:
        raise FormatError(f"tempo distribution has {tempo.size} classes, format needs {N_TEMPO}")
    frames = np.stack([track.beat, track.downbeat], axis=1).astype("<f4")
    return b"".join([ACT_MAGIC, struct.pack("<IQd", VERSION, T, track.fps),
                     frames.tobytes(), tempo.astype("<f4").tobytes()])


def parse_activations(data: bytes) -> ActivationTrack:
    buf = memoryview(data)
    pos = _header(buf, ACT_MAGIC)
    raw, pos = _read_exact(buf, pos, 16)
    T, fps = struct.unpack("<Qd", raw)
    raw, pos = _read_exact(buf, pos, 8 * T)
    frames = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(T, 2)
    raw, pos = _read_exact(buf, pos, 4 * N_TEMPO)
    if pos != len(buf):
        raise FormatError("trailing bytes after activation payload")
    tempo = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return ActivationTrack(frames[:, 0].copy(), frames[:, 1].copy(), tempo / tempo.sum(), fps)


def write_activations(path, track: ActivationTrack) -> None:
    Path(path).write_bytes(activation_bytes(track))


def read_activations(path) -> ActivationTrack:
    return parse_activations(Path(path).read_bytes())


# annotation text ------------------------------------------------------------

def format_beats(times, positions) -> str:
    return "".join(f"{t:.6f}\t{int(p)}\n" for t, p in zip(times, positions))


def parse_beats(text: str) -> tuple[np.ndarray, np.ndarray]:
    times, positions = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2:
            raise FormatError(f"line {lineno}: expected '<time>\\t<position>', got {line!r}")
        try:
            times.append(float(fields[0]))
            positions.append(int(fields[1]))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    return np.array(times, dtype=np.float64), np.array(positions, dtype=np.int64)


def write_annotation(path, ann: Annotation) -> None:
    Path(path).write_text(f"# beats_per_bar={ann.beats_per_bar}\n"
                          + format_beats(ann.beat_times, ann.beat_positions), encoding="utf-8")


def read_annotation(path) -> Annotation:
    text = Path(path).read_text(encoding="utf-8")
    times, positions = parse_beats(text)
    bpb = int(positions.max()) if positions.size else 1
    for line in text.splitlines():
        if line.startswith("# beats_per_bar="):
            bpb = int(line.split("=", 1)[1])
    return Annotation(times, positions, bpb)


# manifests -------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
