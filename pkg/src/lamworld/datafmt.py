"""On-disk clip datasets: a manifest plus one binary record per clip.

Layout of a dataset directory:

    manifest.txt            key=value lines: H, W, C, frame_interval_s,
                            embodiment, count (labeled sets add num_tokens,
                            codebook_size, gap)
    clip_000000.bin ...     one record per clip

Record layout (all integers little-endian):

    u32 len, utf-8 clip_id
    u32 T
    T*H*W*C float32 frames in [0, 1]
    u32 n_actions (0 or T-1), then per action: i32 sprite_index, i32 kind,
        f32 magnitude
    u32 len, utf-8 instruction text (space-separated vocabulary words)
    u32 n_pairs (0 for unlabeled sets), then per pair: i32 t, i32 gap,
        num_tokens * i32 code indices
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import worldgen
from .errors import MissingArtifact
from .worldgen import ActionKind, Embodiment, GroundTruthAction, VideoClip


@dataclass(frozen=True)
class PairLabel:
    t: int
    gap: int
    indices: tuple[int, ...]


def _write_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    out += struct.pack("<I", len(raw))
    out += raw


def _read_str(buf: memoryview, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    return bytes(buf[off : off + n]).decode("utf-8"), off + n


def encode_record(clip: VideoClip, pairs: list[PairLabel] | None = None) -> bytes:
    out = bytearray()
    _write_str(out, clip.clip_id)
    out += struct.pack("<I", clip.length)
    out += np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    actions = clip.gt_actions or []
    out += struct.pack("<I", len(actions))
    for a in actions:
        out += struct.pack("<iif", a.sprite_index, int(a.kind), a.magnitude)
    _write_str(out, clip.instruction_text)
    pairs = pairs or []
    out += struct.pack("<I", len(pairs))
    for p in pairs:
        out += struct.pack("<ii", p.t, p.gap)
        out += struct.pack(f"<{len(p.indices)}i", *p.indices)
    return bytes(out)


def decode_record(
    raw: bytes, h: int, w: int, c: int, frame_interval_s: float,
    embodiment: Embodiment, num_tokens: int = 0,
) -> tuple[VideoClip, list[PairLabel]]:
    buf = memoryview(raw)
    clip_id, off = _read_str(buf, 0)
    (T,) = struct.unpack_from("<I", buf, off)
    off += 4
    n = T * h * w * c
    frames = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(T, h, w, c)
    off += 4 * n
    (n_actions,) = struct.unpack_from("<I", buf, off)
    off += 4
    actions = []
    for _ in range(n_actions):
        sprite_index, kind, magnitude = struct.unpack_from("<iif", buf, off)
        off += 12
        actions.append(GroundTruthAction(sprite_index, ActionKind(kind), magnitude))
    text, off = _read_str(buf, off)
    tokens = [worldgen.VOCAB[word] for word in text.split()] if text else []
    (n_pairs,) = struct.unpack_from("<I", buf, off)
    off += 4
    pairs = []
    for _ in range(n_pairs):
        t, gap = struct.unpack_from("<ii", buf, off)
        off += 8
        indices = struct.unpack_from(f"<{num_tokens}i", buf, off)
        off += 4 * num_tokens
        pairs.append(PairLabel(t, gap, tuple(indices)))
    clip = VideoClip(
        frames=frames.copy(),
        frame_interval_s=frame_interval_s,
        embodiment=embodiment,
        instruction=tokens,
        instruction_text=text,
        gt_actions=actions or None,
        clip_id=clip_id,
    )
    return clip, pairs


def _write_manifest(path: Path, entries: dict[str, str]) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def _read_manifest(path: Path) -> dict[str, str]:
    entries = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            k, _, v = line.partition("=")
            entries[k] = v
    return entries


def save_dataset(
    dirpath: Path | str,
    clips: list[VideoClip],
    labels: dict[str, list[PairLabel]] | None = None,
    num_tokens: int = 0,
    extra_manifest: dict[str, str] | None = None,
) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    first = clips[0]
    h, w, c = first.frames.shape[1:]
    entries = {
        "H": str(h),
        "W": str(w),
        "C": str(c),
        "frame_interval_s": repr(first.frame_interval_s),
        "embodiment": first.embodiment.value,
        "count": str(len(clips)),
    }
    if labels is not None:
        entries["num_tokens"] = str(num_tokens)
    entries.update(extra_manifest or {})
    _write_manifest(dirpath / "manifest.txt", entries)
    for i, clip in enumerate(clips):
        pairs = labels.get(clip.clip_id) if labels else None
        (dirpath / f"clip_{i:06d}.bin").write_bytes(encode_record(clip, pairs))


def load_dataset(dirpath: Path | str, stage_hint: str = "gen-data") -> tuple[list[VideoClip], dict[str, list[PairLabel]]]:
    dirpath = Path(dirpath)
    manifest_path = dirpath / "manifest.txt"
    if not manifest_path.exists():
        raise MissingArtifact(manifest_path, stage_hint)
    m = _read_manifest(manifest_path)
    h, w, c = int(m["H"]), int(m["W"]), int(m["C"])
    fi = float(m["frame_interval_s"])
    embodiment = Embodiment(m["embodiment"])
    num_tokens = int(m.get("num_tokens", 0))
    clips = []
    labels: dict[str, list[PairLabel]] = {}
    for i in range(int(m["count"])):
        raw = (dirpath / f"clip_{i:06d}.bin").read_bytes()
        clip, pairs = decode_record(raw, h, w, c, fi, embodiment, num_tokens)
        clips.append(clip)
        if pairs:
            labels[clip.clip_id] = pairs
    return clips, labels
