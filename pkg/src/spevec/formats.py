"""On-disk formats: feature files, embedding files, trial and score lists, checkpoints.

All binary formats are little-endian.

* ``.fbnk``: b"FBNK", u32 rows, u32 cols, rows*cols float32 row-major.
* embeddings: b"EMBD", u32 dim, u32 count, then per entry u16 id length,
  id bytes (UTF-8) and dim float32 values.
* checkpoint: b"SPCK", u32 format version, u32 manifest length, manifest text
  (key=value lines), u32 tensor count, then flat tensor sections.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .numerics import read_tensor_section, write_tensor_section

CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def _need(buf: bytes, pos: int, n: int, what: str) -> None:
    if pos + n > len(buf):
        raise FormatError(f"truncated {what} at byte offset {pos}")


# ---------------------------------------------------------------------------
# features


def write_fbnk(path, features: np.ndarray) -> None:
    f = np.ascontiguousarray(features, dtype="<f4")
    if f.ndim != 2:
        raise FormatError("feature matrix must be 2-D")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"FBNK" + struct.pack("<II", *f.shape) + f.tobytes())


def read_fbnk(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _need(buf, 0, 12, "FBNK header")
    if buf[:4] != b"FBNK":
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    rows, cols = struct.unpack_from("<II", buf, 4)
    _need(buf, 12, 4 * rows * cols, "FBNK payload")
    return np.frombuffer(buf, "<f4", rows * cols, 12).reshape(rows, cols).astype(np.float64)


def read_manifest(path) -> list[tuple[str, Path, str]]:
    """Feature manifest lines: ``<utt-id> <relative path> <speaker>``."""
    path = Path(path)
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{n}: expected '<id> <path> <speaker>'")
        out.append((parts[0], path.parent / parts[1], parts[2]))
    return out


def write_manifest(path, entries) -> None:
    lines = [f"{uid} {rel} {spk}" for uid, rel, spk in entries]
    Path(path).write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# embeddings


def write_embeddings(path, embeddings: dict[str, np.ndarray]) -> None:
    items = list(embeddings.items())
    dim = len(items[0][1]) if items else 0
    out = io.BytesIO()
    out.write(b"EMBD" + struct.pack("<II", dim, len(items)))
    for uid, vec in items:
        raw = uid.encode("utf-8")
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise FormatError(f"embedding '{uid}' has shape {vec.shape}, expected ({dim},)")
        out.write(struct.pack("<H", len(raw)) + raw + vec.tobytes())
    Path(path).write_bytes(out.getvalue())


def read_embeddings(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    _need(buf, 0, 12, "EMBD header")
    if buf[:4] != b"EMBD":
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    dim, count = struct.unpack_from("<II", buf, 4)
    pos, out = 12, {}
    for _ in range(count):
        _need(buf, pos, 2, "id length")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        _need(buf, pos, n + 4 * dim, "embedding entry")
        uid = buf[pos:pos + n].decode("utf-8")
        pos += n
        out[uid] = np.frombuffer(buf, "<f4", dim, pos).astype(np.float64)
        pos += 4 * dim
    return out


# ---------------------------------------------------------------------------
# trials and scores


def read_trials(path) -> list[tuple[bool, str, str]]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise FormatError(f"{path}:{n}: expected '<0|1> <enroll-id> <test-id>'")
        out.append((parts[0] == "1", parts[1], parts[2]))
    return out


def write_trials(path, trials) -> None:
    Path(path).write_text("".join(f"{int(t)} {e} {s}\n" for t, e, s in trials))


def write_scores(path, rows) -> None:
    Path(path).write_text("".join(f"{e} {t} {s:.6f}\n" for e, t, s in rows))


def read_scores(path) -> list[tuple[str, str, float, bool | None]]:
    """Score lines ``<enroll> <test> <score>``, optionally followed by ``<0|1>``."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) == 3:
                out.append((parts[0], parts[1], float(parts[2]), None))
            elif len(parts) == 4 and parts[3] in ("0", "1"):
                out.append((parts[0], parts[1], float(parts[2]), parts[3] == "1"))
            else:
                raise ValueError
        except ValueError:
            raise FormatError(f"{path}:{n}: expected '<enroll> <test> <score> [<0|1>]'") from None
    return out


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, manifest: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    out = io.BytesIO()
    out.write(b"SPCK" + struct.pack("<II", CHECKPOINT_VERSION, len(text)) + text)
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        write_tensor_section(out, name, arr)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(out.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    _need(buf, 0, 12, "checkpoint header")
    if buf[:4] != b"SPCK":
        raise FormatError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    _need(buf, 12, n + 4, "manifest")
    manifest = {}
    for line in buf[12:12 + n].decode("utf-8").splitlines():
        key, _, val = line.partition("=")
        manifest[key] = val
    fh = io.BytesIO(buf)
    fh.seek(12 + n)
    (count,) = struct.unpack("<I", fh.read(4))
    tensors = {}
    for _ in range(count):
        name, arr = read_tensor_section(fh)
        tensors[name] = arr
    return manifest, tensors
