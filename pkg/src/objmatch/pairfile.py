"""Binary pair file: a stream of (PairSpec, MatchSet) records.

Layout, little-endian throughout::

    b"PRS1" u32 record_count
    per record:
        u8 pairing_type  u8 same_scene
        4 x (u32 byte_length, utf-8)   scene_a, image_a, scene_b, image_b
        u32 n_matches      n x (f32 u_a, f32 v_a, f32 u_b, f32 v_b)
        u32 n_non_matches  n x (f32 u_a, f32 v_a, f32 u_b, f32 v_b, u8 category)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from objmatch.correspond import PairSpec, PairingType
from objmatch.types import MatchSet

MAGIC = b"PRS1"
MATCH_DTYPE = np.dtype([("ua", "<f4"), ("va", "<f4"), ("ub", "<f4"), ("vb", "<f4")])
NON_MATCH_DTYPE = np.dtype([("ua", "<f4"), ("va", "<f4"), ("ub", "<f4"), ("vb", "<f4"), ("cat", "u1")])


class PairFileError(ValueError):
    pass


def _write_str(out: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    out.write(struct.pack("<I", len(data)))
    out.write(data)


def encode_record(spec: PairSpec, ms: MatchSet) -> bytes:
    import io

    buf = io.BytesIO()
    buf.write(struct.pack("<BB", int(spec.pairing_type), int(spec.same_scene)))
    for text in (spec.scene_a, spec.image_a, spec.scene_b, spec.image_b):
        _write_str(buf, text)
    matches = np.empty(ms.n_matches, MATCH_DTYPE)
    matches["ua"], matches["va"] = ms.match_a[:, 0], ms.match_a[:, 1]
    matches["ub"], matches["vb"] = ms.match_b[:, 0], ms.match_b[:, 1]
    buf.write(struct.pack("<I", ms.n_matches))
    buf.write(matches.tobytes())
    non = np.empty(ms.n_non_matches, NON_MATCH_DTYPE)
    non["ua"], non["va"] = ms.non_match_a[:, 0], ms.non_match_a[:, 1]
    non["ub"], non["vb"] = ms.non_match_b[:, 0], ms.non_match_b[:, 1]
    non["cat"] = ms.non_match_category
    buf.write(struct.pack("<I", ms.n_non_matches))
    buf.write(non.tobytes())
    return buf.getvalue()


def write_pair_file(path: str | Path, records: Iterable[tuple[PairSpec, MatchSet]]) -> Path:
    path = Path(path)
    records = list(records)
    with open(path, "wb") as out:
        out.write(MAGIC + struct.pack("<I", len(records)))
        for spec, ms in records:
            out.write(encode_record(spec, ms))
    return path


def _read_exact(src: BinaryIO, n: int) -> bytes:
    data = src.read(n)
    if len(data) != n:
        raise PairFileError(f"truncated pair file: wanted {n} bytes, got {len(data)}")
    return data


def _read_str(src: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(src, 4))
    return _read_exact(src, n).decode("utf-8")


def iter_pair_file(path: str | Path) -> Iterator[tuple[PairSpec, MatchSet]]:
    """Stream records without loading the whole file."""
    with open(path, "rb") as src:
        if _read_exact(src, 4) != MAGIC:
            raise PairFileError(f"{path}: bad magic")
        (count,) = struct.unpack("<I", _read_exact(src, 4))
        for _ in range(count):
            ptype, same = struct.unpack("<BB", _read_exact(src, 2))
            ids = [_read_str(src) for _ in range(4)]
            spec = PairSpec(PairingType(ptype), ids[0], ids[1], ids[2], ids[3], bool(same))
            (n,) = struct.unpack("<I", _read_exact(src, 4))
            m = np.frombuffer(_read_exact(src, n * MATCH_DTYPE.itemsize), MATCH_DTYPE)
            (k,) = struct.unpack("<I", _read_exact(src, 4))
            nm = np.frombuffer(_read_exact(src, k * NON_MATCH_DTYPE.itemsize), NON_MATCH_DTYPE)
            yield spec, MatchSet(
                match_a=np.stack([m["ua"], m["va"]], axis=1),
                match_b=np.stack([m["ub"], m["vb"]], axis=1),
                non_match_a=np.stack([nm["ua"], nm["va"]], axis=1),
                non_match_b=np.stack([nm["ub"], nm["vb"]], axis=1),
                non_match_category=nm["cat"].copy(),
            )
        if src.read(1):
            raise PairFileError(f"{path}: trailing bytes after {count} records")


def read_pair_file(path: str | Path) -> list[tuple[PairSpec, MatchSet]]:
    return list(iter_pair_file(path))


def pair_file_count(path: str | Path) -> int:
    with open(path, "rb") as src:
        if _read_exact(src, 4) != MAGIC:
            raise PairFileError(f"{path}: bad magic")
        return struct.unpack("<I", _read_exact(src, 4))[0]
