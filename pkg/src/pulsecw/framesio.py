"""Frames file: one JSON header line, then per-frame records.

Binary records are little-endian: frame_id (u8), herald_time (f8),
trace (L x f8), reference_trace (L x f8).  The jsonl variant writes one
JSON object per frame after the same header line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1
FORMATS = ("bin", "jsonl")


class FramesFileError(ValueError):
    pass


def record_dtype(trace_length: int) -> np.dtype:
    return np.dtype(
        [
            ("frame_id", "<u8"),
            ("herald_time", "<f8"),
            ("trace", "<f8", (trace_length,)),
            ("reference_trace", "<f8", (trace_length,)),
        ]
    )


@dataclass
class FrameBatch:
    """Column-wise view of many frames sharing one sample period."""

    frame_ids: np.ndarray
    herald_times: np.ndarray
    traces: np.ndarray
    references: np.ndarray
    sample_period: float
    header: dict | None = None

    def __len__(self):
        return len(self.frame_ids)

    @property
    def trace_length(self) -> int:
        return self.traces.shape[1]

    def frame(self, i: int):
        from .physim import HomodyneFrame

        return HomodyneFrame(
            frame_id=int(self.frame_ids[i]),
            trace=self.traces[i],
            reference_trace=self.references[i],
            herald_time=float(self.herald_times[i]),
            sample_period=self.sample_period,
        )

    def __iter__(self):
        return (self.frame(i) for i in range(len(self)))

    @classmethod
    def from_frames(cls, frames) -> "FrameBatch":
        frames = list(frames)
        if not frames:
            raise FramesFileError("no frames")
        dt = frames[0].sample_period
        if any(f.sample_period != dt or len(f.trace) != len(frames[0].trace) for f in frames):
            raise FramesFileError("frames differ in sample period or trace length")
        return cls(
            frame_ids=np.array([f.frame_id for f in frames], dtype=np.uint64),
            herald_times=np.array([f.herald_time for f in frames], dtype=float),
            traces=np.array([f.trace for f in frames], dtype=float),
            references=np.array([f.reference_trace for f in frames], dtype=float),
            sample_period=dt,
        )

    def scaled(self, c: float) -> "FrameBatch":
        return FrameBatch(self.frame_ids, self.herald_times, self.traces * c, self.references,
                          self.sample_period, self.header)

    def subset(self, index) -> "FrameBatch":
        return FrameBatch(self.frame_ids[index], self.herald_times[index], self.traces[index],
                          self.references[index], self.sample_period, self.header)


def make_header(n_frames: int, trace_length: int, sample_period: float, config: dict, fmt: str = "bin") -> dict:
    if fmt not in FORMATS:
        raise FramesFileError(f"unknown frames format {fmt!r}")
    return {
        "version": FORMAT_VERSION,
        "format": fmt,
        "n_frames": int(n_frames),
        "trace_length": int(trace_length),
        "sample_period": float(sample_period),
        "config": config,
    }


class FramesWriter:
    def __init__(self, path, header: dict):
        self.path = path
        self.header = header
        self.fmt = header.get("format", "bin")
        self.dtype = record_dtype(header["trace_length"])
        self.written = 0
        self._fh = None

    def __enter__(self):
        self._fh = open(self.path, "wb")
        self._fh.write(json.dumps(self.header, sort_keys=True).encode() + b"\n")
        return self

    def write(self, batch: FrameBatch) -> None:
        if batch.trace_length != self.header["trace_length"]:
            raise FramesFileError("trace length differs from header")
        if self.fmt == "bin":
            rec = np.empty(len(batch), dtype=self.dtype)
            rec["frame_id"] = batch.frame_ids
            rec["herald_time"] = batch.herald_times
            rec["trace"] = batch.traces
            rec["reference_trace"] = batch.references
            self._fh.write(rec.tobytes())
        else:
            for i in range(len(batch)):
                obj = {
                    "frame_id": int(batch.frame_ids[i]),
                    "herald_time": float(batch.herald_times[i]),
                    "trace": batch.traces[i].tolist(),
                    "reference_trace": batch.references[i].tolist(),
                }
                self._fh.write(json.dumps(obj).encode() + b"\n")
        self.written += len(batch)

    def __exit__(self, exc_type, exc, tb):
        self._fh.close()
        if exc_type is None and self.written != self.header["n_frames"]:
            raise FramesFileError(f"wrote {self.written} frames, header promises {self.header['n_frames']}")


def write_frames(path, batch: FrameBatch, config: dict | None = None, fmt: str = "bin") -> None:
    header = make_header(len(batch), batch.trace_length, batch.sample_period, config or {}, fmt)
    with FramesWriter(path, header) as w:
        w.write(batch)


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FramesFileError(f"{path}: header line is not JSON ({exc})") from exc
    for key in ("version", "n_frames", "trace_length", "sample_period"):
        if key not in header:
            raise FramesFileError(f"{path}: header missing {key!r}")
    if header["version"] != FORMAT_VERSION:
        raise FramesFileError(f"{path}: unsupported version {header['version']}")
    return header, len(line)


def read_frames(path, mmap: bool = True) -> FrameBatch:
    header, offset = read_header(path)
    n, L = header["n_frames"], header["trace_length"]
    fmt = header.get("format", "bin")
    if fmt == "bin":
        dtype = record_dtype(L)
        if mmap:
            rec = np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=(n,))
        else:
            rec = np.fromfile(path, dtype=dtype, offset=offset, count=n)
        if len(rec) != n:
            raise FramesFileError(f"{path}: expected {n} frames, found {len(rec)}")
        return FrameBatch(
            frame_ids=rec["frame_id"],
            herald_times=rec["herald_time"],
            traces=rec["trace"],
            references=rec["reference_trace"],
            sample_period=header["sample_period"],
            header=header,
        )
    if fmt == "jsonl":
        ids, herald, traces, refs = [], [], [], []
        with open(path) as fh:
            fh.readline()
            for line in fh:
                obj = json.loads(line)
                ids.append(obj["frame_id"])
                herald.append(obj["herald_time"])
                traces.append(obj["trace"])
                refs.append(obj["reference_trace"])
        if len(ids) != n:
            raise FramesFileError(f"{path}: expected {n} frames, found {len(ids)}")
        return FrameBatch(np.array(ids, dtype=np.uint64), np.array(herald), np.array(traces),
                          np.array(refs), header["sample_period"], header)
    raise FramesFileError(f"{path}: unknown format {fmt!r}")
