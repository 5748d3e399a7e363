"""
Little-endian binary formats.

    dataset     UAFD  version u32, config JSON (u32 length + UTF-8), video count u32,
                      then per video: label u32, informative bitset (LSB first),
                      truth count u32 + float32 quadruples, float32 frames
    checkpoint  UAFK  version u32, config JSON, then until EOF:
                      name length u32, name, rank u32, dims u32 each, float64 data
    eval        UAFE  version u32, T_L u32, K u32, video count u32,
                      then per video: label u32, T_L x K float64 probabilities
"""

import json
import logging
import struct
from typing import Dict, List, Optional, Tuple

import numpy as np

from conditional_exit import EvalRecord
from config import RunConfig, SynthConfig, canonical_json
from data_generator import SynthDataset, SynthVideo
from error_handler import ErrorHandler, FormatError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DATASET_MAGIC = b'UAFD'
CHECKPOINT_MAGIC = b'UAFK'
EVAL_MAGIC = b'UAFE'

_U32 = struct.Struct('<I')


class _Cursor:
    """Sequential reader that reports the byte offset of any short read"""

    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        available = len(self.buf) - self.pos
        if available < n:
            raise FormatError(f"{self.source}: truncated while reading {what}", offset=self.pos,
                              expected=n, actual=available)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype, count=count).copy()

    def json(self, what: str) -> dict:
        length = self.u32(f"{what} length")
        raw = self.take(length, what)
        try:
            return json.loads(raw.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{self.source}: malformed {what}: {e}", offset=self.pos - length)

    def at_end(self) -> bool:
        return self.pos >= len(self.buf)


def _header(magic: bytes, config_json: Optional[str] = None) -> bytearray:
    out = bytearray(magic)
    out += _U32.pack(FORMAT_VERSION)
    if config_json is not None:
        encoded = config_json.encode('utf-8')
        out += _U32.pack(len(encoded))
        out += encoded
    return out


def _check_header(cur: _Cursor, magic: bytes):
    found = cur.take(len(magic), 'magic')
    if found != magic:
        raise FormatError(f"{cur.source}: bad magic {found!r}, expected {magic!r}", offset=0)
    version = cur.u32('version')
    if version != FORMAT_VERSION:
        raise FormatError(f"{cur.source}: unsupported version {version}, expected {FORMAT_VERSION}", offset=4)


def _write(path: str, payload: bytes, handler: Optional[ErrorHandler]):
    handler = handler or ErrorHandler()

    def write():
        with open(path, 'wb') as f:
            f.write(payload)
        return len(payload)
    size = handler.run_io(write, f"writing {path}")
    logger.debug(f"wrote {size} bytes to {path}")
    return size


def _read(path: str, handler: Optional[ErrorHandler]) -> bytes:
    handler = handler or ErrorHandler()

    def read():
        with open(path, 'rb') as f:
            return f.read()
    return handler.run_io(read, f"reading {path}")


# dataset -----------------------------------------------------------------

def encode_dataset(dataset: SynthDataset) -> bytes:
    c = dataset.config
    out = _header(DATASET_MAGIC, canonical_json(dataset.config.__dict__))
    out += _U32.pack(len(dataset.videos))
    for video in dataset.videos:
        out += _U32.pack(int(video.label))
        out += np.packbits(np.asarray(video.informative_mask, dtype=bool), bitorder='little').tobytes()
        rows = video.truth_track[np.asarray(video.informative_mask, dtype=bool)]
        out += _U32.pack(rows.shape[0])
        out += rows.astype('<f4').tobytes()
        if video.frames.shape != (c.T0, c.C, c.H, c.W):
            raise FormatError(f"video frames {video.frames.shape} do not match config")
        out += video.frames.astype('<f4').tobytes()
    return bytes(out)


def decode_dataset(buf: bytes, source: str = '<dataset>') -> SynthDataset:
    cur = _Cursor(buf, source)
    _check_header(cur, DATASET_MAGIC)
    try:
        config = SynthConfig(**cur.json('config'))
    except TypeError as e:
        raise FormatError(f"{source}: config does not describe a synthetic dataset: {e}")
    count = cur.u32('video count')
    mask_bytes = (config.T0 + 7) // 8
    n_pixels = config.T0 * config.C * config.H * config.W
    videos: List[SynthVideo] = []
    for i in range(count):
        label = cur.u32(f'video {i} label')
        bits = np.frombuffer(cur.take(mask_bytes, f'video {i} mask'), dtype=np.uint8)
        mask = np.unpackbits(bits, bitorder='little')[:config.T0].astype(bool)
        n_truth = cur.u32(f'video {i} truth count')
        if n_truth != int(mask.sum()):
            raise FormatError(f"{source}: video {i} has {n_truth} truth entries for {int(mask.sum())} "
                              f"informative frames", offset=cur.pos - 4)
        rows = cur.array('<f4', 4 * n_truth, f'video {i} truth').reshape(n_truth, 4)
        track = np.full((config.T0, 4), np.nan, dtype=np.float32)
        track[mask] = rows
        frames = cur.array('<f4', n_pixels, f'video {i} frames').reshape(config.T0, config.C, config.H, config.W)
        videos.append(SynthVideo(frames.astype(np.float32), int(label), track, mask))
    if not cur.at_end():
        raise FormatError(f"{source}: {len(buf) - cur.pos} trailing bytes", offset=cur.pos)
    return SynthDataset(config, videos)


def write_dataset(path: str, dataset: SynthDataset, handler: Optional[ErrorHandler] = None) -> int:
    return _write(path, encode_dataset(dataset), handler)


def read_dataset(path: str, handler: Optional[ErrorHandler] = None) -> SynthDataset:
    return decode_dataset(_read(path, handler), source=path)


# checkpoint ----------------------------------------------------------------

def encode_checkpoint(config: RunConfig, params: Dict[str, np.ndarray]) -> bytes:
    out = _header(CHECKPOINT_MAGIC, config.to_json())
    for name in sorted(params):
        value = np.asarray(params[name], dtype='<f8')
        encoded = name.encode('utf-8')
        out += _U32.pack(len(encoded)) + encoded
        out += _U32.pack(value.ndim)
        for dim in value.shape:
            out += _U32.pack(dim)
        out += value.tobytes()
    return bytes(out)


def decode_checkpoint(buf: bytes, source: str = '<checkpoint>') -> Tuple[RunConfig, Dict[str, np.ndarray]]:
    cur = _Cursor(buf, source)
    _check_header(cur, CHECKPOINT_MAGIC)
    config = RunConfig.from_dict(cur.json('config'))
    params: Dict[str, np.ndarray] = {}
    while not cur.at_end():
        name = cur.take(cur.u32('name length'), 'parameter name').decode('utf-8')
        rank = cur.u32(f'{name} rank')
        dims = tuple(cur.u32(f'{name} dim {k}') for k in range(rank))
        params[name] = cur.array('<f8', int(np.prod(dims, dtype=np.int64)), f'{name} data').reshape(dims)
    return config, params


def write_checkpoint(path: str, config: RunConfig, params: Dict[str, np.ndarray],
                     handler: Optional[ErrorHandler] = None) -> int:
    return _write(path, encode_checkpoint(config, params), handler)


def read_checkpoint(path: str, handler: Optional[ErrorHandler] = None):
    return decode_checkpoint(_read(path, handler), source=path)


# eval records ---------------------------------------------------------------

def encode_records(records: List[EvalRecord]) -> bytes:
    if not records:
        raise FormatError("cannot encode an empty record set")
    T_L, K = records[0].probs.shape
    out = bytearray(EVAL_MAGIC) + _U32.pack(FORMAT_VERSION)
    out += _U32.pack(T_L) + _U32.pack(K) + _U32.pack(len(records))
    for record in records:
        if record.probs.shape != (T_L, K):
            raise FormatError(f"record probabilities {record.probs.shape} differ from {(T_L, K)}")
        out += _U32.pack(int(record.label))
        out += np.asarray(record.probs, dtype='<f8').tobytes()
    return bytes(out)


def decode_records(buf: bytes, source: str = '<records>') -> List[EvalRecord]:
    cur = _Cursor(buf, source)
    _check_header(cur, EVAL_MAGIC)
    T_L = cur.u32('T_L')
    K = cur.u32('class count')
    count = cur.u32('record count')
    records = []
    for i in range(count):
        label = cur.u32(f'record {i} label')
        probs = cur.array('<f8', T_L * K, f'record {i} probabilities').reshape(T_L, K)
        records.append(EvalRecord.from_probs(probs, int(label)))
    if not cur.at_end():
        raise FormatError(f"{source}: {len(buf) - cur.pos} trailing bytes", offset=cur.pos)
    return records


def write_records(path: str, records: List[EvalRecord], handler: Optional[ErrorHandler] = None) -> int:
    return _write(path, encode_records(records), handler)


def read_records(path: str, handler: Optional[ErrorHandler] = None) -> List[EvalRecord]:
    return decode_records(_read(path, handler), source=path)
