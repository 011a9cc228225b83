"""Binary containers, CSV exports, key = value configs and run manifests.

Containers are little-endian.  ``GTW1`` holds a windowed dataset and
``GTCK`` a model checkpoint; both embed a JSON block for free-form metadata
(including the producing run's config hash).
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import models as M
from . import preprocess as P
from . import tensor as T
from .training import Checkpoint

DATASET_MAGIC = b"GTW1"
CHECKPOINT_MAGIC = b"GTCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# low-level helpers
# ---------------------------------------------------------------------------

def _f8(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _i8(a):
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


class _Reader:
    def __init__(self, buf, what):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape):
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * n), dtype=dtype).reshape(shape).copy()

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))


def _json_block(obj):
    raw = json.dumps(obj, sort_keys=True, allow_nan=False).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _check_magic(r, magic, path):
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file (magic {got!r})")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: {magic.decode()} version {version} is not supported (expected {FORMAT_VERSION})")


# ---------------------------------------------------------------------------
# GTW1 windowed dataset
# ---------------------------------------------------------------------------

def write_dataset(ds, path, meta=None):
    """Header, split bounds, norm stats, JSON meta, window index, frame, then every window row-major."""
    counts = [ds.count(n) for n in P.SPLIT_NAMES]
    out = [DATASET_MAGIC, struct.pack("<I", FORMAT_VERSION),
           struct.pack("<5I", ds.L_enc, ds.L_pred, ds.stride, ds.d_w, ds.d_a),
           struct.pack("<4Q", *counts, len(ds.wind)),
           struct.pack("<6Q", *[v for b in ds.split.bounds for v in b])]
    if ds.norm is not None:
        out += [b"\x01", _f8(ds.norm.wind_mean), _f8(ds.norm.wind_std), _f8(ds.norm.acc_mean), _f8(ds.norm.acc_std)]
    else:
        out.append(b"\x00")
    block = dict(ds.meta)
    block.update(meta or {})
    block.update(rate=ds.rate, wind_names=list(ds.wind_names), acc_names=list(ds.acc_names),
                 norm_segment=ds.norm.fit_segment if ds.norm is not None else None)
    out += [_json_block(block), _i8(ds.starts), _i8(ds.labels), _f8(ds.wind), _f8(ds.acc)]
    with open(path, "wb") as fh:
        for chunk in out:
            fh.write(chunk)
        for i in range(0, len(ds), 1024):
            Xw, Xa, Y = ds.batch(np.arange(i, min(i + 1024, len(ds))))
            n = len(Xw)
            fh.write(_f8(np.concatenate([Xw.reshape(n, -1), Xa.reshape(n, -1), Y.reshape(n, -1)], axis=1)))


def read_dataset(path, verify=False):
    """Load a ``GTW1`` file; ``verify`` re-checks the stored windows against the frame."""
    r = _Reader(Path(path).read_bytes(), "GTW1")
    _check_magic(r, DATASET_MAGIC, path)
    L_enc, L_pred, stride, d_w, d_a = r.unpack("<5I")
    *counts, T_len = r.unpack("<4Q")
    b = r.unpack("<6Q")
    split = P.SplitSpec(((b[0], b[1]), (b[2], b[3]), (b[4], b[5])))
    (has_norm,) = r.unpack("<B")
    norm = None
    if has_norm:
        norm = P.NormStats(r.array("<f8", (d_w,)), r.array("<f8", (d_w,)),
                           r.array("<f8", (d_a,)), r.array("<f8", (d_a,)))
    meta = r.json()
    if norm is not None and meta.get("norm_segment"):
        norm.fit_segment = meta["norm_segment"]
    N = sum(counts)
    starts = r.array("<i8", (N,))
    labels = r.array("<i8", (N,))
    wind = r.array("<f8", (T_len, d_w))
    acc = r.array("<f8", (T_len, d_a))
    width = L_enc * d_w + L_enc * d_a + L_pred * d_a
    if verify:
        win = r.array("<f8", (N, width))
    else:
        r.take(8 * N * width)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes after GTW1 payload")
    rate = meta.pop("rate", 1.0)
    wind_names = tuple(meta.pop("wind_names", ()))
    acc_names = tuple(meta.pop("acc_names", ()))
    meta.pop("norm_segment", None)
    ds = P.WindowedDataset(wind, acc, starts, labels, L_enc, L_pred, stride, split, norm, meta,
                           rate=rate, wind_names=wind_names, acc_names=acc_names)
    if verify:
        Xw, Xa, Y = ds.batch(np.arange(N))
        ref = np.concatenate([Xw.reshape(N, -1), Xa.reshape(N, -1), Y.reshape(N, -1)], axis=1)
        if not np.array_equal(ref.view(np.uint64), win.view(np.uint64)):
            raise FormatError(f"{path}: stored windows disagree with the stored frame")
    return ds


# ---------------------------------------------------------------------------
# GTCK checkpoint
# ---------------------------------------------------------------------------

def _tensor_block(name, a):
    raw = name.encode("utf-8")
    a = np.asarray(a, dtype=float)
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim)
            + struct.pack(f"<{a.ndim}Q", *a.shape) + _f8(a))


def _read_tensor(r):
    (n,) = r.unpack("<H")
    name = r.take(n).decode("utf-8")
    (ndim,) = r.unpack("<B")
    shape = r.unpack(f"<{ndim}Q")
    return name, r.array("<f8", shape)


def write_checkpoint(ck, path, meta=None):
    block = {"config": ck.config.to_dict(), "epoch": ck.epoch, "meta": {**ck.meta, **(meta or {})}}
    out = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION), _json_block(block),
           struct.pack("<I", len(ck.weights))]
    out += [_tensor_block(k, v) for k, v in ck.weights.items()]
    opt = ck.optimizer
    if opt is None:
        out.append(b"\x00")
    else:
        scalars = {f.name: getattr(opt, f.name) for f in fields(opt) if f.name not in ("m", "v")}
        out += [b"\x01", _json_block(scalars), struct.pack("<I", len(opt.m))]
        out += [_tensor_block(f"m.{i}", a) for i, a in enumerate(opt.m)]
        out += [_tensor_block(f"v.{i}", a) for i, a in enumerate(opt.v)]
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path):
    r = _Reader(Path(path).read_bytes(), "GTCK")
    _check_magic(r, CHECKPOINT_MAGIC, path)
    block = r.json()
    (n,) = r.unpack("<I")
    weights = dict(_read_tensor(r) for _ in range(n))
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        scalars = r.json()
        (k,) = r.unpack("<I")
        m = [_read_tensor(r)[1] for _ in range(k)]
        v = [_read_tensor(r)[1] for _ in range(k)]
        opt = T.AdamState(**scalars, m=m, v=v)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes after GTCK payload")
    cfg = M.ModelConfig.from_dict(block["config"])
    expected = M.weight_shapes(cfg)
    if set(expected) != set(weights) or any(tuple(expected[k]) != weights[k].shape for k in expected):
        raise FormatError(f"{path}: weight tensors do not match the stored model config")
    return Checkpoint(cfg, weights, block["epoch"], opt, block["meta"])


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def config_hash(obj):
    """Short SHA-256 of a canonical JSON rendering (dataclasses are expanded)."""
    if is_dataclass(obj):
        obj = asdict(obj)
    raw = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _parse_value(s):
    s = s.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    if "," in s:
        return tuple(_parse_value(p) for p in s.split(","))
    return s.strip("\"'")


def parse_config(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment.  Values become int/float/bool/None/tuple/str."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = (p.strip() for p in line.split("=", 1))
        if not k.replace("_", "").replace(".", "").isalnum():
            raise ValueError(f"{source}:{n}: invalid key {k!r}")
        if k in out:
            raise ValueError(f"{source}:{n}: duplicate key {k!r}")
        out[k] = _parse_value(v)
    return out


def read_config(path):
    return parse_config(Path(path).read_text(), str(path))


def format_config(d):
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ",".join(fmt(x) for x in v)
        return "none" if v is None else str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in d.items())


def write_sim_csv(result, path, config_hash_=None):
    """One row per sample with round-trip (``repr``) float precision."""
    arr = result.to_array()
    with open(path, "w", newline="") as fh:
        if config_hash_:
            fh.write(f"# config_hash={config_hash_}\n")
        w = csv.writer(fh)
        w.writerow(["t", "u", "h", "h_dot", "phi", "phi_dot", "h_ddot", "phi_ddot"])
        for row in arr:
            w.writerow([repr(float(v)) for v in row])


def read_sim_csv(path):
    from .bench import SimResult
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    data = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]])
    return SimResult.from_array(data.reshape(-1, 8))


def read_header_hash(path):
    """The ``config_hash`` recorded on a CSV's leading comment line, if any."""
    with open(path) as fh:
        first = fh.readline().strip()
    if first.startswith("# config_hash="):
        return first.split("=", 1)[1].strip()
    return None


def write_frame_csv(frame, path, config_hash_=None):
    with open(path, "w", newline="") as fh:
        if config_hash_:
            fh.write(f"# config_hash={config_hash_}\n")
        w = csv.writer(fh)
        w.writerow(["t", *frame.wind_names, *frame.acc_names])
        for i in range(len(frame.t)):
            w.writerow([repr(float(frame.t[i]))] + [repr(float(v)) for v in frame.wind[i]]
                       + [repr(float(v)) for v in frame.acc[i]])


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        return json.load(fh)
