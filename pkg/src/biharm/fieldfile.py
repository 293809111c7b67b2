"""Binary field files (BHF1) and the CSV point dump.

A BHF1 file stores one sphere-valued lattice field: a fixed header, the
domain recipe as JSON, and the full bounding-box payload in C order with
exterior slots as NaN.  The domain is rebuilt from the recipe on read,
so a file is self-contained, and write-read-write is the identity on
bytes.

Layout (all little-endian):

    magic   4 bytes  b"BHF1"
    version u32
    n       u8       lattice dimension
    k       u8       target sphere dimension
    extents u32 * n  bounding-box nodes per axis
    spacing f64      lattice constant h
    mlen    u32      length of the JSON block
    meta    mlen bytes, UTF-8 JSON with sorted keys:
            {"shape": ..., "offset": [...], "meta": {...}}
    payload prod(extents) * (k+1) f64
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FieldFileError
from .fields import SphereField
from .lattice import build_domain, spec_from_dict, spec_to_dict

MAGIC = b"BHF1"
VERSION = 1


def _atomic_write(path, writer):
    """Write via a sibling temp file and rename into place."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _meta_bytes(field):
    dom = field.domain
    meta = {"shape": spec_to_dict(dom.spec),
            "offset": [float(o) for o in dom.offset],
            "meta": field.meta}
    try:
        return json.dumps(meta, sort_keys=True).encode("utf-8")
    except TypeError as e:
        raise FieldFileError(f"field meta is not JSON-serializable: {e}")


def write_field(path, field):
    """Serialize a field to a BHF1 file, atomically."""
    dom = field.domain
    k = field.values.shape[1] - 1
    mb = _meta_bytes(field)
    bbox = int(np.prod(dom.extents))
    payload = np.full((bbox, k + 1), np.nan)
    payload[dom.flat_pos] = field.values

    def writer(fh):
        fh.write(MAGIC)
        fh.write(struct.pack("<IBB", VERSION, dom.n, k))
        fh.write(struct.pack(f"<{dom.n}I", *[int(e) for e in dom.extents]))
        fh.write(struct.pack("<d", dom.h))
        fh.write(struct.pack("<I", len(mb)))
        fh.write(mb)
        fh.write(payload.astype("<f8").tobytes(order="C"))

    _atomic_write(path, writer)


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise FieldFileError(f"truncated file: {what} missing")
    return buf[pos:pos + n], pos + n


def read_field(path):
    """Read a BHF1 file back into a SphereField."""
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, pos = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise FieldFileError(f"bad magic {raw!r}")
    raw, pos = _take(buf, pos, 6, "header")
    version, n, k = struct.unpack("<IBB", raw)
    if version != VERSION:
        raise FieldFileError(f"unsupported version {version}")
    raw, pos = _take(buf, pos, 4 * n, "extents")
    extents = np.array(struct.unpack(f"<{n}I", raw), dtype=np.int64)
    raw, pos = _take(buf, pos, 8, "spacing")
    (h,) = struct.unpack("<d", raw)
    raw, pos = _take(buf, pos, 4, "meta length")
    (mlen,) = struct.unpack("<I", raw)
    raw, pos = _take(buf, pos, mlen, "meta block")
    try:
        meta = json.loads(raw.decode("utf-8"))
        spec = spec_from_dict(meta["shape"])
        offset = meta["offset"]
        fmeta = meta.get("meta", {})
    except (ValueError, KeyError, TypeError) as e:
        raise FieldFileError(f"bad meta block: {e}")

    bbox = int(np.prod(extents))
    need = bbox * (k + 1) * 8
    if len(buf) - pos != need:
        raise FieldFileError(
            f"payload is {len(buf) - pos} bytes, header implies {need}")
    payload = np.frombuffer(buf, dtype="<f8", count=bbox * (k + 1),
                            offset=pos).reshape(bbox, k + 1)

    dom = build_domain(spec, h, offset=offset)
    if not np.array_equal(dom.extents, extents):
        raise FieldFileError("rebuilt domain extents disagree with header")
    vals = np.ascontiguousarray(payload[dom.flat_pos])
    if not np.all(np.isfinite(vals)):
        raise FieldFileError("NaN payload at a non-exterior node")
    return SphereField(dom, vals, fmeta)


def write_csv(path, field):
    """Dump a field as CSV: coordinates then components, one node per
    row in storage order, full double precision.  The header comment
    carries the same JSON recipe as the binary format."""
    dom = field.domain
    k = field.values.shape[1] - 1
    head = {"shape": spec_to_dict(dom.spec),
            "offset": [float(o) for o in dom.offset],
            "meta": field.meta, "spacing": dom.h}
    cols = [f"x{a + 1}" for a in range(dom.n)] + \
           [f"u{c}" for c in range(k + 1)]
    x = dom.coords()

    def writer(fh):
        fh.write(b"# BHF1 ")
        fh.write(json.dumps(head, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write((",".join(cols) + "\n").encode("utf-8"))
        for i in range(dom.n_nodes):
            row = [f"{v:.17g}" for v in x[i]] + \
                  [f"{v:.17g}" for v in field.values[i]]
            fh.write((",".join(row) + "\n").encode("utf-8"))

    _atomic_write(path, writer)


def read_csv(path):
    """Rebuild a SphereField from a CSV point dump."""
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8")
        if not first.startswith("# BHF1 "):
            raise FieldFileError("missing BHF1 header comment")
        try:
            head = json.loads(first[len("# BHF1 "):])
            spec = spec_from_dict(head["shape"])
            dom = build_domain(spec, head["spacing"], offset=head["offset"])
        except (ValueError, KeyError, TypeError) as e:
            raise FieldFileError(f"bad header comment: {e}")
        names = fh.readline().decode("utf-8").strip().split(",")
        k = sum(1 for c in names if c.startswith("u")) - 1
        if k < 0 or len(names) != dom.n + k + 1:
            raise FieldFileError("column header disagrees with the recipe")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (dom.n_nodes, dom.n + k + 1):
        raise FieldFileError(
            f"row count {data.shape} does not match the domain "
            f"({dom.n_nodes} nodes)")
    x_err = float(np.abs(data[:, :dom.n] - dom.coords()).max())
    if x_err > 1e-9 * dom.h:
        raise FieldFileError(f"row coordinates off the lattice by {x_err:.2e}")
    return SphereField(dom, np.ascontiguousarray(data[:, dom.n:]),
                       head.get("meta", {}))


def convert(src, dst):
    """BHF1 <-> CSV by file extension."""
    s_csv = src.lower().endswith(".csv")
    d_csv = dst.lower().endswith(".csv")
    if s_csv == d_csv:
        raise FieldFileError("convert needs one .csv side and one binary side")
    if s_csv:
        write_field(dst, read_csv(src))
    else:
        write_csv(dst, read_field(src))
