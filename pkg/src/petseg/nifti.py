"""Reader/writer for a pragmatic subset of the NIfTI-1 file format.

Supports single-file ``.nii`` / ``.nii.gz`` (magic ``n+1\\0``) volumes with
datatypes uint8, int16, float32 and float64, in either byte order
(auto-detected through the ``sizeof_hdr == 348`` probe). Paired
``.hdr/.img`` files, NIfTI-2, extensions and oblique affines are out of
scope; volumes are assumed axis-aligned with x = left-right,
y = anterior-posterior, z = inferior-superior. 4D files with a singleton
fourth dimension are squeezed to 3D.
"""

from __future__ import annotations

import gzip
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DecompressFailure,
    EndiannessUndetectable,
    IoFailure,
    LabelOverflow,
    MalformedHeader,
    TruncatedData,
    UnsupportedDatatype,
)
from .volume import Volume3D, VolumeKind

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

# datatype code -> (numpy base dtype, bitpix)
SUPPORTED_DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    16: ("f4", 32),
    64: ("f8", 64),
}

# Fixed-layout 348-byte header; the format string has no implicit padding.
_HEADER_FMT = (
    "i"      # sizeof_hdr
    "10s"    # data_type (unused)
    "18s"    # db_name (unused)
    "i"      # extents
    "h"      # session_error
    "2c"     # regular, dim_info
    "8h"     # dim
    "3f"     # intent_p1..3
    "4h"     # intent_code, datatype, bitpix, slice_start
    "8f"     # pixdim
    "3f"     # vox_offset, scl_slope, scl_inter
    "h"      # slice_end
    "2c"     # slice_code, xyzt_units
    "4f"     # cal_max, cal_min, slice_duration, toffset
    "2i"     # glmax, glmin
    "80s"    # descrip
    "24s"    # aux_file
    "2h"     # qform_code, sform_code
    "6f"     # quatern_b/c/d, qoffset_x/y/z
    "12f"    # srow_x, srow_y, srow_z
    "16s"    # intent_name
    "4s"     # magic
)
assert struct.calcsize("<" + _HEADER_FMT) == HEADER_SIZE


@dataclass(frozen=True)
class NiftiHeader:
    """Decoded subset of the 348-byte NIfTI-1 header."""

    dim: tuple[int, ...]
    datatype_code: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    byteorder: str  # "<" or ">"
    sform_code: int = 0
    srow: tuple[tuple[float, ...], ...] = ((0.0,) * 4,) * 3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.dim[1], self.dim[2], self.dim[3])

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.pixdim[1], self.pixdim[2], self.pixdim[3])


def parse_header(buf: bytes) -> NiftiHeader:
    """Decode a NIfTI-1 header from the first 348 bytes of ``buf``.

    Byte order is detected by checking which decoding of ``sizeof_hdr``
    equals 348. Raises ``BadMagic``, ``UnsupportedDatatype``,
    ``EndiannessUndetectable``, ``MalformedHeader`` or ``TruncatedData``.
    """
    if len(buf) < HEADER_SIZE:
        raise TruncatedData(f"need {HEADER_SIZE} header bytes, got {len(buf)}")

    byteorder = None
    for order in ("<", ">"):
        if struct.unpack_from(order + "i", buf, 0)[0] == HEADER_SIZE:
            byteorder = order
            break
    if byteorder is None:
        raise EndiannessUndetectable("sizeof_hdr is not 348 under either byte order")

    fields = struct.unpack_from(byteorder + _HEADER_FMT, buf, 0)
    # tuple positions: 0 sizeof_hdr, 1-2 unused strings, 3 extents,
    # 4 session_error, 5-6 regular/dim_info, 7-14 dim, 15-17 intent_p,
    # 18-21 intent_code/datatype/bitpix/slice_start, 22-29 pixdim,
    # 30-32 vox_offset/scl_slope/scl_inter, 33-35 slice fields,
    # 36-41 cal/glmax/glmin, 42-43 descrip/aux, 44-45 qform/sform,
    # 46-51 quatern/qoffset, 52-63 srow, 64 intent_name, 65 magic
    dim = fields[7:15]
    datatype, bitpix = fields[19], fields[20]
    pixdim = fields[22:30]
    vox_offset, scl_slope, scl_inter = fields[30:33]
    sform_code = fields[45]
    srow_flat = fields[52:64]
    magic = fields[65]

    if magic != MAGIC_SINGLE:
        raise BadMagic(f"expected single-file magic {MAGIC_SINGLE!r}, got {magic!r}")
    if datatype not in SUPPORTED_DATATYPES:
        raise UnsupportedDatatype(datatype)
    if dim[0] not in (3, 4):
        raise MalformedHeader(f"dim[0] must be 3 or 4, got {dim[0]}")
    if dim[0] == 4 and dim[4] != 1:
        raise MalformedHeader(f"4D volumes require a singleton 4th dimension, got dim[4]={dim[4]}")
    if any(d < 1 for d in dim[1:4]):
        raise MalformedHeader(f"spatial dims must be >= 1, got {dim[1:4]}")
    if any(p <= 0 for p in pixdim[1:4]):
        raise MalformedHeader(f"pixdim[1..3] must be > 0, got {pixdim[1:4]}")

    return NiftiHeader(
        dim=tuple(int(d) for d in dim),
        datatype_code=int(datatype),
        bitpix=int(bitpix),
        pixdim=tuple(float(p) for p in pixdim),
        vox_offset=float(vox_offset),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        magic=magic,
        byteorder=byteorder,
        sform_code=int(sform_code),
        srow=(tuple(srow_flat[0:4]), tuple(srow_flat[4:8]), tuple(srow_flat[8:12])),
    )


def _infer_kind(datatype_code: int) -> VolumeKind:
    return VolumeKind.PET_SUV if datatype_code in (16, 64) else VolumeKind.LABEL


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise DecompressFailure(f"cannot decompress {path}: {exc}") from exc
    return raw


def read_volume(path, kind: VolumeKind | None = None) -> Volume3D:
    """Load a ``.nii`` / ``.nii.gz`` file into a :class:`Volume3D`.

    Raw values are mapped through ``v * scl_slope + scl_inter`` when
    ``scl_slope != 0`` (slope 0 means "no scaling" per the NIfTI-1
    convention). ``kind`` overrides the default inference of PET_SUV for
    float datatypes and LABEL for integer datatypes.
    """
    buf = _read_bytes(path)
    header = parse_header(buf)

    nx, ny, nz = header.shape
    nvox = nx * ny * nz
    base, _ = SUPPORTED_DATATYPES[header.datatype_code]
    dt = np.dtype(base).newbyteorder(header.byteorder)

    offset = int(round(header.vox_offset))
    if offset < HEADER_SIZE:
        raise MalformedHeader(f"vox_offset {offset} points inside the header")
    if len(buf) < offset + nvox * dt.itemsize:
        raise TruncatedData(
            f"{path}: need {offset + nvox * dt.itemsize} bytes for shape {header.shape}, got {len(buf)}"
        )

    flat = np.frombuffer(buf, dtype=dt, count=nvox, offset=offset)
    data = np.asfortranarray(flat.reshape((nx, ny, nz), order="F"))
    if header.scl_slope != 0.0:
        data = data.astype(np.float64) * header.scl_slope + header.scl_inter

    if kind is None:
        kind = _infer_kind(header.datatype_code)
    return Volume3D(np.ascontiguousarray(data), header.spacing, kind)


def _file_dtype_for(vol: Volume3D, dtype: str | None) -> int:
    if dtype is not None:
        by_name = {"uint8": 2, "int16": 4, "float32": 16, "float64": 64}
        if dtype not in by_name:
            raise UnsupportedDatatype(dtype)
        code = by_name[dtype]
    elif vol.kind is VolumeKind.LABEL:
        vmax = int(vol.data.max()) if vol.data.size else 0
        code = 2 if vmax <= 255 else 4
    else:
        code = 16
    if vol.kind is VolumeKind.LABEL:
        vmax = int(vol.data.max()) if vol.data.size else 0
        limit = {2: 255, 4: 32767, 16: 2**24, 64: 2**53}[code]
        if vmax > limit:
            raise LabelOverflow(f"label value {vmax} exceeds {limit} for datatype code {code}")
    return code


def write_volume(vol: Volume3D, path, byteorder: str = "<", dtype: str | None = None) -> None:
    """Write ``vol`` as a single-file NIfTI-1 volume (gzip if path ends .gz).

    Float volumes are stored as float32 unless ``dtype`` overrides; LABEL
    volumes as uint8 when the maximum label fits, else int16 (labels above
    32767 raise ``LabelOverflow``). Output bytes are deterministic: the
    gzip stream carries no timestamp.
    """
    if byteorder not in ("<", ">"):
        raise ValueError(f"byteorder must be '<' or '>', got {byteorder!r}")
    code = _file_dtype_for(vol, dtype)
    base, bitpix = SUPPORTED_DATATYPES[code]
    dt = np.dtype(base).newbyteorder(byteorder)

    nx, ny, nz = vol.shape
    sx, sy, sz = vol.spacing
    header = struct.pack(
        byteorder + _HEADER_FMT,
        HEADER_SIZE,
        b"", b"",
        0, 0,
        b"r", b"\x00",
        3, nx, ny, nz, 1, 1, 1, 1,
        0.0, 0.0, 0.0,
        0, code, bitpix, 0,
        1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0,
        352.0, 1.0, 0.0,
        0,
        b"\x00", bytes([2]),  # xyzt_units: millimetres
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"petseg", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        sx, 0.0, 0.0, 0.0,
        0.0, sy, 0.0, 0.0,
        0.0, 0.0, sz, 0.0,
        b"",
        MAGIC_SINGLE,
    )
    payload = header + b"\x00\x00\x00\x00" + np.ascontiguousarray(vol.data).astype(dt).tobytes(order="F")
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=6, mtime=0)

    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
