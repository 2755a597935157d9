"""NIfTI-1 reading/writing and BraTS case assembly.

Only single-file NIfTI-1 (``.nii`` / ``.nii.gz``) is handled. Header
extensions are skipped on read and never written. Files are written
little-endian with both sform and qform set from the affine, and gzip
streams carry a zero mtime so repeated writes are byte-identical.
"""

from __future__ import annotations

import gzip
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import LabelVolume, VoxelGrid

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODES = {dt: code for code, dt in DATATYPES.items()}

# (name, struct format) in header order; 348 bytes in total.
_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"),
    ("qoffset_x", "f"), ("qoffset_y", "f"), ("qoffset_z", "f"),
    ("srow_x", "4f"), ("srow_y", "4f"), ("srow_z", "4f"),
    ("intent_name", "16s"), ("magic", "4s"),
]
_FORMAT = "".join(f for _, f in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _unpack_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"malformed header: {len(raw)} bytes, expected {HEADER_SIZE}")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("malformed header: sizeof_hdr is not 348")
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    hdr, pos = {"endian": endian}, 0
    for name, fmt in _FIELDS:
        count = int(fmt[:-1]) if fmt[:-1].isdigit() and fmt[-1] != "s" else 1
        hdr[name] = values[pos] if count == 1 else values[pos:pos + count]
        pos += count
    if hdr["magic"] not in (b"n+1\x00",):
        raise NiftiError(f"unsupported NIfTI magic {hdr['magic']!r} (single-file NIfTI-1 only)")
    return hdr


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    pixdim = np.array(hdr["pixdim"][1:4], dtype=float)
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    pixdim[2] *= qfac
    affine = np.eye(4)
    affine[:3, :3] = rot * pixdim
    affine[:3, 3] = hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]
    return affine


def header_affine(hdr: dict) -> np.ndarray:
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3] = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]], dtype=float)
        return affine
    if hdr["qform_code"] > 0:
        return _quaternion_affine(hdr)
    return np.diag([*map(float, hdr["pixdim"][1:4]), 1.0])


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_header(path) -> dict:
    return _unpack_header(_open_bytes(Path(path)))


def read_nifti(path, as_labels: bool = False) -> VoxelGrid:
    """Read a 3D NIfTI-1 file.

    With ``as_labels=True`` the data must be integral with values in
    {0..3}, and a :class:`LabelVolume` is returned.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = _open_bytes(path)
    hdr = _unpack_header(raw)
    ndim = hdr["dim"][0]
    dims = tuple(int(d) for d in hdr["dim"][1:ndim + 1])
    if ndim < 3 or ndim > 7 or any(d < 1 for d in dims) or any(d != 1 for d in dims[3:]):
        raise NiftiError(f"only 3D volumes are supported, got dim={hdr['dim']}")
    dims = dims[:3]
    code = hdr["datatype"]
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(hdr["endian"])
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiError(f"malformed header: vox_offset {offset}")
    nbytes = int(np.prod(dims)) * dtype.itemsize
    payload = raw[offset:offset + nbytes]
    if len(payload) != nbytes:
        raise NiftiError(f"truncated voxel data: {len(payload)} of {nbytes} bytes")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    data = np.ascontiguousarray(data.astype(dtype.newbyteorder("="), copy=False))
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if np.isfinite(slope) and slope != 0 and (slope != 1 or (np.isfinite(inter) and inter != 0)):
        data = data * float(slope) + (float(inter) if np.isfinite(inter) else 0.0)
    affine = header_affine(hdr)
    if as_labels:
        if data.dtype.kind == "f" and np.any(data != np.round(data)):
            raise NiftiError(f"{path}: label view requested on non-integer data")
        try:
            return LabelVolume(data, affine)
        except ValueError as exc:
            raise NiftiError(f"{path}: {exc}") from None
    return VoxelGrid(data, affine)


def _qform_params(affine: np.ndarray):
    """Quaternion parameters of ``affine``; ``None`` if not a rigid+scale map."""
    m = affine[:3, :3]
    spacing = np.linalg.norm(m, axis=0)
    rot = m / spacing
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-4):
        return None
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot = rot.copy()
        rot[:, 2] *= -1
    trace = np.trace(rot)
    a = 0.5 * np.sqrt(max(0.0, 1.0 + trace))
    if a > 1e-3:
        b = (rot[2, 1] - rot[1, 2]) / (4 * a)
        c = (rot[0, 2] - rot[2, 0]) / (4 * a)
        d = (rot[1, 0] - rot[0, 1]) / (4 * a)
    else:
        # near-180 degree rotation: recover the axis from the diagonal
        b = 0.5 * np.sqrt(max(0.0, 1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]))
        c = 0.5 * np.sqrt(max(0.0, 1.0 - rot[0, 0] + rot[1, 1] - rot[2, 2]))
        d = 0.5 * np.sqrt(max(0.0, 1.0 - rot[0, 0] - rot[1, 1] + rot[2, 2]))
        big = int(np.argmax([b, c, d]))
        if big == 0:
            c = (rot[0, 1] + rot[1, 0]) / (4 * b)
            d = (rot[0, 2] + rot[2, 0]) / (4 * b)
            a = (rot[2, 1] - rot[1, 2]) / (4 * b)
        elif big == 1:
            b = (rot[0, 1] + rot[1, 0]) / (4 * c)
            d = (rot[1, 2] + rot[2, 1]) / (4 * c)
            a = (rot[0, 2] - rot[2, 0]) / (4 * c)
        else:
            b = (rot[0, 2] + rot[2, 0]) / (4 * d)
            c = (rot[1, 2] + rot[2, 1]) / (4 * d)
            a = (rot[1, 0] - rot[0, 1]) / (4 * d)
        if a < 0:
            b, c, d = -b, -c, -d
    return (b, c, d), qfac


def nifti_bytes(volume: VoxelGrid, description: str = "adaptseg") -> bytes:
    """Uncompressed NIfTI-1 file contents for ``volume``."""
    data = np.asarray(volume.data)
    if isinstance(volume, LabelVolume):
        data = data.astype(np.uint8)
    elif data.dtype == bool:
        data = data.astype(np.uint8)
    dtype = data.dtype.newbyteorder("=")
    if dtype not in _CODES:
        raise NiftiError(f"unsupported dtype {data.dtype} (supported: {sorted(str(d) for d in _CODES)})")
    # Round the affine to its stored precision first so write->read->write is stable.
    affine = np.asarray(volume.affine, dtype=np.float32).astype(float)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    q = _qform_params(affine)
    (qb, qc, qd), qfac = q if q is not None else ((0.0, 0.0, 0.0), 1.0)
    dim = (3, *data.shape, 1, 1, 1, 1)
    values = {
        "sizeof_hdr": HEADER_SIZE, "data_type": b"", "db_name": b"", "extents": 0,
        "session_error": 0, "regular": b"r", "dim_info": 0, "dim": dim,
        "intent_p1": 0.0, "intent_p2": 0.0, "intent_p3": 0.0, "intent_code": 0,
        "datatype": _CODES[dtype], "bitpix": dtype.itemsize * 8, "slice_start": 0,
        "pixdim": (qfac, *spacing, 1.0, 1.0, 1.0, 1.0), "vox_offset": float(VOX_OFFSET),
        "scl_slope": 1.0, "scl_inter": 0.0, "slice_end": 0, "slice_code": 0,
        "xyzt_units": 2 | 8, "cal_max": 0.0, "cal_min": 0.0, "slice_duration": 0.0,
        "toffset": 0.0, "glmax": 0, "glmin": 0, "descrip": description.encode()[:80],
        "aux_file": b"", "qform_code": 1 if q is not None else 0, "sform_code": 1,
        "quatern_b": qb, "quatern_c": qc, "quatern_d": qd,
        "qoffset_x": affine[0, 3], "qoffset_y": affine[1, 3], "qoffset_z": affine[2, 3],
        "srow_x": tuple(affine[0]), "srow_y": tuple(affine[1]), "srow_z": tuple(affine[2]),
        "intent_name": b"", "magic": b"n+1\x00",
    }
    flat = []
    for name, fmt in _FIELDS:
        v = values[name]
        flat.extend(v if isinstance(v, tuple) else [v])
    header = struct.pack("<" + _FORMAT, *flat)
    body = data.astype(dtype.newbyteorder("<"), copy=False).tobytes(order="F")
    return header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body


def write_nifti(volume: VoxelGrid, path, gzip_compress: bool | None = None) -> Path:
    """Write ``volume``; compression defaults to the ``.gz`` suffix of ``path``."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    if gzip_compress is None:
        gzip_compress = path.name.endswith(".gz")
    payload = nifti_bytes(volume)
    if gzip_compress:
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(payload)
        payload = buf.getvalue()
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# BraTS case directories
# ---------------------------------------------------------------------------

SEQUENCES = ("t1", "t1ce", "t2", "flair")
PROB_REGIONS = ("et", "tc", "wt")


@dataclass(frozen=True)
class NamingScheme:
    """File suffixes of a case directory (BraTS 2023/2024 defaults)."""

    t1: str = "-t1n"
    t1ce: str = "-t1c"
    t2: str = "-t2w"
    flair: str = "-t2f"
    labels: str = "-seg"
    prob_et: str = "-prob_et"
    prob_tc: str = "-prob_tc"
    prob_wt: str = "-prob_wt"
    extensions: tuple = (".nii.gz", ".nii")

    def find(self, directory: Path, stem: str, suffix: str):
        for ext in self.extensions:
            candidate = directory / f"{stem}{suffix}{ext}"
            if candidate.exists():
                return candidate
        return None


@dataclass
class CaseBundle:
    case_id: str
    t1: VoxelGrid
    t1ce: VoxelGrid
    t2: VoxelGrid
    flair: VoxelGrid
    labels: LabelVolume | None = None
    prob_maps: dict = field(default_factory=dict)

    def sequences(self) -> dict:
        return {name: getattr(self, name) for name in SEQUENCES}

    def volumes(self):
        yield from self.sequences().items()
        if self.labels is not None:
            yield "labels", self.labels
        for model, maps in self.prob_maps.items():
            for region in PROB_REGIONS:
                yield f"{model}.{region}", getattr(maps, region)

    def check_geometry(self, atol: float = 1e-4) -> None:
        ref_name, ref = "t1", self.t1
        for name, vol in self.volumes():
            if vol.dims != ref.dims:
                raise GeometryError(f"{self.case_id}: dims of {name} {vol.dims} differ from {ref_name} {ref.dims}")
            if not ref.same_geometry(vol, atol=atol):
                raise GeometryError(f"{self.case_id}: affine of {name} differs from {ref_name}")

    @property
    def grid(self) -> VoxelGrid:
        return self.t1


class GeometryError(ValueError):
    """Volumes of one case disagree in dims or affine."""


class MissingSequenceError(FileNotFoundError):
    pass


def load_case(directory, naming: NamingScheme | None = None, require_labels: bool = False) -> CaseBundle:
    """Assemble a :class:`CaseBundle` from ``<dir>/<case_id><suffix>.nii[.gz]``."""
    naming = naming or NamingScheme()
    directory = Path(directory)
    case_id = directory.name
    if not directory.is_dir():
        raise FileNotFoundError(f"case directory not found: {directory}")
    volumes = {}
    for seq in SEQUENCES:
        suffix = getattr(naming, seq)
        path = naming.find(directory, case_id, suffix)
        if path is None:
            raise MissingSequenceError(f"{case_id}: missing sequence {seq} ({case_id}{suffix}.nii[.gz])")
        volumes[seq] = read_nifti(path)
    seg = naming.find(directory, case_id, naming.labels)
    if seg is None and require_labels:
        raise MissingSequenceError(f"{case_id}: missing labels ({case_id}{naming.labels}.nii[.gz])")
    labels = read_nifti(seg, as_labels=True) if seg is not None else None
    bundle = CaseBundle(case_id=case_id, labels=labels, **volumes)
    bundle.check_geometry()
    return bundle


def save_case(bundle: CaseBundle, root, naming: NamingScheme | None = None, gzip_compress: bool = True) -> Path:
    naming = naming or NamingScheme()
    ext = ".nii.gz" if gzip_compress else ".nii"
    directory = Path(root) / bundle.case_id
    directory.mkdir(parents=True, exist_ok=True)
    for seq, vol in bundle.sequences().items():
        write_nifti(vol, directory / f"{bundle.case_id}{getattr(naming, seq)}{ext}")
    if bundle.labels is not None:
        write_nifti(bundle.labels, directory / f"{bundle.case_id}{naming.labels}{ext}")
    return directory


def prob_map_paths(model_dir, case_id: str, naming: NamingScheme | None = None) -> dict:
    naming = naming or NamingScheme()
    model_dir = Path(model_dir)
    return {r: naming.find(model_dir, case_id, getattr(naming, f"prob_{r}")) for r in PROB_REGIONS}


def list_case_ids(model_dir, naming: NamingScheme | None = None) -> list:
    """Case ids that have an ET probability file in a flat model directory."""
    naming = naming or NamingScheme()
    ids = set()
    for path in Path(model_dir).iterdir():
        for ext in naming.extensions:
            tail = naming.prob_et + ext
            if path.name.endswith(tail):
                ids.add(path.name[: -len(tail)])
    return sorted(ids)
