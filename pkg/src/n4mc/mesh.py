"""Triangle meshes: I/O (OBJ, PLY), sequence normalization and surface sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, MeshFormatError, ValidationError

# canonical domain is [-1, 1]^3; meshes are fitted into [-MARGIN, MARGIN]^3
MARGIN = 0.95


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if not np.all(np.isfinite(v)):
            raise ValidationError("mesh vertices contain NaN or Inf")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValidationError(
                    f"face index out of range [0, {len(v)}): min={f.min()}, max={f.max()}")
            if np.any((f[:, 0] == f[:, 1]) & (f[:, 1] == f[:, 2])):
                raise ValidationError("degenerate face with three identical indices")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @cached_property
    def _face_cross(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        return _unit(self._face_cross)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        # area weighted; the unnormalized cross product already carries 2*area
        acc = np.zeros_like(self.vertices)
        for c in range(3):
            np.add.at(acc, self.faces[:, c], self._face_cross)
        return _unit(acc)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise EmptyInputError("bounds of an empty mesh")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)


def _unit(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    out = np.zeros_like(a)
    np.divide(a, n, out=out, where=n > 0)
    return out


@dataclass(frozen=True)
class NormalizationTransform:
    """Uniform scale about ``center``: ``canonical = (world - center) * scale``."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValidationError(f"normalization scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center

    def apply_mesh(self, mesh: TriangleMesh) -> TriangleMesh:
        return TriangleMesh(self.apply(mesh.vertices), mesh.faces)

    def inverse_mesh(self, mesh: TriangleMesh) -> TriangleMesh:
        return TriangleMesh(self.inverse(mesh.vertices), mesh.faces)


def normalize_sequence(meshes: list[TriangleMesh]) -> tuple[list[TriangleMesh], NormalizationTransform]:
    """Fit the union bounding box of all frames into ``[-0.95, 0.95]^3``.

    One transform is shared by every frame, so relative motion is preserved.
    """
    if not meshes:
        raise EmptyInputError("cannot normalize an empty sequence")
    lows, highs = zip(*(m.bounds() for m in meshes))
    lo = np.min(lows, axis=0)
    hi = np.max(highs, axis=0)
    half = 0.5 * float(np.max(hi - lo))
    if half <= 0:
        raise ValidationError("degenerate bounding box: the sequence has zero extent")
    xf = NormalizationTransform(center=0.5 * (lo + hi), scale=MARGIN / half)
    return [xf.apply_mesh(m) for m in meshes], xf


def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples. Returns ``(points, normals)``, each ``(count, 3)``."""
    if count < 1:
        raise ValidationError(f"sample count must be >= 1, got {count}")
    areas = mesh.face_areas if not mesh.is_empty else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise ValidationError("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    f = mesh.faces[tri]
    v = mesh.vertices
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, mesh.face_normals[tri].copy()


# ---------------------------------------------------------------------------
# file I/O


def load_mesh(path: str | os.PathLike) -> TriangleMesh:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        mesh = _read_obj(path)
    elif ext == ".ply":
        mesh = _read_ply(path)
    else:
        raise MeshFormatError(f"unsupported mesh format '{ext}' (expected .obj or .ply)")
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        raise EmptyInputError(f"{path} contains no geometry")
    return mesh


def save_mesh(mesh: TriangleMesh, path: str | os.PathLike, binary: bool = True) -> None:
    if mesh.is_empty or len(mesh.vertices) == 0:
        raise EmptyInputError("refusing to save an empty mesh")
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        _write_obj(mesh, path)
    elif ext == ".ply":
        _write_ply(mesh, path, binary=binary)
    else:
        raise MeshFormatError(f"unsupported mesh format '{ext}' (expected .obj or .ply)")


def _read_obj(path: Path) -> TriangleMesh:
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except (IndexError, ValueError):
                    raise MeshFormatError("malformed vertex record", f"line {lineno}") from None
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshFormatError(
                        f"only triangular faces are supported, got {len(parts) - 1} corners",
                        f"line {lineno}")
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise MeshFormatError(f"malformed face index '{tok}'", f"line {lineno}") from None
                    if i == 0:
                        raise MeshFormatError("OBJ indices are 1-based; found index 0", f"line {lineno}")
                    i = i - 1 if i > 0 else len(verts) + i
                    if not 0 <= i < len(verts):
                        raise MeshFormatError(f"face index {tok} out of range", f"line {lineno}")
                    idx.append(i)
                faces.append(tuple(idx))
    try:
        return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                            np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValidationError as exc:
        raise MeshFormatError(str(exc), str(path)) from None


def _write_obj(mesh: TriangleMesh, path: Path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("".join(f"v {x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist()))
        fh.write("".join(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist()))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path: Path) -> TriangleMesh:
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("missing PLY header", "byte 0")
    nl = data.find(b"\n", end)
    body_start = nl + 1 if nl >= 0 else len(data)
    header = data[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements: list[tuple[str, int, list]] = []
    for lineno, line in enumerate(header, start=1):
        p = line.split()
        if not p:
            continue
        if p[0] == "format":
            fmt = p[1]
        elif p[0] == "element":
            elements.append((p[1], int(p[2]), []))
        elif p[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", f"line {lineno}")
            if p[1] == "list":
                try:
                    elements[-1][2].append((p[4], "list", _PLY_TYPES[p[2]], _PLY_TYPES[p[3]]))
                except KeyError:
                    raise MeshFormatError(f"unknown PLY type in '{line}'", f"line {lineno}") from None
            else:
                if p[1] not in _PLY_TYPES:
                    raise MeshFormatError(f"unknown PLY type '{p[1]}'", f"line {lineno}")
                elements[-1][2].append((p[2], "scalar", _PLY_TYPES[p[1]], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"unsupported PLY format '{fmt}'", "header")

    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for r in range(count):
                row = {}
                for pname, kind, t, it in props:
                    try:
                        if kind == "list":
                            n = int(tokens[pos])
                            pos += 1
                            row[pname] = [int(x) for x in tokens[pos:pos + n]]
                            if len(row[pname]) != n:
                                raise IndexError
                            pos += n
                        else:
                            row[pname] = float(tokens[pos])
                            pos += 1
                    except (IndexError, ValueError):
                        raise MeshFormatError(
                            f"truncated or malformed '{name}' record {r}", f"token {pos}") from None
                rows.append(row)
            if name == "vertex":
                verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64).reshape(-1, 3)
            elif name == "face":
                faces = _collect_faces([_face_list(r) for r in rows])
    else:
        pos = body_start
        for name, count, props in elements:
            if all(kind == "scalar" for _, kind, _, _ in props):
                dt = np.dtype([(pn, "<" + t) for pn, _, t, _ in props])
                nbytes = dt.itemsize * count
                if pos + nbytes > len(data):
                    raise MeshFormatError(f"truncated '{name}' block", f"byte {pos}")
                arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                pos += nbytes
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            else:
                lists = []
                for r in range(count):
                    lst = None
                    for pname, kind, t, it in props:
                        if kind == "list":
                            csize = np.dtype(t).itemsize
                            if pos + csize > len(data):
                                raise MeshFormatError(f"truncated '{name}' record {r}", f"byte {pos}")
                            n = int(np.frombuffer(data, dtype="<" + t, count=1, offset=pos)[0])
                            pos += csize
                            isz = np.dtype(it).itemsize
                            if pos + n * isz > len(data):
                                raise MeshFormatError(f"truncated '{name}' record {r}", f"byte {pos}")
                            vals = np.frombuffer(data, dtype="<" + it, count=n, offset=pos)
                            pos += n * isz
                            if pname in ("vertex_indices", "vertex_index"):
                                lst = vals.tolist()
                        else:
                            pos += np.dtype(t).itemsize
                    lists.append(lst)
                if name == "face":
                    faces = _collect_faces(lists)
    try:
        return TriangleMesh(verts, faces)
    except ValidationError as exc:
        raise MeshFormatError(str(exc), str(path)) from None


def _face_list(row: dict) -> list[int] | None:
    return row.get("vertex_indices", row.get("vertex_index"))


def _collect_faces(lists) -> np.ndarray:
    for i, lst in enumerate(lists):
        if lst is None:
            raise MeshFormatError("face element without vertex_indices", f"face {i}")
        if len(lst) != 3:
            raise MeshFormatError(f"only triangular faces are supported, got {len(lst)} corners",
                                  f"face {i}")
    return np.array(lists, dtype=np.int64).reshape(-1, 3)


def _write_ply(mesh: TriangleMesh, path: Path, binary: bool = True) -> None:
    nv, nf = len(mesh.vertices), len(mesh.faces)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {nv}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f8").tobytes())
            rec = np.zeros(nf, dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = mesh.faces
            fh.write(rec.tobytes())
        else:
            fh.write("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist()).encode())
            fh.write("".join(f"3 {a} {b} {c}\n" for a, b, c in mesh.faces.tolist()).encode())

