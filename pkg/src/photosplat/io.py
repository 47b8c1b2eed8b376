"""Datasets, image/point-cloud files and the key-value config format.

Dataset directory layout::

    cameras.txt            one line per view (see CAMERAS_HEADER)
    images/NNNNN.png       8- or 16-bit grayscale (colour files: first channel)
    init_points.ply        optional initial point cloud
    scene.txt              optional "key = value" metadata (name, units)
    gt/normal_NNNNN.png    optional 16-bit RGB normals encoded as (n + 1) / 2
    gt/albedo_NNNNN.png    optional 16-bit albedo (0 marks pixels without ground truth)
    gt/points.ply          optional ground-truth surface points

The sun vector is the unit vector from the scene towards the Sun in world
coordinates.  The camera translation ``t`` maps world points to camera
coordinates as ``x_C = R x_W + t``.
"""
from __future__ import annotations

import dataclasses
import os
import warnings
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import DimensionMismatch, MalformedPose, MissingFile, ValidationError
from .geometry import CameraModel
from .reflectance import ImageCalibration

CAMERAS_HEADER = "# name fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz sx sy sz split"
SPLITS = ("train", "test")
U16 = 65535.0


@dataclass(eq=False)
class ViewContext:
    name: str
    camera: CameraModel
    sun: np.ndarray
    image: np.ndarray | None = None
    split: str = "train"
    calibration: ImageCalibration = field(default_factory=ImageCalibration)
    gt_normal: np.ndarray | None = None
    gt_albedo: np.ndarray | None = None

    @property
    def gt_mask(self):
        return None if self.gt_albedo is None else self.gt_albedo > 0

    def with_calibration(self, scale, bias):
        return dataclasses.replace(self, calibration=ImageCalibration(float(scale), float(bias)))


@dataclass(eq=False)
class SceneDataset:
    views: list
    init_points: np.ndarray | None = None
    gt_points: np.ndarray | None = None
    name: str = "scene"
    units: str = "m"

    def split(self, which):
        return [v for v in self.views if v.split == which]

    @property
    def train_indices(self):
        return [i for i, v in enumerate(self.views) if v.split == "train"]

    @property
    def test_indices(self):
        return [i for i, v in enumerate(self.views) if v.split == "test"]


# ---------------------------------------------------------------- quantisation

def quantize16(x):
    return np.round(np.clip(x, 0.0, 1.0) * U16) / U16


def encode_normals(n):
    return np.round(np.clip((np.asarray(n) + 1.0) / 2.0, 0.0, 1.0) * U16).astype(np.uint16)


def decode_normals(q):
    return q.astype(np.float64) / U16 * 2.0 - 1.0


def quantize_normals(n):
    return decode_normals(encode_normals(n))


# ---------------------------------------------------------------- images

def write_png(path, img, bits=16):
    """Write a float image in [0, 1] (H, W) or (H, W, 3) as 8/16-bit PNG."""
    img = np.asarray(img, dtype=np.float64)
    peak = 255.0 if bits == 8 else U16
    q = np.round(np.clip(img, 0.0, 1.0) * peak).astype(np.uint8 if bits == 8 else np.uint16)
    if q.ndim == 3:
        q = q[..., ::-1]
    if not cv2.imwrite(str(path), q):
        raise OSError(f"could not write {path}")


def read_png(path, channels=1):
    """Read a PNG as floats normalised by the bit-depth maximum."""
    if not os.path.exists(path):
        raise MissingFile(f"missing image {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValidationError(f"could not decode {path}")
    peak = 255.0 if raw.dtype == np.uint8 else U16
    if raw.ndim == 3:
        raw = raw[..., :3][..., ::-1]
        if channels == 1:
            raw = raw[..., 0]
    elif channels == 3:
        raw = np.repeat(raw[..., None], 3, axis=-1)
    return raw, raw.astype(np.float64) / peak


MAP_MAGIC = b"PSMAP1\0\0"


def write_map(path, arr):
    """Raw float32 map: 8-byte magic, ``<3I`` (height, width, channels), then row-major data."""
    arr = np.asarray(arr, dtype="<f4")
    h, w = arr.shape[:2]
    c = 1 if arr.ndim == 2 else arr.shape[2]
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(np.array([h, w, c], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_map(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAP_MAGIC):
        raise ValidationError(f"{path}: not a raw map file")
    h, w, c = np.frombuffer(data, dtype="<u4", count=3, offset=8)
    arr = np.frombuffer(data, dtype="<f4", offset=20).astype(np.float64)
    return arr.reshape((h, w) if c == 1 else (h, w, c))


def export_maps(directory, name, bundle, bits=16):
    """PNG and raw float exports of a render.

    Intensity is written as 3 identical channels, normals as ``(n + 1) / 2``
    and depth divided by its largest valid value.
    """
    os.makedirs(directory, exist_ok=True)
    write_png(os.path.join(directory, f"intensity_{name}.png"),
              np.repeat(bundle.intensity[..., None], 3, axis=-1), bits)
    write_png(os.path.join(directory, f"normal_{name}.png"), (bundle.normal + 1.0) / 2.0, bits)
    valid = bundle.depth > 0
    peak = bundle.depth[valid].max() if valid.any() else 1.0
    write_png(os.path.join(directory, f"depth_{name}.png"), np.where(valid, bundle.depth / peak, 0.0),
              bits)
    maps = {"intensity": bundle.intensity, "depth": bundle.depth, "normal": bundle.normal,
            "accumulation": bundle.accumulation}
    if bundle.albedo is not None:
        write_png(os.path.join(directory, f"albedo_{name}.png"), bundle.albedo, bits)
        maps["albedo"] = bundle.albedo
    for key, arr in maps.items():
        write_map(os.path.join(directory, f"{key}_{name}.f32"), arr)


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1", "short": "<i2",
              "ushort": "<u2", "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4"}


def write_ply(path, vertices, faces=None, precision="float", **props):
    """Binary little-endian PLY (float32 or ``precision="double"``), optional faces."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    cols = [("x", vertices[:, 0]), ("y", vertices[:, 1]), ("z", vertices[:, 2])]
    for name, arr in props.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            for i, suffix in enumerate("xyz"[:arr.shape[1]]):
                cols.append((f"{name[0]}{suffix}" if name == "normal" else f"{name}_{i}", arr[:, i]))
        else:
            cols.append((name, arr))
    dtype = np.dtype([(c, _PLY_TYPES[precision]) for c, _ in cols])
    rec = np.empty(len(vertices), dtype=dtype)
    for c, arr in cols:
        rec[c] = arr
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertices)}"]
    header += [f"property {precision} {c}" for c, _ in cols]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
        if faces is not None:
            frec = np.empty(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            frec["n"] = 3
            frec["i"] = faces
            fh.write(frec.tobytes())


def read_ply(path):
    """Vertex properties of a PLY file as a dict of float64 arrays (ascii or binary LE)."""
    if not os.path.exists(path):
        raise MissingFile(f"missing point cloud {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValidationError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt, n, props, in_vertex = None, 0, [], False
    for ln in lines:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValidationError(f"{path}: list properties on vertices unsupported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")[:n]
        arr = np.array([[float(v) for v in r.split()[:len(props)]] for r in rows]).reshape(n, -1)
        return {name: arr[:, i] for i, (name, _) in enumerate(props)}
    if fmt != "binary_little_endian":
        raise ValidationError(f"{path}: unsupported PLY format {fmt}")
    rec = np.frombuffer(data, dtype=np.dtype(props), count=n, offset=body_start)
    return {name: rec[name].astype(np.float64) for name, _ in props}


def read_points(path):
    v = read_ply(path)
    return np.stack([v["x"], v["y"], v["z"]], axis=1)


def write_obj(path, vertices, faces, normals=None):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if normals is not None:
            for n in normals:
                fh.write(f"vn {n[0]:.6g} {n[1]:.6g} {n[2]:.6g}\n")
        for f in np.asarray(faces) + 1:
            if normals is None:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
            else:
                fh.write(f"f {f[0]}//{f[0]} {f[1]}//{f[1]} {f[2]}//{f[2]}\n")


# ---------------------------------------------------------------- key-value text

def parse_key_values(text):
    """``key = value`` lines; ``#`` starts a comment.  Values are typed best-effort."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _typed(value)
    return out


def _typed(value):
    low = value.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value.strip("\"'")


def format_key_values(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


# ---------------------------------------------------------------- datasets

def _fmt(x):
    return "%.17g" % x


def save_dataset(dataset: SceneDataset, path):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    lines = [CAMERAS_HEADER]
    for i, v in enumerate(dataset.views):
        c = v.camera
        nums = [c.fx, c.fy, c.cx, c.cy, *c.R.reshape(-1), *c.t, *np.asarray(v.sun, float)]
        lines.append(" ".join([v.name] + [_fmt(x) for x in nums] + [v.split]))
        if v.image is not None:
            write_png(os.path.join(path, "images", f"{v.name}.png"), v.image)
        if v.gt_normal is not None or v.gt_albedo is not None:
            os.makedirs(os.path.join(path, "gt"), exist_ok=True)
        if v.gt_normal is not None:
            q = encode_normals(v.gt_normal)[..., ::-1]
            cv2.imwrite(os.path.join(path, "gt", f"normal_{v.name}.png"), q)
        if v.gt_albedo is not None:
            write_png(os.path.join(path, "gt", f"albedo_{v.name}.png"), v.gt_albedo)
    with open(os.path.join(path, "cameras.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "scene.txt"), "w") as fh:
        fh.write(format_key_values({"name": dataset.name, "units": dataset.units}))
    if dataset.init_points is not None:
        write_ply(os.path.join(path, "init_points.ply"), dataset.init_points, precision="double")
    if dataset.gt_points is not None:
        os.makedirs(os.path.join(path, "gt"), exist_ok=True)
        write_ply(os.path.join(path, "gt", "points.ply"), dataset.gt_points, precision="double")


def _rotation(name, values):
    R = np.asarray(values, dtype=np.float64).reshape(3, 3)
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > 1e-3 or np.linalg.det(R) <= 0:
        raise MalformedPose(f"view {name}: rotation is not orthonormal (error {err:.2e})")
    if err > 1e-12:
        warnings.warn(f"view {name}: re-orthonormalising rotation (error {err:.2e})")
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
    return R


def load_dataset(path) -> SceneDataset:
    cams_path = os.path.join(path, "cameras.txt")
    if not os.path.exists(cams_path):
        raise MissingFile(f"missing {cams_path}")
    views = []
    with open(cams_path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    for row in rows:
        name = row[0]
        if len(row) < 20:
            raise MissingFile(f"view {name}: cameras.txt line lacks the sun vector or pose fields")
        if len(row) != 21:
            raise ValidationError(f"view {name}: expected 21 fields, found {len(row)}")
        try:
            nums = [float(x) for x in row[1:20]]
        except ValueError as e:
            raise MalformedPose(f"view {name}: {e}") from None
        if not all(np.isfinite(nums)):
            raise MalformedPose(f"view {name}: non-finite pose or sun value")
        split = row[20]
        if split not in SPLITS:
            raise ValidationError(f"view {name}: unknown split {split!r}")
        fx, fy, cx, cy = nums[:4]
        R = _rotation(name, nums[4:13])
        t = np.array(nums[13:16])
        sun = np.array(nums[16:19])
        if abs(np.linalg.norm(sun) - 1.0) > 1e-6:
            raise ValidationError(f"view {name}: sun vector is not unit length")
        _, img = read_png(os.path.join(path, "images", f"{name}.png"))
        H, W = img.shape
        if not (0 <= cx <= W - 1 and 0 <= cy <= H - 1):
            raise DimensionMismatch(f"view {name}: principal point outside {W}x{H} image")
        cam = CameraModel(fx, fy, cx, cy, R, t, W, H)
        gt_n = gt_a = None
        npath = os.path.join(path, "gt", f"normal_{name}.png")
        apath = os.path.join(path, "gt", f"albedo_{name}.png")
        if os.path.exists(npath):
            raw, _ = read_png(npath, channels=3)
            gt_n = decode_normals(raw)
            if gt_n.shape[:2] != (H, W):
                raise DimensionMismatch(f"view {name}: ground-truth normal map size differs")
        if os.path.exists(apath):
            _, gt_a = read_png(apath)
            if gt_a.shape != (H, W):
                raise DimensionMismatch(f"view {name}: ground-truth albedo map size differs")
        views.append(ViewContext(name, cam, sun, img, split, ImageCalibration(), gt_n, gt_a))
    if not views:
        raise ValidationError(f"{cams_path}: no views")
    meta = {}
    if os.path.exists(os.path.join(path, "scene.txt")):
        with open(os.path.join(path, "scene.txt")) as fh:
            meta = parse_key_values(fh.read())
    init = gtp = None
    if os.path.exists(os.path.join(path, "init_points.ply")):
        init = read_points(os.path.join(path, "init_points.ply"))
    if os.path.exists(os.path.join(path, "gt", "points.ply")):
        gtp = read_points(os.path.join(path, "gt", "points.ply"))
    return SceneDataset(views, init, gtp, str(meta.get("name", "scene")), str(meta.get("units", "m")))
