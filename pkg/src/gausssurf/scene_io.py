"""Gaussian scenes, cameras, splat-PLY I/O and analytic synthetic scenes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._geometry import floored_scales, normalize_quat, quat_to_rotmat, rotmat_to_quat
from .ply import PlyFormatError, read_ply, write_ply

SH_C0 = 0.28209479177387814
# tangent std of synthetic splats relative to the mean sample spacing on the surface
TANGENT_FACTOR = 0.6
QUAT_TOL = 1e-6


class EmptySceneError(ValueError):
    pass


class CameraValidationError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Normalize quaternions, leaving those already unit within 1e-6 untouched.

    Skipping near-unit rows keeps float32 round trips bit-exact and makes the
    operation idempotent.
    """
    q = np.array(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    fix = np.abs(norms - 1.0) > QUAT_TOL
    if np.any(fix):
        q[fix] = normalize_quat(q[fix])
    return q


@dataclass
class Gaussian3D:
    mean: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: float
    sh: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return floored_scales(self.log_scale)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rot)

    @property
    def covariance(self) -> np.ndarray:
        R = self.rotation_matrix
        return R @ np.diag(self.scale**2) @ R.T


@dataclass
class Scene:
    """Structure-of-arrays Gaussian scene.

    ``sh`` has shape ``(N, (sh_degree + 1)**2, 3)`` with band 0 first.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh[:, None, :]
        self.sh = sh.reshape(n, -1, 3)
        k = self.sh.shape[1]
        deg = int(round(math.sqrt(k))) - 1
        if (deg + 1) ** 2 != k:
            raise ValueError(f"SH coefficient count {k} is not a square")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
                          float(self.opacity_logits[i]), self.sh[i].copy())

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh.shape[1]))) - 1

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return floored_scales(self.log_scales)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def copy(self) -> "Scene":
        return Scene(self.means.copy(), self.log_scales.copy(), self.quats.copy(),
                     self.opacity_logits.copy(), self.sh.copy())

    def subset(self, idx) -> "Scene":
        return Scene(self.means[idx], self.log_scales[idx], self.quats[idx],
                     self.opacity_logits[idx], self.sh[idx])

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "Scene":
        if not gaussians:
            raise EmptySceneError("scene has no Gaussians")
        return cls(np.stack([g.mean for g in gaussians]),
                   np.stack([g.log_scale for g in gaussians]),
                   np.stack([g.rot for g in gaussians]),
                   np.array([g.opacity_logit for g in gaussians]),
                   np.stack([np.asarray(g.sh).reshape(-1, 3) for g in gaussians]))


# ---------------------------------------------------------------------------
# splat PLY

def _sh_rest_names(n_rest: int) -> list[str]:
    return [f"f_rest_{i}" for i in range(3 * n_rest)]


def splat_ply_properties(sh_degree: int) -> list[str]:
    """Vertex property order of the reference checkpoint layout."""
    n_rest = (sh_degree + 1) ** 2 - 1
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + _sh_rest_names(n_rest)
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def load_gaussian_ply(path) -> Scene:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such splat PLY: {str(path)!r}")
    data = read_ply(path)
    if "vertex" not in data:
        raise PlyFormatError(f"{path}: missing 'vertex' element")
    v = data["vertex"]
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    for name in required:
        if name not in v:
            raise PlyFormatError(f"{path}: missing required vertex property {name!r}")
    n = len(v["x"])
    if n == 0:
        raise EmptySceneError(f"{path}: PLY has zero vertices")
    rest = sorted((k for k in v if k.startswith("f_rest_")), key=lambda k: int(k[7:]))
    if len(rest) % 3:
        raise PlyFormatError(f"{path}: f_rest count {len(rest)} not divisible by 3")
    n_rest = len(rest) // 3
    k = n_rest + 1
    if int(round(math.sqrt(k))) ** 2 != k:
        raise PlyFormatError(f"{path}: f_rest count {len(rest)} does not match any SH degree")

    f64 = lambda name: np.asarray(v[name], dtype=np.float64)  # noqa: E731
    means = np.stack([f64("x"), f64("y"), f64("z")], axis=1)
    sh = np.zeros((n, k, 3))
    sh[:, 0] = np.stack([f64(f"f_dc_{c}") for c in range(3)], axis=1)
    # f_rest is channel-major: index = channel * n_rest + coefficient
    for i, name in enumerate(rest):
        c, j = divmod(i, n_rest)
        sh[:, j + 1, c] = f64(name)
    log_scales = np.stack([f64(f"scale_{i}") for i in range(3)], axis=1)
    quats = normalize_quaternions(np.stack([f64(f"rot_{i}") for i in range(4)], axis=1))
    return Scene(means, log_scales, quats, f64("opacity"), sh)


def save_gaussian_ply(scene: Scene, path) -> None:
    if path is None or str(path) == "":
        raise ValueError("empty output path")
    n = len(scene)
    if n == 0:
        raise EmptySceneError("refusing to save an empty scene")
    n_rest = scene.sh.shape[1] - 1
    props: dict[str, np.ndarray] = {}
    f32 = lambda a: np.asarray(a, dtype=np.float32)  # noqa: E731
    for i, name in enumerate("xyz"):
        props[name] = f32(scene.means[:, i])
    for name in ("nx", "ny", "nz"):
        props[name] = np.zeros(n, dtype=np.float32)
    for c in range(3):
        props[f"f_dc_{c}"] = f32(scene.sh[:, 0, c])
    for i, name in enumerate(_sh_rest_names(n_rest)):
        c, j = divmod(i, n_rest)
        props[name] = f32(scene.sh[:, j + 1, c])
    props["opacity"] = f32(scene.opacity_logits)
    for i in range(3):
        props[f"scale_{i}"] = f32(scene.log_scales[:, i])
    for i in range(4):
        props[f"rot_{i}"] = f32(scene.quats[:, i])
    write_ply(path, {"vertex": props})


def splat_record_size(sh_degree: int) -> int:
    return 4 * len(splat_ply_properties(sh_degree))


# ---------------------------------------------------------------------------
# cameras

_GL_FLIP = np.diag([1.0, -1.0, -1.0, 1.0])


@dataclass
class Camera:
    """Pinhole camera.

    ``convention`` says how ``world_to_cam`` is expressed: ``"opencv"`` (x right,
    y down, looking down +z; the default) or ``"opengl"`` (y up, looking down -z).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))
    convention: str = "opencv"

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if self.convention not in ("opencv", "opengl"):
            raise CameraValidationError(f"unknown camera convention {self.convention!r}")

    def validate(self, tol: float = 1e-4) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise CameraValidationError("fx and fy must be positive")
        if self.width <= 0 or self.height <= 0:
            raise CameraValidationError("image size must be positive")
        R = self.world_to_cam[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise CameraValidationError("world_to_cam rotation block is not orthonormal with det +1")
        if np.abs(self.world_to_cam[3] - [0, 0, 0, 1]).max() > tol:
            raise CameraValidationError("world_to_cam last row must be (0,0,0,1)")

    @property
    def view(self) -> np.ndarray:
        """World to OpenCV-style camera transform used by the rasterizer."""
        if self.convention == "opengl":
            return _GL_FLIP @ self.world_to_cam
        return self.world_to_cam

    @property
    def rotation(self) -> np.ndarray:
        return self.view[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.view[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction in world coordinates."""
        return self.rotation[2].copy()

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Pixel coordinates and camera depth of world points."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def pixel_rays(self, uv: np.ndarray) -> np.ndarray:
        """Unnormalized world-space ray directions with unit camera-z."""
        uv = np.asarray(uv, dtype=np.float64)
        d_cam = np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy,
                          np.ones(uv.shape[:-1])], axis=-1)
        return d_cam @ self.rotation

    def to_dict(self) -> dict:
        d = {"width": int(self.width), "height": int(self.height), "fx": float(self.fx),
             "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
             "world_to_cam": [float(x) for x in self.world_to_cam.reshape(-1)]}
        if self.convention != "opencv":
            d["convention"] = self.convention
        return d


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """OpenCV world_to_cam for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M


def camera_from_dict(d: dict) -> Camera:
    try:
        w2c = d["world_to_cam"]
        if len(w2c) != 16:
            raise CameraValidationError(f"world_to_cam must have 16 floats, got {len(w2c)}")
        cam = Camera(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                     float(d["cx"]), float(d["cy"]), np.array(w2c, dtype=np.float64).reshape(4, 4),
                     d.get("convention", "opencv"))
    except KeyError as exc:
        raise CameraValidationError(f"camera entry missing field {exc.args[0]!r}") from None
    cam.validate()
    return cam


def load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise CameraValidationError("camera file must hold a JSON array")
    return [camera_from_dict(d) for d in raw]


def save_cameras(cams: Sequence[Camera], path) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cams], fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class AnalyticSurface:
    """Ground-truth surface with an exact signed distance (positive outside)."""

    kind: str
    params: dict

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(p - self.center, axis=-1) - self.params["radius"]
        if self.kind == "box":
            h = np.asarray(self.params["extents"], dtype=np.float64) / 2
            q = np.abs(p - self.center) - h
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        if self.kind == "plane":
            n = np.asarray(self.params["normal"], dtype=np.float64)
            n = n / np.linalg.norm(n)
            return p @ n - self.params["offset"]
        raise ValueError(f"unknown surface kind {self.kind!r}")

    @property
    def scale(self) -> float:
        if self.kind == "sphere":
            return float(self.params["radius"])
        if self.kind == "box":
            return float(np.max(self.params["extents"])) / 2
        return float(self.params.get("half_size", 1.0))

    @property
    def center(self) -> np.ndarray:
        if self.kind == "plane":
            n = np.asarray(self.params["normal"], dtype=np.float64)
            n = n / np.linalg.norm(n)
            return n * self.params["offset"]
        return np.asarray(self.params.get("center", (0, 0, 0)), dtype=np.float64)

    def sample(self, n: int, rng: np.random.Generator):
        """Area-uniform points and unit outward normals on the surface."""
        if self.kind == "sphere":
            nrm = rng.normal(size=(n, 3))
            nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
            return self.center + self.params["radius"] * nrm, nrm
        if self.kind == "box":
            ext = np.asarray(self.params["extents"], dtype=np.float64)
            areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
            probs = np.repeat(areas, 2) / (2 * areas.sum())
            face = rng.choice(6, size=n, p=probs)
            axis, side = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
            pts = (rng.random((n, 3)) - 0.5) * ext
            pts[np.arange(n), axis] = side * ext[axis] / 2
            nrm = np.zeros((n, 3))
            nrm[np.arange(n), axis] = side
            return self.center + pts, nrm
        if self.kind == "plane":
            nrm0 = np.asarray(self.params["normal"], dtype=np.float64)
            nrm0 = nrm0 / np.linalg.norm(nrm0)
            t1, t2 = _tangent_basis(nrm0[None])
            hs = self.scale
            uv = (rng.random((n, 2)) * 2 - 1) * hs
            pts = self.center + uv[:, :1] * t1 + uv[:, 1:] * t2
            return pts, np.repeat(nrm0[None], n, axis=0)
        raise ValueError(f"unknown surface kind {self.kind!r}")

    def area(self) -> float:
        if self.kind == "sphere":
            return 4 * math.pi * self.params["radius"] ** 2
        if self.kind == "box":
            e = self.params["extents"]
            return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
        return (2 * self.scale) ** 2

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticSurface":
        return cls(d["kind"], dict(d["params"]))


def _jsonable(params: dict) -> dict:
    return {k: (np.asarray(v).tolist() if isinstance(v, (list, tuple, np.ndarray)) else v)
            for k, v in params.items()}


def _tangent_basis(n: np.ndarray):
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


@dataclass
class SyntheticSpec:
    surface: str = "sphere"
    params: dict = field(default_factory=dict)
    n_gaussians: int = 2000
    noise: float = 0.0
    seed: int = 0
    thin_scale: float = 0.01        # relative to the object scale
    n_cameras: int = 24
    image_size: int = 64
    camera_distance: float = 3.0    # relative to the object scale
    sh_degree: int = 0

    def validate(self) -> None:
        if self.surface not in ("sphere", "box", "plane"):
            raise ValueError(f"unknown synthetic surface {self.surface!r}")
        if self.n_gaussians <= 0:
            raise ValueError("n_gaussians must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.n_cameras <= 0 or self.image_size < 8:
            raise ValueError("need at least one camera and an image size >= 8")

    def surface_object(self) -> AnalyticSurface:
        p = dict(self.params)
        if self.surface == "sphere":
            p.setdefault("center", [0.0, 0.0, 0.0])
            p.setdefault("radius", 1.0)
        elif self.surface == "box":
            p.setdefault("center", [0.0, 0.0, 0.0])
            p.setdefault("extents", [1.6, 1.2, 1.0])
        else:
            p.setdefault("normal", [0.0, 0.0, 1.0])
            p.setdefault("offset", 0.0)
            p.setdefault("half_size", 1.0)
        return AnalyticSurface(self.surface, p)


def _surface_color(points: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
    q = (points - center) / scale
    return 0.5 + 0.35 * np.stack([np.sin(3.0 * q[:, 0] + 1.0),
                                  np.sin(2.5 * q[:, 1] - 0.5) * np.cos(1.5 * q[:, 2]),
                                  np.cos(3.5 * q[:, 2] + 0.3 * q[:, 0])], axis=1)


def synthetic_cameras(surface: AnalyticSurface, n: int, image_size: int, distance: float) -> list[Camera]:
    """Cameras on a Fibonacci sphere (hemisphere for planes) looking at the object."""
    center, scale = surface.center, surface.scale
    i = np.arange(n) + 0.5
    if surface.kind == "plane":
        z = 1.0 - 0.8 * i / n           # stay well above the grazing angle
    else:
        z = 1.0 - 2.0 * i / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if surface.kind == "plane":
        nrm = np.asarray(surface.params["normal"], dtype=np.float64)
        nrm = nrm / np.linalg.norm(nrm)
        t1, t2 = _tangent_basis(nrm[None])
        dirs = dirs[:, :1] * t1 + dirs[:, 1:2] * t2 + dirs[:, 2:] * nrm
    dist = distance * scale
    half_extent = 1.3 * scale * (1.4 if surface.kind != "sphere" else 1.0)
    f = 0.5 * image_size * math.sqrt(dist**2 - scale**2 if dist > scale else dist**2) / half_extent
    cams = []
    for d in dirs:
        cams.append(Camera(image_size, image_size, f, f, image_size / 2, image_size / 2,
                           look_at(center + dist * d, center)))
    return cams


def make_synthetic_scene(spec: SyntheticSpec):
    """Gaussians lying flat on an analytic surface, plus cameras and the exact SDF.

    Returns ``(scene, cameras, surface)`` where ``surface`` is callable as the SDF.
    """
    spec.validate()
    surface = spec.surface_object()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_gaussians
    pts, nrm = surface.sample(n, rng)
    t1, t2 = _tangent_basis(nrm)
    ang = rng.uniform(0, 2 * math.pi, size=(n, 1))
    a1 = np.cos(ang) * t1 + np.sin(ang) * t2
    a2 = np.cross(nrm, a1)
    R = np.stack([nrm, a1, a2], axis=2)   # columns: thin axis first
    spacing = math.sqrt(surface.area() / n)
    tangent = TANGENT_FACTOR * spacing
    thin = spec.thin_scale * surface.scale
    log_scales = np.log(np.column_stack([np.full(n, thin), np.full(n, tangent), np.full(n, tangent)]))
    log_scales[:, 1:] += rng.normal(0.0, 0.1, size=(n, 2))
    quats = rotmat_to_quat(R)
    k = (spec.sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0] = (_surface_color(pts, surface.center, surface.scale) - 0.5) / SH_C0
    opacity_logits = np.full(n, 10.0)
    if spec.noise > 0:
        pts = pts + rng.uniform(-spec.noise, spec.noise, size=(n, 1)) * nrm
    scene = Scene(pts, log_scales, quats, opacity_logits, sh)
    cams = synthetic_cameras(surface, spec.n_cameras, spec.image_size, spec.camera_distance)
    return scene, cams, surface


def clean_spec(spec: SyntheticSpec) -> SyntheticSpec:
    return replace(spec, noise=0.0)
