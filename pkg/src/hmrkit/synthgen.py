"""Procedural training data: posed capsule figures, renders and ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .meshtopo import (
    JOINT_NAMES,
    JOINT_PARENTS,
    ROOT,
    SEGMENTS,
    TemplateMesh,
    project_points,
    render_gt_heatmaps,
)

K = len(JOINT_NAMES)
BACKGROUND = np.array([0.15, 0.16, 0.20])
OCCLUDER = np.array([0.45, 0.45, 0.45])
SEGMENT_COLORS = np.array(
    [
        [0.85, 0.85, 0.80],  # torso
        [0.70, 0.70, 0.65],  # hips
        [0.80, 0.75, 0.55],  # clavicle
        [0.95, 0.80, 0.65],  # head
        [0.90, 0.30, 0.25],  # r upper arm
        [0.95, 0.55, 0.20],  # r forearm
        [0.25, 0.45, 0.90],  # l upper arm
        [0.30, 0.75, 0.95],  # l forearm
        [0.80, 0.20, 0.60],  # r thigh
        [0.95, 0.45, 0.75],  # r shin
        [0.20, 0.70, 0.35],  # l thigh
        [0.55, 0.90, 0.40],  # l shin
    ]
)


def _limits(spec: dict[str, float | tuple]) -> np.ndarray:
    """(K, 3, 2) per-axis [min, max] radians; joints not listed are locked."""
    out = np.zeros((K, 3, 2))
    for name, per_axis in spec.items():
        j = JOINT_NAMES.index(name)
        for axis, bound in enumerate(per_axis):
            lo, hi = (-bound, bound) if np.isscalar(bound) else bound
            out[j, axis] = (lo, hi)
    return out


DEFAULT_LIMITS = _limits(
    {
        "neck": (0.25, 0.25, 0.2),
        "r_shoulder": (0.6, 0.3, 0.7),
        "l_shoulder": (0.6, 0.3, 0.7),
        "r_elbow": ((-1.2, 0.0), 0.2, 0.3),
        "l_elbow": ((-1.2, 0.0), 0.2, 0.3),
        "r_hip": (0.6, 0.2, (-0.1, 0.4)),
        "l_hip": (0.6, 0.2, (-0.4, 0.1)),
        "r_knee": ((0.0, 1.2), 0.0, 0.0),
        "l_knee": ((0.0, 1.2), 0.0, 0.0),
    }
)
DEFAULT_ROOT_LIMITS = np.array([[-0.15, 0.15], [-0.5, 0.5], [-0.1, 0.1]])


@dataclass
class SkeletonPose:
    joint_rotations: np.ndarray  # (K, 3) axis-angle, rotation applied at each joint to its subtree
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    root_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def rest(cls) -> "SkeletonPose":
        return cls(np.zeros((K, 3)))


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    heatmap_size: int = 16
    occlusion: bool = False
    frame_fill: float = 0.7
    limits: np.ndarray = field(default_factory=lambda: DEFAULT_LIMITS)
    root_limits: np.ndarray = field(default_factory=lambda: DEFAULT_ROOT_LIMITS)


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, S, S) in [0, 1]
    gt_coarse: np.ndarray
    gt_dense: np.ndarray
    gt_joints3d: np.ndarray
    gt_joints2d: np.ndarray
    gt_heatmaps: np.ndarray  # (N_c, h, w) one-hot
    camera: np.ndarray  # (s, tx, ty)
    seed: int


def sample_pose(seed: int, config: SynthConfig = SynthConfig()) -> SkeletonPose:
    rng = np.random.default_rng(seed)
    lim = config.limits
    rot = rng.uniform(lim[..., 0], lim[..., 1])
    rroot = rng.uniform(config.root_limits[:, 0], config.root_limits[:, 1])
    return SkeletonPose(joint_rotations=rot, root_translation=np.zeros(3), root_rotation=rroot)


def within_limits(pose: SkeletonPose, config: SynthConfig = SynthConfig()) -> bool:
    lim = config.limits
    r = pose.joint_rotations
    rl = config.root_limits
    return bool(
        np.all(r >= lim[..., 0]) and np.all(r <= lim[..., 1])
        and np.all(pose.root_rotation >= rl[:, 0]) and np.all(pose.root_rotation <= rl[:, 1])
    )


def _kinematic_order() -> list[int]:
    order, placed = [], {ROOT}
    while len(order) < K:
        for j in range(K):
            if j not in order and JOINT_PARENTS[j] in placed:
                order.append(j)
                placed.add(j)
    return order


KINEMATIC_ORDER = _kinematic_order()


def forward_kinematics(pose: SkeletonPose, rest_joints: np.ndarray):
    """World rotations (K, 3, 3), joint positions (K, 3), root rotation and root position."""
    root_R = Rotation.from_rotvec(pose.root_rotation).as_matrix()
    root_p = np.asarray(pose.root_translation, dtype=np.float64)
    rest_root = rest_joints[[2, 3]].mean(axis=0)
    local = Rotation.from_rotvec(pose.joint_rotations).as_matrix()
    G = np.zeros((K, 3, 3))
    P = np.zeros((K, 3))
    for j in KINEMATIC_ORDER:
        parent = JOINT_PARENTS[j]
        if parent == ROOT:
            pR, pp, rest_parent = root_R, root_p, rest_root
        else:
            pR, pp, rest_parent = G[parent], P[parent], rest_joints[parent]
        P[j] = pp + pR @ (rest_joints[j] - rest_parent)
        G[j] = pR @ local[j]
    return G, P, root_R, root_p


def pose_mesh(pose: SkeletonPose, template: TemplateMesh):
    """Posed (coarse, dense, joints); every coarse vertex follows its capsule rigidly."""
    G, P, root_R, root_p = forward_kinematics(pose, template.rest_joints)
    rest = template.rest_joints
    rest_root = rest[[2, 3]].mean(axis=0)
    coarse = np.empty_like(template.coarse_vertices)
    for si, seg in enumerate(SEGMENTS):
        ids = template.vertex_segment == si
        if seg.driver == ROOT:
            Rm, origin, anchor = root_R, root_p, rest_root
        else:
            Rm, origin, anchor = G[seg.driver], P[seg.driver], rest[seg.driver]
        v = template.coarse_vertices[ids]
        # written as an offset from v so the rest pose reproduces v exactly
        coarse[ids] = v + (origin - anchor) + (v - anchor) @ (Rm - np.eye(3)).T
    dense = template.U @ coarse
    joints = template.R @ dense
    return coarse, dense, joints


def fit_camera(points: np.ndarray, frame_fill: float = 0.7) -> np.ndarray:
    """Weak-perspective camera framing ``points`` to ``frame_fill`` of the image."""
    lo, hi = points[:, :2].min(axis=0), points[:, :2].max(axis=0)
    extent = float(np.max(hi - lo))
    s = 2.0 * frame_fill / extent
    t = -s * 0.5 * (lo + hi)
    return np.array([s, t[0], t[1]])


def rasterize(
    dense_vertices: np.ndarray,
    faces: np.ndarray,
    camera,
    size: int = 64,
    face_colors: np.ndarray | None = None,
) -> np.ndarray:
    """Z-buffered flat-shaded render, returned as (3, size, size) in [0, 1]."""
    image = np.broadcast_to(BACKGROUND[:, None, None], (3, size, size)).copy()
    if len(dense_vertices) == 0 or len(faces) == 0:
        return image
    xy = project_points(dense_vertices, camera)
    px = (xy + 1.0) * 0.5 * size  # continuous pixel coords, pixel i covers [i, i+1)
    z = dense_vertices[:, 2]
    depth = np.full((size, size), np.inf)
    tri = dense_vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(normals, axis=1)
    shade = 0.55 + 0.45 * np.abs(normals[:, 2]) / np.where(norm > 0, norm, 1.0)
    if face_colors is None:
        face_colors = np.ones((len(faces), 3))

    for f, (a, b, c) in enumerate(np.asarray(faces)):
        p0, p1, p2 = px[a], px[b], px[c]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if abs(area) < 1e-12:
            continue
        x0 = max(int(np.floor(min(p0[0], p1[0], p2[0]))), 0)
        x1 = min(int(np.ceil(max(p0[0], p1[0], p2[0]))), size - 1)
        y0 = max(int(np.floor(min(p0[1], p1[1], p2[1]))), 0)
        y1 = min(int(np.ceil(max(p0[1], p1[1], p2[1]))), size - 1)
        if x0 > x1 or y0 > y1:
            continue
        gy, gx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1] + 0.5
        w0 = ((p1[0] - gx) * (p2[1] - gy) - (p2[0] - gx) * (p1[1] - gy)) / area
        w1 = ((p2[0] - gx) * (p0[1] - gy) - (p0[0] - gx) * (p2[1] - gy)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        zz = w0 * z[a] + w1 * z[b] + w2 * z[c]
        region = depth[y0 : y1 + 1, x0 : x1 + 1]
        win = inside & (zz < region)
        region[win] = zz[win]
        colour = face_colors[f] * shade[f]
        for ch in range(3):
            image[ch, y0 : y1 + 1, x0 : x1 + 1][win] = colour[ch]
    return np.clip(image, 0.0, 1.0)


def dense_face_colors(template: TemplateMesh) -> np.ndarray:
    seg = template.dense_segment[template.dense_faces[:, 0]]
    return SEGMENT_COLORS[seg]


def _occlude(image: np.ndarray, rng: np.random.Generator) -> None:
    size = image.shape[-1]
    h, w = rng.integers(size // 6, size // 3, size=2)
    r, c = rng.integers(0, size - h), rng.integers(0, size - w)
    image[:, r : r + h, c : c + w] = OCCLUDER[:, None, None]


def make_sample(seed: int, template: TemplateMesh, config: SynthConfig = SynthConfig()) -> SyntheticSample:
    pose = sample_pose(seed, config)
    coarse, dense, joints = pose_mesh(pose, template)
    camera = fit_camera(dense, config.frame_fill)
    image = rasterize(dense, template.dense_faces, camera, config.image_size, dense_face_colors(template))
    if config.occlusion:
        _occlude(image, np.random.default_rng([seed, 1]))
    hm = config.heatmap_size
    return SyntheticSample(
        image=image,
        gt_coarse=coarse,
        gt_dense=dense,
        gt_joints3d=joints,
        gt_joints2d=project_points(joints, camera),
        gt_heatmaps=render_gt_heatmaps(coarse, camera, (hm, hm)),
        camera=camera,
        seed=int(seed),
    )


def make_dataset(count: int, seed: int, template: TemplateMesh, config: SynthConfig = SynthConfig()):
    """``count`` samples; sample ``i`` is ``make_sample(seed + i)``."""
    return [make_sample(seed + i, template, config) for i in range(count)]


# --------------------------------------------------------------------- dump


def write_ppm(path: str | Path, image_chw: np.ndarray) -> None:
    arr = np.round(np.clip(image_chw, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PPM")


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    arr = np.round(np.clip(gray, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def read_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path))


def dump_sample(sample: SyntheticSample, directory: str | Path) -> Path:
    """Write ``image.ppm``, ``gt.txt`` and ``seed.txt`` into ``directory``.

    ``gt.txt`` holds blocks ``[NAME] rows cols`` followed by row-major rows:
    coarse, dense, joints3d, joints2d, camera (1 x 3) and heatmap_pixels
    (N_c x 2, the (row, col) of each one-hot map).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "image.ppm", sample.image)
    flat = sample.gt_heatmaps.reshape(len(sample.gt_heatmaps), -1).argmax(axis=1)
    w = sample.gt_heatmaps.shape[-1]
    pixels = np.stack([flat // w, flat % w], axis=1)
    lines = ["# hmrkit sample v1"]
    for name, arr, fmt in (
        ("coarse", sample.gt_coarse, ".17g"),
        ("dense", sample.gt_dense, ".17g"),
        ("joints3d", sample.gt_joints3d, ".17g"),
        ("joints2d", sample.gt_joints2d, ".17g"),
        ("camera", sample.camera[None], ".17g"),
        ("heatmap_pixels", pixels, "d"),
    ):
        lines.append(f"[{name}] {arr.shape[0]} {arr.shape[1]}")
        lines.extend(" ".join(format(x, fmt) for x in row) for row in arr)
    (d / "gt.txt").write_text("\n".join(lines) + "\n")
    (d / "seed.txt").write_text(f"{sample.seed}\n")
    return d
