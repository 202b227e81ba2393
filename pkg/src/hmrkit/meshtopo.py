"""Template body mesh, graph structure and the fixed linear maps around it.

The template is a chain of capsules along a 14-joint skeleton. Each capsule
is a closed tube (pole, rings, pole). Capsules are glued along the
kinematic tree by connected sums: one triangle is removed from each side and
the two holes are bridged with a triangular prism. The result is a single
closed genus-0 triangle mesh, so one midpoint subdivision takes V coarse
vertices to V + E = 4V - 6 dense vertices.

Coordinates are metres with +Y pointing down the image and +Z away from the
camera. The pelvis (mid-hip) sits at the origin in rest pose.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndtensor import DimensionError, Tensor, as_tensor, matmul


class TemplateError(RuntimeError):
    """Raised when a generated or loaded template violates its invariants."""


class ConnectivityError(TemplateError):
    pass


class DataGenerationError(RuntimeError):
    pass


class MaskConfigError(ValueError):
    pass


JOINT_NAMES = (
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "neck",
    "head_top",
)
ROOT = -1  # virtual pelvis, the mean of the two hips
HIP_JOINTS = (2, 3)
JOINT_PARENTS = (1, 2, ROOT, ROOT, 3, 4, 7, 8, 12, 12, 9, 10, ROOT, 12)

REST_JOINTS = np.array(
    [
        [-0.10, 0.84, 0.0],
        [-0.10, 0.42, 0.0],
        [-0.10, 0.00, 0.0],
        [0.10, 0.00, 0.0],
        [0.10, 0.42, 0.0],
        [0.10, 0.84, 0.0],
        [-0.42, -0.05, 0.0],
        [-0.32, -0.28, 0.0],
        [-0.18, -0.50, 0.0],
        [0.18, -0.50, 0.0],
        [0.32, -0.28, 0.0],
        [0.42, -0.05, 0.0],
        [0.00, -0.55, 0.0],
        [0.00, -0.80, 0.0],
    ]
)


@dataclass(frozen=True)
class Segment:
    name: str
    start: int  # joint index or ROOT
    end: int
    driver: int  # joint whose world transform moves this capsule rigidly
    radius: float
    attach_to: str | None  # parent segment for the connected sum
    attach_at: int | None  # joint (or ROOT) where the two capsules meet


SEGMENTS = (
    Segment("torso", ROOT, 12, ROOT, 0.12, None, None),
    Segment("hips", 2, 3, ROOT, 0.08, "torso", ROOT),
    Segment("clavicle", 8, 9, 12, 0.06, "torso", 12),
    Segment("head", 12, 13, 12, 0.10, "torso", 12),
    Segment("r_upper_arm", 8, 7, 8, 0.05, "clavicle", 8),
    Segment("r_forearm", 7, 6, 7, 0.045, "r_upper_arm", 7),
    Segment("l_upper_arm", 9, 10, 9, 0.05, "clavicle", 9),
    Segment("l_forearm", 10, 11, 10, 0.045, "l_upper_arm", 10),
    Segment("r_thigh", 2, 1, 2, 0.075, "hips", 2),
    Segment("r_shin", 1, 0, 1, 0.06, "r_thigh", 1),
    Segment("l_thigh", 3, 4, 3, 0.075, "hips", 3),
    Segment("l_shin", 4, 5, 4, 0.06, "l_thigh", 4),
)


@dataclass(frozen=True)
class TopologyPreset:
    """Resolution knobs for :func:`build_template`.

    ``dense_target`` pads the subdivided mesh with face-centroid vertices
    (each splitting one triangle into three) up to an exact vertex count.
    """

    name: str = "default"
    radial: int = 3
    rings: int = 2
    torso_radial: int = 4
    torso_rings: int = 2
    subdivision_depth: int = 1
    dense_target: int | None = None
    bone_count: int = len(SEGMENTS)


PRESETS = {
    "default": TopologyPreset(),
    # 11 * (6*5 + 2) + (7*11 + 2) = 431 coarse; two midpoint passes give
    # 16*431 - 30 = 6866, and 24 centroid splits reach 6,890.
    "paper_ratio": TopologyPreset(
        name="paper_ratio", radial=6, rings=5, torso_radial=7, torso_rings=11, subdivision_depth=2, dense_target=6890
    ),
}


def joint_position(joints: np.ndarray, index: int) -> np.ndarray:
    if index == ROOT:
        return joints[list(HIP_JOINTS)].mean(axis=0)
    return joints[index]


def pelvis(joints: np.ndarray) -> np.ndarray:
    """Mid-hip root of (..., K, 3) joints."""
    return joints[..., list(HIP_JOINTS), :].mean(axis=-2)


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    coarse_vertices: np.ndarray  # (N_c, 3)
    coarse_faces: np.ndarray  # (F_c, 3)
    dense_faces: np.ndarray  # (F_d, 3)
    U: np.ndarray  # (N_dense, N_c)
    R: np.ndarray  # (K, N_dense)
    hop: np.ndarray  # (N_c, N_c)
    vertex_segment: np.ndarray  # (N_c,) index into SEGMENTS
    rest_joints: np.ndarray = field(default_factory=lambda: REST_JOINTS.copy())
    preset: str = "default"
    # one (parent_a, parent_b) pair of index arrays per midpoint pass
    subdivision_records: tuple = ()

    @property
    def coarse_count(self) -> int:
        return self.coarse_vertices.shape[0]

    @property
    def dense_count(self) -> int:
        return self.U.shape[0]

    @property
    def joint_count(self) -> int:
        return self.R.shape[0]

    @property
    def dense_vertices(self) -> np.ndarray:
        return self.U @ self.coarse_vertices

    @property
    def dense_segment(self) -> np.ndarray:
        """Segment label of each dense vertex, from its heaviest coarse parent."""
        return self.vertex_segment[np.argmax(self.U, axis=1)]

    def edges(self) -> np.ndarray:
        return unique_edges(self.coarse_faces)


# ---------------------------------------------------------------- geometry


def _perpendicular_frame(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0])
    if abs(d @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _capsule(a: np.ndarray, b: np.ndarray, radius: float, radial: int, rings: int):
    """Closed tube from ``a`` to ``b``: pole, ``rings`` rings of ``radial`` vertices, pole.

    Returns (vertices, faces, ring_index_lists). The first and last ring are
    centred exactly on ``a`` and ``b``.
    """
    if radial < 3 or rings < 2:
        raise TemplateError("capsules need radial >= 3 and rings >= 2")
    axis = b - a
    length = np.linalg.norm(axis)
    d = axis / length
    e1, e2 = _perpendicular_frame(d)
    theta = 2 * np.pi * np.arange(radial) / radial
    offsets = radius * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2)

    verts = [a - radius * d]
    ring_ids = []
    for r in range(rings):
        centre = a + axis * (r / (rings - 1))
        ring_ids.append(list(range(len(verts), len(verts) + radial)))
        verts.extend(centre + offsets)
    verts.append(b + radius * d)
    top, bottom = 0, len(verts) - 1

    faces = []
    first, last = ring_ids[0], ring_ids[-1]
    for k in range(radial):
        k1 = (k + 1) % radial
        faces.append((top, first[k1], first[k]))
        faces.append((bottom, last[k], last[k1]))
    for r in range(rings - 1):
        lo, hi = ring_ids[r], ring_ids[r + 1]
        for k in range(radial):
            k1 = (k + 1) % radial
            faces.append((lo[k], lo[k1], hi[k1]))
            faces.append((lo[k], hi[k1], hi[k]))
    return np.array(verts), faces, ring_ids


def _bridge(verts: np.ndarray, tri_a, tri_b) -> list[tuple[int, int, int]]:
    """Six triangles of a prism joining two removed triangles."""
    best, best_cost = None, np.inf
    rev_b = (tri_b[0], tri_b[2], tri_b[1])
    for shift in range(3):
        perm = rev_b[shift:] + rev_b[:shift]
        cost = sum(np.linalg.norm(verts[tri_a[i]] - verts[perm[i]]) for i in range(3))
        if cost < best_cost:
            best, best_cost = perm, cost
    faces = []
    for i in range(3):
        j = (i + 1) % 3
        faces.append((tri_a[i], tri_a[j], best[j]))
        faces.append((tri_a[i], best[j], best[i]))
    return faces


def unique_edges(faces: np.ndarray) -> np.ndarray:
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def midpoint_subdivide(vertex_count: int, faces: np.ndarray):
    """One 1-to-4 midpoint split.

    Returns (new_faces, parent_a, parent_b): dense vertex i is the mean of
    coarse vertices parent_a[i] and parent_b[i]; originals keep their index
    with parent_a == parent_b.
    """
    edges = unique_edges(faces)
    n_new = vertex_count + len(edges)
    pa = np.concatenate([np.arange(vertex_count), edges[:, 0]])
    pb = np.concatenate([np.arange(vertex_count), edges[:, 1]])
    lookup = {(int(i), int(j)): vertex_count + n for n, (i, j) in enumerate(edges)}

    def mid(i, j):
        return lookup[(i, j) if i < j else (j, i)]

    out = []
    for i, j, k in np.asarray(faces).tolist():
        ij, jk, ki = mid(i, j), mid(j, k), mid(k, i)
        out.extend([(i, ij, ki), (j, jk, ij), (k, ki, jk), (ij, jk, ki)])
    assert len(pa) == n_new
    return np.array(out, dtype=np.int64), pa, pb


# ------------------------------------------------------------------ builder


def build_template(preset: TopologyPreset | str = "default") -> TemplateMesh:
    if isinstance(preset, str):
        try:
            preset = PRESETS[preset]
        except KeyError:
            raise TemplateError(f"unknown topology preset '{preset}'") from None
    if preset.bone_count != len(SEGMENTS):
        raise TemplateError(f"the capsule figure has {len(SEGMENTS)} bones, preset asks for {preset.bone_count}")

    names = [s.name for s in SEGMENTS]
    verts: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []
    seg_of_vertex: list[int] = []
    seg_faces: dict[int, list[int]] = {}  # segment -> indices into faces
    rings: list[tuple[np.ndarray, list[int]]] = []  # (centre, coarse ids)
    removed: set[int] = set()
    offset = 0
    for si, seg in enumerate(SEGMENTS):
        a = joint_position(REST_JOINTS, seg.start)
        b = joint_position(REST_JOINTS, seg.end)
        radial = preset.torso_radial if seg.name == "torso" else preset.radial
        n_rings = preset.torso_rings if seg.name == "torso" else preset.rings
        v, f, ring_ids = _capsule(a, b, seg.radius, radial, n_rings)
        verts.append(v)
        seg_of_vertex.extend([si] * len(v))
        for r, ids in enumerate(ring_ids):
            centre = a + (b - a) * (r / (n_rings - 1))
            rings.append((centre, [i + offset for i in ids]))
        seg_faces[si] = []
        for tri in f:
            seg_faces[si].append(len(faces))
            faces.append(tuple(i + offset for i in tri))
        offset += len(v)
    all_verts = np.concatenate(verts)

    def nearest_free_face(si: int, point: np.ndarray) -> int:
        best, best_d = -1, np.inf
        for fi in seg_faces[si]:
            if fi in removed:
                continue
            d = np.linalg.norm(all_verts[list(faces[fi])].mean(axis=0) - point)
            if d < best_d - 1e-12:
                best, best_d = fi, d
        return best

    bridges = []
    for si, seg in enumerate(SEGMENTS):
        if seg.attach_to is None:
            continue
        pi = names.index(seg.attach_to)
        where = joint_position(REST_JOINTS, seg.attach_at)
        fa = nearest_free_face(pi, where)
        fb = nearest_free_face(si, where)
        removed.update((fa, fb))
        bridges.extend(_bridge(all_verts, faces[fa], faces[fb]))
    coarse_faces = np.array([f for i, f in enumerate(faces) if i not in removed] + bridges, dtype=np.int64)

    n = len(all_verts)
    hop = hop_distances(coarse_faces, n)

    # U: compose midpoint passes, then optional centroid padding
    U = np.eye(n)
    dense_faces = coarse_faces
    records = []
    for _ in range(preset.subdivision_depth):
        dense_faces, pa, pb = midpoint_subdivide(U.shape[0], dense_faces)
        records.append((pa, pb))
        U = 0.5 * (U[pa] + U[pb])
    if preset.dense_target is not None:
        extra = preset.dense_target - U.shape[0]
        if extra < 0:
            raise TemplateError(f"dense_target {preset.dense_target} below subdivided count {U.shape[0]}")
        U, dense_faces = _centroid_pad(U, dense_faces, extra)

    R = _joint_regressor(rings, U.shape[0])
    template = TemplateMesh(
        coarse_vertices=all_verts,
        coarse_faces=coarse_faces,
        dense_faces=dense_faces,
        U=U,
        R=R,
        hop=hop,
        vertex_segment=np.array(seg_of_vertex, dtype=np.int64),
        rest_joints=REST_JOINTS.copy(),
        preset=preset.name,
        subdivision_records=tuple(records),
    )
    validate_template(template)
    _freeze(template)
    return template


def _centroid_pad(U: np.ndarray, faces: np.ndarray, extra: int):
    if extra == 0:
        return U, faces
    rows = [U]
    faces = [tuple(f) for f in faces.tolist()]
    out = []
    n = U.shape[0]
    for idx, (a, b, c) in enumerate(faces):
        if idx < extra:
            rows.append(((U[a] + U[b] + U[c]) / 3.0)[None])
            m = n + idx
            out.extend([(a, b, m), (b, c, m), (c, a, m)])
        else:
            out.append((a, b, c))
    return np.concatenate(rows), np.array(out, dtype=np.int64)


def _joint_regressor(rings, dense_count: int) -> np.ndarray:
    """Average of the coarse rings closest to each rest joint, on dense indices."""
    centres = np.array([c for c, _ in rings])
    R = np.zeros((len(REST_JOINTS), dense_count))
    for j, p in enumerate(REST_JOINTS):
        d = np.linalg.norm(centres - p, axis=1)
        chosen = np.flatnonzero(d <= d.min() + 1e-9)
        ids = [i for r in chosen for i in rings[r][1]]
        R[j, ids] = 1.0 / len(ids)
    return R


def _freeze(template: TemplateMesh) -> None:
    for name in ("coarse_vertices", "coarse_faces", "dense_faces", "U", "R", "hop", "vertex_segment", "rest_joints"):
        getattr(template, name).setflags(write=False)


def validate_template(t: TemplateMesh) -> None:
    nc, nd = t.coarse_count, t.U.shape[0]
    for label, f, count in (("coarse", t.coarse_faces, nc), ("dense", t.dense_faces, nd)):
        if f.min() < 0 or f.max() >= count:
            raise TemplateError(f"{label} face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise TemplateError(f"degenerate {label} face")
    if t.U.shape[1] != nc or t.R.shape[1] != nd:
        raise TemplateError(f"matrix shapes U{t.U.shape} R{t.R.shape} inconsistent with counts {nc}/{nd}")
    for label, M in (("U", t.U), ("R", t.R)):
        if np.any(M < 0) or np.max(np.abs(M.sum(axis=1) - 1.0)) > 1e-9:
            raise TemplateError(f"{label} is not row-stochastic")
    if t.hop.shape != (nc, nc) or np.any(t.hop < 0):
        raise TemplateError("hop matrix malformed")


# -------------------------------------------------------------- graph ops


def adjacency_lists(faces: np.ndarray, vertex_count: int) -> list[list[int]]:
    adj: list[set[int]] = [set() for _ in range(vertex_count)]
    for i, j in unique_edges(faces).tolist():
        adj[i].add(j)
        adj[j].add(i)
    return [sorted(s) for s in adj]


def hop_distances(faces: np.ndarray, vertex_count: int) -> np.ndarray:
    """All-pairs edge-count distances by breadth-first search from every vertex."""
    adj = adjacency_lists(faces, vertex_count)
    hop = np.full((vertex_count, vertex_count), -1, dtype=np.int64)
    for src in range(vertex_count):
        row = hop[src]
        row[src] = 0
        queue = deque([src])
        while queue:
            v = queue.popleft()
            for w in adj[v]:
                if row[w] < 0:
                    row[w] = row[v] + 1
                    queue.append(w)
        if np.any(row < 0):
            missing = int(np.flatnonzero(row < 0)[0])
            raise ConnectivityError(f"vertex {missing} unreachable from vertex {src}")
    return hop


@dataclass(frozen=True, eq=False)
class AttentionMask:
    level: int
    allowed: np.ndarray  # (T, T) bool


def build_attention_mask(hop: np.ndarray, M: int | None, K: int, Z: int) -> AttentionMask:
    """Token mask over [vertices | joints | grid].

    Vertex pairs further than ``M`` hops apart are blocked; any pair involving
    a joint or grid token stays open. ``M=None`` opens everything.
    """
    n = hop.shape[0]
    T = n + K + Z
    allowed = np.ones((T, T), dtype=bool)
    if M is not None:
        if M < 1:
            raise MaskConfigError(f"mask level M must be >= 1, got {M}")
        allowed[:n, :n] = hop <= M
    allowed.setflags(write=False)
    return AttentionMask(level=0 if M is None else int(M), allowed=allowed)


# ------------------------------------------------------ linear maps on meshes


def upsample_vertices(U, coarse) -> Tensor:
    """Dense vertices ``U @ coarse`` for (N_c, 3) or batched (B, N_c, 3) input."""
    U, coarse = as_tensor(U), as_tensor(coarse)
    if coarse.ndim < 2 or U.shape[1] != coarse.shape[-2]:
        raise DimensionError(f"upsample shape mismatch: U{U.shape} vs vertices{coarse.shape}")
    return matmul(U, coarse)


def regress_joints(R, dense) -> Tensor:
    R, dense = as_tensor(R), as_tensor(dense)
    if dense.ndim < 2 or R.shape[1] != dense.shape[-2]:
        raise DimensionError(f"regressor shape mismatch: R{R.shape} vs vertices{dense.shape}")
    return matmul(R, dense)


# -------------------------------------------------------------- heatmaps


def project_points(points: np.ndarray, camera) -> np.ndarray:
    """Weak-perspective projection to normalised image coordinates in [-1, 1]."""
    s, tx, ty = (float(c) for c in camera)
    return s * np.asarray(points)[..., :2] + np.array([tx, ty])


def to_pixel(xy: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest pixel (row, col) for normalised coordinates, clamped to the image."""
    col = np.clip(np.floor((xy[..., 0] + 1.0) * 0.5 * w), 0, w - 1)
    row = np.clip(np.floor((xy[..., 1] + 1.0) * 0.5 * h), 0, h - 1)
    return np.stack([row, col], axis=-1).astype(np.int64)


def render_gt_heatmaps(coarse_vertices: np.ndarray, camera, resolution: tuple[int, int]) -> np.ndarray:
    """One-hot (N_c, h, w) maps marking each vertex's projected pixel."""
    h, w = resolution
    xy = project_points(coarse_vertices, camera)
    if not np.all(np.isfinite(xy)):
        raise DataGenerationError("non-finite vertex projection")
    rc = to_pixel(xy, h, w)
    maps = np.zeros((len(xy), h, w))
    maps[np.arange(len(xy)), rc[:, 0], rc[:, 1]] = 1.0
    return maps


# ------------------------------------------------------------------ I/O


def write_obj(path: str | Path, vertices: np.ndarray, faces: np.ndarray, comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _write_block(lines: list[str], name: str, array: np.ndarray, fmt: str) -> None:
    array = np.atleast_2d(array)
    lines.append(f"[{name}] {array.shape[0]} {array.shape[1]}")
    for row in array:
        lines.append(" ".join(format(x, fmt) for x in row))


def save_template(template: TemplateMesh, obj_path: str | Path, sidecar_path: str | Path) -> None:
    """Coarse mesh as OBJ plus a sidecar of dense row-major blocks.

    Sidecar layout: a header line, ``preset <name>``, then blocks of the form
    ``[NAME] rows cols`` followed by ``rows`` lines of ``cols`` space-separated
    values. Blocks: U, R, hop, dense_faces, vertex_segment (1 x N_c),
    rest_joints.
    """
    write_obj(obj_path, template.coarse_vertices, template.coarse_faces, comment=f"hmrkit template {template.preset}")
    lines = ["# hmrkit template sidecar v1", f"preset {template.preset}"]
    _write_block(lines, "U", template.U, ".17g")
    _write_block(lines, "R", template.R, ".17g")
    _write_block(lines, "hop", template.hop, "d")
    _write_block(lines, "dense_faces", template.dense_faces, "d")
    _write_block(lines, "vertex_segment", template.vertex_segment[None], "d")
    _write_block(lines, "rest_joints", template.rest_joints, ".17g")
    Path(sidecar_path).write_text("\n".join(lines) + "\n")


def load_template(obj_path: str | Path, sidecar_path: str | Path) -> TemplateMesh:
    verts, faces = read_obj(obj_path)
    blocks: dict[str, np.ndarray] = {}
    preset = "default"
    lines = Path(sidecar_path).read_text().splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        if line.startswith("preset "):
            preset = line.split(None, 1)[1]
            continue
        if not line.startswith("["):
            raise TemplateError(f"unexpected sidecar line: {line[:40]}")
        name, rows, cols = line[1 : line.index("]")], *map(int, line[line.index("]") + 1 :].split())
        body = np.array([float(x) for row in lines[i : i + rows] for x in row.split()])
        if body.size != rows * cols:
            raise TemplateError(f"sidecar block {name} has {body.size} values, expected {rows * cols}")
        blocks[name] = body.reshape(rows, cols)
        i += rows
    t = TemplateMesh(
        coarse_vertices=verts,
        coarse_faces=faces,
        dense_faces=blocks["dense_faces"].astype(np.int64),
        U=blocks["U"],
        R=blocks["R"],
        hop=blocks["hop"].astype(np.int64),
        vertex_segment=blocks["vertex_segment"][0].astype(np.int64),
        rest_joints=blocks["rest_joints"],
        preset=preset,
    )
    validate_template(t)
    _freeze(t)
    return t
