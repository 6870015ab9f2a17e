"""Morphable-model basis bundle: definition, MF3D binary I/O, synthetic bundles.

A bundle holds the mean shape/albedo, the identity/expression/albedo linear
bases, mesh topology, and the index sets (68 landmarks, mouth+nose flags,
skin region) that the rest of the engine consumes.  Bundles are immutable
after construction and safe to share across workers.

Storage conventions:
  * shape/albedo vectors are planar (structure-of-arrays): all x, all y,
    all z (resp. all r, all g, all b), length 3N.
  * basis matrices are 3N x K with columns pre-multiplied by their mode
    standard deviation, so a decode is a plain linear combination with
    unit-variance coefficients.
  * all float payloads are float32-representable; arrays are kept as
    float64 in memory for numerics but round-trip the file format exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

MAGIC = b"MF3D\x01"

# canonical record order; the writer always emits exactly these tags in
# exactly this order, which is what makes re-serialization byte-identical
_TAG_ORDER = (
    b"HDRC", b"DIMS", b"MSHP", b"MALB", b"IDBS", b"EXBS", b"ALBS",
    b"TRIS", b"LMKI", b"MNMS", b"SKIN",
)

_FLOAT_TAGS = {b"MSHP", b"MALB", b"IDBS", b"EXBS", b"ALBS"}
_UINT_TAGS = {b"HDRC", b"DIMS", b"TRIS", b"LMKI", b"MNMS", b"SKIN"}

N_LANDMARKS = 68
# paper-scale defaults for the three coefficient blocks
DEFAULT_DIMS = (80, 64, 80)


class BundleError(ValueError):
    """Raised when a bundle file or bundle contents are invalid."""


class BadMagicError(BundleError):
    pass


class TruncatedPayloadError(BundleError):
    pass


class InvariantViolation(BundleError):
    """Names the first bundle field that fails validation."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class BasisBundle:
    """The morphable-model asset every other module consumes."""

    mean_shape: np.ndarray      # (3N,) planar
    mean_albedo: np.ndarray     # (3N,) planar, entries in [0, 1]
    id_basis: np.ndarray        # (3N, n_id)
    exp_basis: np.ndarray       # (3N, n_exp)
    alb_basis: np.ndarray       # (3N, n_alb)
    triangles: np.ndarray       # (T, 3) int, CCW viewed from outside
    landmark_indices: np.ndarray   # (68,) int
    mouthnose_mask: np.ndarray     # (68,) bool
    skin_region: np.ndarray        # (S,) int
    vertex_count: int

    def __post_init__(self):
        validate_bundle(self)

    @property
    def n_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def n_exp(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def n_alb(self) -> int:
        return self.alb_basis.shape[1]

    def shape_points(self) -> np.ndarray:
        """Mean shape as a 3xN array (rows x, y, z)."""
        return self.mean_shape.reshape(3, self.vertex_count)

    def albedo_points(self) -> np.ndarray:
        """Mean albedo as a 3xN array (rows r, g, b)."""
        return self.mean_albedo.reshape(3, self.vertex_count)

    def landmark_weights(self, w_mouthnose: float = 20.0, w_other: float = 1.0) -> np.ndarray:
        """Per-landmark weights from the mouth/nose flag set."""
        return np.where(self.mouthnose_mask, w_mouthnose, w_other)


def _f32(a) -> np.ndarray:
    # float32-representable float64: file payloads are float32, so keeping
    # in-memory values on the float32 grid makes save(load(f)) == f exact
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def validate_bundle(b: BasisBundle) -> None:
    n = b.vertex_count
    if not isinstance(n, (int, np.integer)) or n <= 0:
        raise InvariantViolation("vertex_count", f"must be a positive integer, got {n!r}")
    three_n = 3 * n
    if b.mean_shape.shape != (three_n,):
        raise InvariantViolation("mean_shape", f"expected shape ({three_n},), got {b.mean_shape.shape}")
    if b.mean_albedo.shape != (three_n,):
        raise InvariantViolation("mean_albedo", f"expected shape ({three_n},), got {b.mean_albedo.shape}")
    if b.mean_albedo.min() < 0.0 or b.mean_albedo.max() > 1.0:
        raise InvariantViolation("mean_albedo", "entries must lie in [0, 1]")
    for name in ("id_basis", "exp_basis", "alb_basis"):
        m = getattr(b, name)
        if m.ndim != 2 or m.shape[0] != three_n:
            raise InvariantViolation(name, f"expected row count {three_n}, got shape {m.shape}")
    if b.triangles.ndim != 2 or b.triangles.shape[1] != 3:
        raise InvariantViolation("triangles", f"expected (T, 3), got {b.triangles.shape}")
    if b.triangles.size and (b.triangles.min() < 0 or b.triangles.max() >= n):
        raise InvariantViolation("triangles", f"vertex indices must lie in [0, {n})")
    if b.landmark_indices.shape != (N_LANDMARKS,):
        raise InvariantViolation("landmark_indices", f"expected exactly {N_LANDMARKS} entries")
    if b.landmark_indices.min() < 0 or b.landmark_indices.max() >= n:
        raise InvariantViolation("landmark_indices", f"indices must lie in [0, {n})")
    # distinctness is only satisfiable once the mesh has at least 68 vertices;
    # toy bundles below that reuse vertices
    if n >= N_LANDMARKS and len(np.unique(b.landmark_indices)) != N_LANDMARKS:
        raise InvariantViolation("landmark_indices", "indices must be distinct")
    if b.mouthnose_mask.shape != (N_LANDMARKS,):
        raise InvariantViolation("mouthnose_mask", f"expected exactly {N_LANDMARKS} entries")
    if b.skin_region.ndim != 1:
        raise InvariantViolation("skin_region", "expected a 1-d index array")
    if b.skin_region.size and (b.skin_region.min() < 0 or b.skin_region.max() >= n):
        raise InvariantViolation("skin_region", f"indices must lie in [0, {n})")


def _records(bundle: BasisBundle) -> list[tuple[bytes, np.ndarray]]:
    n = bundle.vertex_count
    return [
        (b"HDRC", np.array([n], dtype=np.uint32)),
        (b"DIMS", np.array([bundle.n_id, bundle.n_exp, bundle.n_alb], dtype=np.uint32)),
        (b"MSHP", bundle.mean_shape.astype(np.float32)),
        (b"MALB", bundle.mean_albedo.astype(np.float32)),
        # column-major so a memory-mapped reader can slice whole modes
        (b"IDBS", bundle.id_basis.astype(np.float32).flatten(order="F")),
        (b"EXBS", bundle.exp_basis.astype(np.float32).flatten(order="F")),
        (b"ALBS", bundle.alb_basis.astype(np.float32).flatten(order="F")),
        (b"TRIS", bundle.triangles.astype(np.uint32).ravel()),
        (b"LMKI", bundle.landmark_indices.astype(np.uint32)),
        (b"MNMS", bundle.mouthnose_mask.astype(np.uint32)),
        (b"SKIN", bundle.skin_region.astype(np.uint32)),
    ]


def save_bundle(bundle: BasisBundle, path) -> None:
    """Write a bundle as a canonical MF3D file.

    The encoding is little-endian TLV: 4-byte tag, uint64 element count,
    raw float32/uint32 payload.  Saving the result of a load reproduces
    the input file byte for byte.
    """
    validate_bundle(bundle)
    chunks = [MAGIC]
    for tag, payload in _records(bundle):
        data = payload.astype("<f4" if tag in _FLOAT_TAGS else "<u4").tobytes()
        chunks.append(tag + struct.pack("<Q", payload.size) + data)
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_bundle(path) -> BasisBundle:
    """Read an MF3D file, validating the header, records, and invariants."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not an MF3D file (bad magic)")
    raw: dict[bytes, np.ndarray] = {}
    off = len(MAGIC)
    while off < len(blob):
        if off + 12 > len(blob):
            raise TruncatedPayloadError(f"{path}: truncated record header at offset {off}")
        tag = blob[off : off + 4]
        (count,) = struct.unpack("<Q", blob[off + 4 : off + 12])
        off += 12
        if tag not in _TAG_ORDER:
            raise BundleError(f"{path}: unknown tag {tag!r} (format is versioned, not extensible)")
        if tag in raw:
            raise BundleError(f"{path}: duplicate tag {tag!r}")
        dtype = "<f4" if tag in _FLOAT_TAGS else "<u4"
        nbytes = count * 4
        if off + nbytes > len(blob):
            raise TruncatedPayloadError(
                f"{path}: truncated payload for tag {tag.decode()} "
                f"(need {nbytes} bytes, have {len(blob) - off})"
            )
        raw[tag] = np.frombuffer(blob[off : off + nbytes], dtype=dtype).copy()
        off += nbytes
    missing = [t.decode() for t in _TAG_ORDER if t not in raw]
    if missing:
        raise TruncatedPayloadError(f"{path}: missing records {missing}")

    n = int(raw[b"HDRC"][0])
    if n <= 0:
        raise InvariantViolation("vertex_count", "must be positive")
    n_id, n_exp, n_alb = (int(v) for v in raw[b"DIMS"])
    three_n = 3 * n

    def basis(tag: bytes, k: int, field_name: str) -> np.ndarray:
        data = raw[tag]
        if data.size != three_n * k:
            raise InvariantViolation(field_name, f"payload size {data.size} != 3N*K = {three_n * k}")
        return data.reshape((three_n, k), order="F").astype(np.float64)

    tris = raw[b"TRIS"]
    if tris.size % 3:
        raise InvariantViolation("triangles", "payload not a multiple of 3")
    return BasisBundle(
        mean_shape=raw[b"MSHP"].astype(np.float64),
        mean_albedo=raw[b"MALB"].astype(np.float64),
        id_basis=basis(b"IDBS", n_id, "id_basis"),
        exp_basis=basis(b"EXBS", n_exp, "exp_basis"),
        alb_basis=basis(b"ALBS", n_alb, "alb_basis"),
        triangles=tris.reshape(-1, 3).astype(np.int64),
        landmark_indices=raw[b"LMKI"].astype(np.int64),
        mouthnose_mask=raw[b"MNMS"].astype(bool),
        skin_region=raw[b"SKIN"].astype(np.int64),
        vertex_count=n,
    )


# ---------------------------------------------------------------------------
# synthetic bundles


def _fibonacci_sphere(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors, deterministic. Returns (n, 3)."""
    i = np.arange(n, dtype=np.float64)
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = 2.0 * np.pi * i / phi
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sphere_mesh(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed sphere-like mesh: (n, 3) vertices and (T, 3) CCW-outward triangles."""
    pts = _fibonacci_sphere(n)
    hull = ConvexHull(pts)
    tris = hull.simplices.astype(np.int64)
    # qhull does not promise a consistent winding; flip so outward normals
    # point away from the origin
    v0, v1, v2 = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    normals = np.cross(v1 - v0, v2 - v0)
    centroids = (v0 + v1 + v2) / 3.0
    flip = np.einsum("ij,ij->i", normals, centroids) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return pts, tris


def _monomial_fields(pts: np.ndarray, max_degree: int = 5, min_degree: int = 0) -> np.ndarray:
    """Smooth per-vertex 3-vector fields: monomials in (x,y,z) times unit axes.

    Smoothness (low spatial frequency) keeps deformed meshes from folding,
    and polynomial fields are globally coupled, so a mode is observable from
    any open surface patch.
    """
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    monos = []
    for d in range(min_degree, max_degree + 1):
        for a in range(d + 1):
            for b in range(d - a + 1):
                c = d - a - b
                monos.append(x**a * y**b * z**c)
    monos = np.stack(monos, axis=1)  # (n, M)
    n = pts.shape[0]
    fields = []
    for m in range(monos.shape[1]):
        for axis in range(3):
            f = np.zeros((3, n))
            f[axis] = monos[:, m]
            fields.append(f.ravel())  # planar layout
    return np.stack(fields, axis=1)  # (3n, 3M)


def _orthonormal_columns(
    candidates: np.ndarray, k: int, rng: np.random.Generator, exclude: np.ndarray | None = None
) -> np.ndarray:
    """First k orthonormal columns of a randomly mixed candidate set.

    Columns of `exclude` (orthonormal) are projected out first, so the
    result spans nothing of that subspace.
    """
    mixed = candidates @ rng.standard_normal((candidates.shape[1], candidates.shape[1]))
    if exclude is not None:
        mixed = mixed - exclude @ (exclude.T @ mixed)
    q, _ = np.linalg.qr(mixed)
    return q[:, :k]


def _similarity_fields(pts: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the similarity-transform directions (7 columns).

    Rigid translation, infinitesimal rotation, and uniform scale of the mesh
    are all absorbed by the pose parameters; scan-aligned morphable bases do
    not contain them, and excluding them keeps pose exactly identifiable in
    synthetic recovery tests.
    """
    n = pts.shape[0]
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    zero = np.zeros(n)
    one = np.ones(n)

    def planar(fx, fy, fz):
        return np.concatenate([fx, fy, fz])

    cols = [
        planar(one, zero, zero),
        planar(zero, one, zero),
        planar(zero, zero, one),
        planar(zero, -z, y),     # rotation about x
        planar(z, zero, -x),     # rotation about y
        planar(-y, x, zero),     # rotation about z
        planar(x, y, z),         # uniform scale
    ]
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q


def synth_bundle(
    seed: int,
    n_vertices: int,
    n_id: int = DEFAULT_DIMS[0],
    n_exp: int = DEFAULT_DIMS[1],
    n_alb: int = DEFAULT_DIMS[2],
    shape_sigma: float = 0.035,
    alb_sigma: float = 0.02,
) -> BasisBundle:
    """Deterministic sphere-like test bundle.

    Stands in for a real scan-derived model: unit-radius closed mesh, smooth
    orthogonal deformation modes scaled so coefficient draws up to |delta|=3
    keep the mesh non-degenerate, and a smooth albedo pattern that gives the
    photometric losses something to lock onto.

    Basis widths are capped at 3*n_vertices - 3 (an orthogonal set cannot be
    wider than the space it lives in); the paper-scale defaults 80/64/80
    apply whenever the mesh is large enough.
    """
    if n_vertices < 4:
        raise ValueError("n_vertices must be >= 4")
    # orthogonal modes cannot outnumber the space left after the excluded
    # similarity (shape) and constant-color (albedo) directions
    shape_budget = 3 * n_vertices - 7
    if n_id + n_exp > shape_budget:
        n_id = max(1, min(n_id, shape_budget - 1))
        n_exp = max(1, min(n_exp, shape_budget - n_id))
    alb_excluded = 30 if 3 * n_vertices >= 45 else 3
    n_alb = max(1, min(n_alb, 3 * n_vertices - alb_excluded))
    rng = np.random.default_rng(np.random.SeedSequence([919, seed, n_vertices]))

    pts, tris = _sphere_mesh(n_vertices)
    # mild per-bundle shape variation so different seeds give different meshes
    stretch = 1.0 + 0.08 * rng.standard_normal(3)
    pts = pts * stretch
    mean_shape = pts.T.ravel()  # planar: all x, all y, all z

    fields = _monomial_fields(pts)
    need = n_id + n_exp
    if fields.shape[1] < need + 7:
        extra = rng.standard_normal((fields.shape[0], need + 7 - fields.shape[1]))
        fields = np.hstack([fields, extra])
    shape_modes = _orthonormal_columns(fields, need, rng, exclude=_similarity_fields(pts))
    # mode stddevs baked into the columns (mild decay, like a PCA spectrum)
    sigma = shape_sigma / np.sqrt(1.0 + 0.08 * np.arange(need))
    shape_modes = shape_modes * sigma
    id_basis = shape_modes[:, :n_id]
    exp_basis = shape_modes[:, n_id:need]

    # smooth skin-ish albedo pattern, comfortably inside [0, 1]
    base_rgb = np.array([0.63, 0.48, 0.40])
    wobble = 0.10 * np.stack(
        [
            np.sin(3.1 * pts[:, 0] + 1.3) * np.cos(2.3 * pts[:, 1]),
            np.sin(2.7 * pts[:, 1] - 0.4) * np.cos(3.7 * pts[:, 2]),
            np.sin(3.3 * pts[:, 2] + 2.1) * np.cos(2.9 * pts[:, 0]),
        ],
        axis=0,
    )
    mean_albedo = np.clip(base_rgb[:, None] + wobble, 0.05, 0.95).ravel()

    # three-band SH irradiance is a degree-2 polynomial of the normal, and on
    # a sphere-like mesh normals track positions; restricting albedo modes to
    # degree >= 3 patterns (and projecting the low-order span out) keeps
    # albedo separable from lighting in recovery tests
    if alb_excluded == 30:
        alb_fields = _monomial_fields(pts, max_degree=5, min_degree=3)
        low_order = _monomial_fields(pts, max_degree=2, min_degree=0)
        exclude_alb, _ = np.linalg.qr(low_order)
    else:
        # too few vertices for the full low-order projection; at least keep
        # constant channel offsets out (they alias the light intensity)
        alb_fields = _monomial_fields(pts, max_degree=4)
        exclude_alb = np.zeros((3 * n_vertices, 3))
        for c in range(3):
            exclude_alb[c * n_vertices : (c + 1) * n_vertices, c] = 1.0 / np.sqrt(n_vertices)
    if alb_fields.shape[1] < n_alb:
        alb_fields = np.hstack(
            [alb_fields, rng.standard_normal((alb_fields.shape[0], n_alb - alb_fields.shape[1]))]
        )
    alb_basis = _orthonormal_columns(alb_fields, n_alb, rng, exclude=exclude_alb)
    alb_basis = alb_basis * (alb_sigma / np.sqrt(1.0 + 0.08 * np.arange(n_alb)))

    # landmarks live on the front (-z) hemisphere, the side a zero-rotation
    # camera sees; repeats are unavoidable below 68 vertices
    order = np.argsort(pts[:, 2], kind="stable")
    front = order[: max(1, n_vertices // 2)]
    lm = front[np.linspace(0, front.size - 1, N_LANDMARKS).round().astype(np.int64) % front.size]
    if n_vertices >= N_LANDMARKS:
        picked: list[int] = []
        seen: set[int] = set()
        for idx in np.concatenate([lm, order]):
            if int(idx) not in seen:
                seen.add(int(idx))
                picked.append(int(idx))
            if len(picked) == N_LANDMARKS:
                break
        lm = np.array(picked, dtype=np.int64)
    mouthnose = np.zeros(N_LANDMARKS, dtype=bool)
    mouthnose[27:36] = True   # nose block of the 68-point convention
    mouthnose[48:68] = True   # mouth block
    skin = np.flatnonzero(pts[:, 2] < -0.25 * min(1.0, stretch[2]))
    if skin.size == 0:
        skin = np.array([int(order[0])], dtype=np.int64)

    return BasisBundle(
        mean_shape=_f32(mean_shape),
        mean_albedo=_f32(np.clip(mean_albedo, 0.0, 1.0)),
        id_basis=_f32(id_basis),
        exp_basis=_f32(exp_basis),
        alb_basis=_f32(alb_basis),
        triangles=tris,
        landmark_indices=lm,
        mouthnose_mask=mouthnose,
        skin_region=skin.astype(np.int64),
        vertex_count=n_vertices,
    )
