"""Constraint-free parameterisations of velocity and diffusion fields.

* A velocity is the discrete curl of a potential, so its interior central
  divergence vanishes up to roundoff for any potential.
* A diffusion tensor is ``U diag(relu(lam_raw)) U^T`` with ``U`` the Cayley
  image of the skew matrix ``B - B^T``, so it is symmetric PSD for any
  parameters.

The ``*_arrays`` helpers take per-component lists of arrays (plain or taped)
and are what the objective differentiates through.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import stencils
from .fields import (
    FieldFormatError,
    Grid,
    ScalarField,
    TensorField,
    VectorField,
    read_field,
    tensor_entry_index,
    write_field,
)

__all__ = [
    "PotentialField",
    "TensorParams",
    "PhysicsParams",
    "EigenDecomp",
    "potential_mask",
    "curl",
    "curl_arrays",
    "discrete_divergence",
    "cayley",
    "cayley_entries",
    "build_tensor",
    "tensor_entries_from_params",
    "eig_sym",
    "sign_convention",
    "write_params",
    "read_params",
]

BC_MODES = ("normal", "all")


def n_potential(ndim: int) -> int:
    return 1 if ndim == 2 else 3


def n_skew(ndim: int) -> int:
    return ndim * (ndim - 1) // 2


def potential_mask(grid: Grid, bc: str = "normal") -> np.ndarray:
    """Multiplicative mask realising ``psi . n = 0`` on the boundary.

    ``normal`` zeroes, on each pair of faces, only the potential component
    normal to those faces (3D); a 2D scalar potential points out of plane and
    is left free. ``all`` zeroes every component on every boundary cell.
    """
    if bc not in BC_MODES:
        raise ValueError(f"bc must be one of {BC_MODES}, got {bc!r}")
    alpha = n_potential(grid.ndim)
    mask = np.ones((alpha, *grid.dims))
    if bc == "all":
        mask[:, grid.boundary_mask()] = 0.0
    elif grid.ndim == 3:
        for ax in range(3):
            face = [slice(None)] * 3
            for end in (0, -1):
                face[ax] = end
                mask[(ax, *face)] = 0.0
    return mask


class PotentialField:
    """Velocity potential: a scalar in 2D, a 3-vector in 3D.

    The boundary condition is applied on construction, so ``data`` always
    satisfies it.
    """

    def __init__(self, grid: Grid, data, bc: str = "normal"):
        alpha = n_potential(grid.ndim)
        arr = np.array(data, dtype=np.float64).reshape((alpha, *grid.dims))
        if not np.all(np.isfinite(arr)):
            raise ValueError("PotentialField: non-finite values")
        arr = arr * potential_mask(grid, bc)
        arr.setflags(write=False)
        self.grid = grid
        self.bc = bc
        self.data = arr

    @classmethod
    def zeros(cls, grid: Grid, bc: str = "normal") -> "PotentialField":
        return cls(grid, np.zeros((n_potential(grid.ndim), *grid.dims)), bc=bc)


class TensorParams:
    """Skew parameters ``b`` (s, or s1, s2, s3) and raw eigenvalues per cell."""

    def __init__(self, grid: Grid, b, lam_raw):
        d = grid.ndim
        b = np.array(b, dtype=np.float64).reshape((n_skew(d), *grid.dims))
        lam_raw = np.array(lam_raw, dtype=np.float64).reshape((d, *grid.dims))
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(lam_raw))):
            raise ValueError("TensorParams: non-finite values")
        b.setflags(write=False)
        lam_raw.setflags(write=False)
        self.grid = grid
        self.b = b
        self.lam_raw = lam_raw

    @property
    def eigenvalues(self) -> np.ndarray:
        """Rectified eigenvalues ``max(lam_raw, 0)`` in parameter order."""
        return np.maximum(self.lam_raw, 0.0)

    @classmethod
    def zeros(cls, grid: Grid) -> "TensorParams":
        return cls(grid, np.zeros((n_skew(grid.ndim), *grid.dims)),
                   np.zeros((grid.ndim, *grid.dims)))


@dataclass(frozen=True)
class PhysicsParams:
    psi: PotentialField
    tensor: TensorParams

    def __post_init__(self):
        if self.psi.grid != self.tensor.grid:
            raise ValueError("psi and tensor parameters live on different grids")

    @property
    def grid(self) -> Grid:
        return self.psi.grid

    @classmethod
    def zeros(cls, grid: Grid, bc: str = "normal") -> "PhysicsParams":
        return cls(PotentialField.zeros(grid, bc), TensorParams.zeros(grid))

    @classmethod
    def from_arrays(cls, grid: Grid, psi, b, lam_raw, bc: str = "normal") -> "PhysicsParams":
        return cls(PotentialField(grid, psi, bc), TensorParams(grid, b, lam_raw))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"psi": self.psi.data, "b": self.tensor.b, "lam_raw": self.tensor.lam_raw}

    def velocity(self) -> VectorField:
        return curl(self.psi)

    def diffusion(self) -> TensorField:
        return build_tensor(self.tensor)


# -- velocity ---------------------------------------------------------------

def curl_arrays(psi, spacing):
    """Discrete curl of a potential given as ``alpha`` component arrays.

    Central differences inside, one-sided at faces. 2D: ``(d psi/dy, -d psi/dx)``.
    """
    if len(spacing) == 2:
        (p,) = psi
        dx, dy = stencils.central_all(p, spacing)
        return [dy, -dx]
    px, py, pz = psi
    hx, hy, hz = spacing
    return [
        stencils.central(pz, 1, hy) - stencils.central(py, 2, hz),
        stencils.central(px, 2, hz) - stencils.central(pz, 0, hx),
        stencils.central(py, 0, hx) - stencils.central(px, 1, hy),
    ]


def curl(psi: PotentialField) -> VectorField:
    comps = curl_arrays(list(psi.data), psi.grid.spacing)
    return VectorField(psi.grid, np.stack(comps))


def discrete_divergence(v: VectorField) -> ScalarField:
    """Central-difference divergence at interior cells; boundary cells are 0."""
    g = v.grid
    div = sum(stencils.central(v.components[ax], ax, h) for ax, h in enumerate(g.spacing))
    div = np.where(g.boundary_mask(), 0.0, div)
    return ScalarField(g, div)


# -- diffusion tensors ------------------------------------------------------

def cayley_entries(b):
    """Cayley retraction ``(I + A/2)(I - A/2)^-1`` with ``A = B - B^T``, in closed form.

    ``b`` is ``[s]`` (2D) or ``[s1, s2, s3]`` (3D), with B's upper triangle
    ``B[0,1] = s1, B[0,2] = s2, B[1,2] = s3``. Returns ``U`` as nested lists
    ``U[row][col]``; works elementwise on plain or taped arrays.
    """
    if len(b) == 1:
        (s,) = b
        s2 = ad.square(s)
        inv = 1.0 / (s2 + 4.0)
        c = (4.0 - s2) * inv
        sn = 4.0 * s * inv
        return [[c, sn], [-sn, c]]
    s1, s2, s3 = b
    q1, q2, q3 = ad.square(s1), ad.square(s2), ad.square(s3)
    inv = 1.0 / (q1 + q2 + q3 + 4.0)
    s12, s13, s23 = s1 * s2, s1 * s3, s2 * s3
    return [
        [(4.0 - q1 - q2 + q3) * inv, (4.0 * s1 - 2.0 * s23) * inv, (4.0 * s2 + 2.0 * s13) * inv],
        [(-4.0 * s1 - 2.0 * s23) * inv, (4.0 - q1 + q2 - q3) * inv, (4.0 * s3 - 2.0 * s12) * inv],
        [(2.0 * s13 - 4.0 * s2) * inv, (-2.0 * s12 - 4.0 * s3) * inv, (4.0 + q1 - q2 - q3) * inv],
    ]


def cayley(b) -> np.ndarray:
    """Rotation matrix for skew parameters ``b`` of shape ``(n_skew, ...)``.

    Returns shape ``(..., d, d)``. A single cell is ``b = [s]`` or ``[s1, s2, s3]``.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] not in (1, 3):
        raise ValueError("expected 1 (2D) or 3 (3D) skew parameters")
    u = cayley_entries(list(b))
    return np.stack([np.stack(row, axis=-1) for row in u], axis=-2)


def tensor_entries_from_params(b, lam_raw):
    """Stored entries of ``U diag(relu(lam_raw)) U^T``, plus ``U`` and the rectified eigenvalues."""
    d = len(lam_raw)
    u = cayley_entries(b)
    lam = [ad.relu(l) for l in lam_raw]
    entries = []
    for r, c in tensor_entry_index(d):
        acc = None
        for i in range(d):
            term = lam[i] * (u[r][i] * u[c][i])
            acc = term if acc is None else acc + term
        entries.append(acc)
    return entries, u, lam


def build_tensor(params: TensorParams) -> TensorField:
    entries, _, _ = tensor_entries_from_params(list(params.b), list(params.lam_raw))
    return TensorField(params.grid, np.stack(entries))


# -- symmetric eigen-decomposition -----------------------------------------

@dataclass(frozen=True)
class EigenDecomp:
    """Per-cell eigenpairs sorted by descending eigenvalue.

    ``eigvals`` has shape ``(d, *dims)``; ``eigvecs[i]`` is the i-th unit
    eigenvector with shape ``(d, *dims)``.
    """

    grid: Grid
    eigvals: np.ndarray
    eigvecs: np.ndarray

    def eigval_fields(self) -> list[ScalarField]:
        return [ScalarField(self.grid, v) for v in self.eigvals]

    def eigvec_fields(self) -> list[VectorField]:
        return [VectorField(self.grid, v) for v in self.eigvecs]

    def reconstruct(self) -> TensorField:
        mat = np.einsum("i...,ai...,bi...->...ab", self.eigvals,
                        np.moveaxis(self.eigvecs, 0, 1), np.moveaxis(self.eigvecs, 0, 1))
        return TensorField.from_matrix(self.grid, mat)


def sign_convention(vec: np.ndarray) -> np.ndarray:
    """Flip vectors (component axis 0) so the first largest-magnitude component is >= 0."""
    mag = np.abs(vec)
    top = mag.max(axis=0)
    # first component within roundoff of the largest magnitude
    first = np.argmax(mag >= top - 1e-12 * np.maximum(top, 1.0), axis=0)
    lead = np.take_along_axis(vec, first[None], axis=0)[0]
    return np.where(lead < 0, -vec, vec) + 0.0  # + 0.0 folds -0.0 into 0.0


def _eig2(a, b, c):
    m = 0.5 * (a + c)
    half = 0.5 * (a - c)
    r = np.hypot(half, b)
    theta = 0.5 * np.arctan2(b, half)
    ct, st = np.cos(theta), np.sin(theta)
    vals = np.stack([m + r, m - r])
    vecs = np.stack([np.stack([ct, st]), np.stack([-st, ct])])
    return vals, vecs


def _cross(a, b):
    return np.stack([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _matvec(m, v):
    return np.stack([m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2] for r in range(3)])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _safe_div(num, den):
    return num / np.where(den == 0, 1.0, den)


def _evec_for(m, lam):
    """Unit null vector of ``m - lam I`` for a simple eigenvalue (row cross products)."""
    rows = [np.stack([m[r][0] - (lam if r == 0 else 0), m[r][1] - (lam if r == 1 else 0),
                      m[r][2] - (lam if r == 2 else 0)]) for r in range(3)]
    cands = [_cross(rows[0], rows[1]), _cross(rows[0], rows[2]), _cross(rows[1], rows[2])]
    norms = np.stack([_dot(c, c) for c in cands])
    pick = np.argmax(norms, axis=0)
    best = np.where(pick == 0, cands[0], np.where(pick == 1, cands[1], cands[2]))
    n = np.sqrt(norms.max(axis=0))
    return _safe_div(best, n)


def _evec_in_complement(m, w, lam):
    """Eigenvector for ``lam`` inside the plane orthogonal to unit vector ``w``."""
    use_x = np.abs(w[0]) > np.abs(w[1])
    inv_a = 1.0 / np.sqrt(np.where(use_x, w[0] ** 2 + w[2] ** 2, 1.0))
    inv_b = 1.0 / np.sqrt(np.where(use_x, 1.0, w[1] ** 2 + w[2] ** 2))
    zero = np.zeros_like(w[0])
    u = np.where(use_x, np.stack([-w[2] * inv_a, zero, w[0] * inv_a]),
                 np.stack([zero, w[2] * inv_b, -w[1] * inv_b]))
    v = _cross(w, u)
    au, av = _matvec(m, u), _matvec(m, v)
    m00 = _dot(u, au) - lam
    m01 = _dot(u, av)
    m11 = _dot(v, av) - lam
    a00, a01, a11 = np.abs(m00), np.abs(m01), np.abs(m11)

    # branch: |m00| >= |m11|
    r1 = _safe_div(m01, m00)
    x1 = 1.0 / np.sqrt(1.0 + r1 * r1)
    vec_a1 = (r1 * x1) * u - x1 * v
    r2 = _safe_div(m00, m01)
    y2 = 1.0 / np.sqrt(1.0 + r2 * r2)
    vec_a2 = y2 * u - (r2 * y2) * v
    vec_a = np.where(a00 >= a01, vec_a1, vec_a2)
    vec_a = np.where(np.maximum(a00, a01) > 0, vec_a, u)

    # branch: |m11| > |m00|
    r3 = _safe_div(m01, m11)
    x3 = 1.0 / np.sqrt(1.0 + r3 * r3)
    vec_b1 = x3 * u - (r3 * x3) * v
    r4 = _safe_div(m11, m01)
    y4 = 1.0 / np.sqrt(1.0 + r4 * r4)
    vec_b2 = (r4 * y4) * u - y4 * v
    vec_b = np.where(a11 >= a01, vec_b1, vec_b2)
    vec_b = np.where(np.maximum(a11, a01) > 0, vec_b, u)

    return np.where(a00 >= a11, vec_a, vec_b)


def _jacobi3(mats: np.ndarray, sweeps: int = 12):
    """Cyclic Jacobi on a batch of symmetric 3x3 matrices ``(n, 3, 3)``."""
    a = mats.copy()
    v = np.broadcast_to(np.eye(3), a.shape).copy()
    idx = np.arange(len(a))
    for _ in range(sweeps):
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = np.abs(apq) > 0
            theta = _safe_div(a[:, q, q] - a[:, p, p], 2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), a.shape).copy()
            rot[idx, p, p] = c
            rot[idx, q, q] = c
            rot[idx, p, q] = s
            rot[idx, q, p] = -s
            a = np.einsum("nji,njk,nkl->nil", rot, a, rot)
            v = np.einsum("nij,njk->nik", v, rot)
    return np.einsum("nii->ni", a), v


def _eig3(e):
    """Analytic eigen-decomposition of symmetric 3x3 matrices (flattened cells)."""
    a00, a01, a11, a02, a12, a22 = e
    maxabs = np.max(np.abs(e), axis=0)
    scale = np.where(maxabs > 0, maxabs, 1.0)
    a00, a01, a11, a02, a12, a22 = (x / scale for x in (a00, a01, a11, a02, a12, a22))
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p = np.sqrt((b00 ** 2 + b11 ** 2 + b22 ** 2 + 2.0 * (a01 ** 2 + a02 ** 2 + a12 ** 2)) / 6.0)
    iso = p <= 1e-12
    ps = np.where(iso, 1.0, p)
    c00, c11, c22, c01, c02, c12 = b00 / ps, b11 / ps, b22 / ps, a01 / ps, a02 / ps, a12 / ps
    det = (c00 * (c11 * c22 - c12 * c12) - c01 * (c01 * c22 - c12 * c02)
           + c02 * (c01 * c12 - c11 * c02))
    half_det = np.clip(0.5 * det, -1.0, 1.0)
    angle = np.arccos(half_det) / 3.0
    beta2 = 2.0 * np.cos(angle)
    beta0 = 2.0 * np.cos(angle + 2.0 * np.pi / 3.0)
    beta1 = -(beta0 + beta2)
    vals = np.stack([q + p * beta2, q + p * beta1, q + p * beta0])

    m = [[a00, a01, a02], [a01, a11, a12], [a02, a12, a22]]
    # solve first for the eigenvalue farthest from the other two
    first_top = half_det >= 0
    lam_first = np.where(first_top, vals[0], vals[2])
    w = _evec_for(m, lam_first)
    mid = _evec_in_complement(m, w, vals[1])
    third = _cross(w, mid)
    v_top = np.where(first_top, w, third)
    v_bot = np.where(first_top, third, w)
    vecs = np.stack([v_top, mid, v_bot])

    eye = np.eye(3)[:, :, None] * np.ones_like(q)
    vals = np.where(iso, q, vals)
    vecs = np.where(iso, eye, vecs)

    # near-degenerate pairs go to Jacobi for deterministic, well-conditioned vectors
    gap = np.minimum(beta2 - beta1, beta1 - beta0)
    fallback = (~iso) & (gap <= 1e-12)
    mats = np.stack([np.stack(row) for row in m])  # (3, 3, n)
    res = (np.einsum("abn,ibn->ian", mats, vecs) - vals[:, None, :] * vecs)
    bad = np.sqrt(np.sum(res ** 2, axis=(0, 1))) > 1e-12
    fallback |= (~iso) & bad
    if np.any(fallback):
        sel = np.flatnonzero(fallback)
        jv, jvec = _jacobi3(np.moveaxis(mats[:, :, sel], -1, 0))
        order = np.argsort(-jv, axis=1, kind="stable")
        jv = np.take_along_axis(jv, order, axis=1)
        jvec = np.take_along_axis(jvec, order[:, None, :], axis=2)  # columns are vectors
        vals[:, sel] = jv.T
        vecs[:, :, sel] = np.transpose(jvec, (2, 1, 0))
    return vals * scale, vecs


def eig_sym(d: TensorField) -> EigenDecomp:
    """Eigenvalues (descending) and unit eigenvectors of every cell's tensor.

    2x2 cells use the closed form; 3x3 cells use the trigonometric solution
    with a Jacobi fallback near repeated eigenvalues. Pure and deterministic.
    """
    g = d.grid
    flat = d.entries.reshape(len(d.entries), -1)
    # both branches of the vectorized selects are evaluated; silence the unused ones
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if g.ndim == 2:
            vals, vecs = _eig2(*flat)
        else:
            vals, vecs = _eig3(flat)
    vecs = sign_convention(np.moveaxis(vecs, 1, 0))  # component axis first
    vecs = np.moveaxis(vecs, 0, 1)
    n = g.ndim
    vals = vals.reshape((n, *g.dims))
    vecs = vecs.reshape((n, n, *g.dims))
    vals.setflags(write=False)
    vecs.setflags(write=False)
    return EigenDecomp(g, vals, vecs)


# -- persistence ------------------------------------------------------------

def write_params(params: PhysicsParams, directory) -> None:
    """Directory of ADGF scalar files plus ``manifest.json`` listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"bc": params.psi.bc}
    for key, arr in params.arrays().items():
        names = []
        for i, comp in enumerate(arr):
            name = f"{key}_{i}.adgf"
            write_field(ScalarField(params.grid, comp), directory / name)
            names.append(name)
        manifest[key] = names
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_params(directory) -> PhysicsParams:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise FieldFormatError(f"no manifest.json in {directory}") from None
    arrays = {}
    grid = None
    for key in ("psi", "b", "lam_raw"):
        if key not in manifest:
            raise FieldFormatError(f"params manifest lacks {key!r}")
        comps = []
        for name in manifest[key]:
            f = read_field(directory / name)
            if grid is None:
                grid = f.grid
            elif f.grid != grid:
                raise FieldFormatError("parameter files disagree on the grid")
            comps.append(f.data)
        arrays[key] = np.stack(comps)
    return PhysicsParams.from_arrays(grid, bc=manifest.get("bc", "normal"), **arrays)
