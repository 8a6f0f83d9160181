"""Thin plate spline fitting and the annealed soft-assign registration solver.

A mapping f(p) = d(p) + sum_i w_i * U(|p - v_i|) combines an affine part d
with a kernel warp anchored at control points v_i, where U(r) = r^2 log(r^2).
Fitting minimizes sum_i |u_i - f(v_i)|^2 + lambda * trace(w' K w); the solver
pre-normalizes both clouds (zero mean, unit RMS radius) for conditioning and
converts the solution back, so stored coefficients always act on original
coordinates.

The registration solver alternates a softassign correspondence update with a
weighted spline refit inside a deterministic annealing loop; one extra row and
column of the correspondence matrix absorb outliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import as_points
from .errors import DegenerateControlPointsError, InsufficientPointsError, ValidationError

MAX_CONTROL_POINTS = 1000
_SIDE_CONDITION_TOL = 1e-8


def tps_kernel(r) -> np.ndarray:
    """Radial kernel U(r) = r^2 log(r^2), with the removable singularity U(0) = 0."""
    r = np.asarray(r, dtype=float)
    r2 = r * r
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TpsMapping:
    """A fitted spline: control points, 3x3 affine (homogeneous), and warp coefficients."""

    control_points: np.ndarray
    affine: np.ndarray
    warp_coeffs: np.ndarray
    lambda_used: float

    def __post_init__(self):
        cps = as_points(self.control_points)
        aff = np.asarray(self.affine, dtype=float)
        w = np.asarray(self.warp_coeffs, dtype=float)
        if aff.shape != (3, 3):
            raise ValidationError("affine must be 3x3")
        if w.shape != (len(cps), 2):
            raise ValidationError("warp coefficients must be (N, 2)")
        if not (np.all(np.isfinite(aff)) and np.all(np.isfinite(w))):
            raise ValidationError("mapping coefficients must be finite")
        for arr in (cps, aff, w):
            arr.setflags(write=False)
        object.__setattr__(self, "control_points", cps)
        object.__setattr__(self, "affine", aff)
        object.__setattr__(self, "warp_coeffs", w)

    @staticmethod
    def identity(control_points) -> "TpsMapping":
        cps = as_points(control_points)
        return TpsMapping(cps, np.eye(3), np.zeros((len(cps), 2)), 0.0)


def apply_tps(f: TpsMapping, pts) -> np.ndarray:
    """Evaluate the mapping at ``pts`` in original (un-normalized) coordinates."""
    pts = as_points(pts)
    if len(pts) == 0:
        return pts.copy()
    ones = np.ones((len(pts), 1))
    affine_part = np.hstack([pts, ones]) @ f.affine.T
    d = np.sqrt(((pts[:, None, :] - f.control_points[None, :, :]) ** 2).sum(-1))
    warp_part = tps_kernel(d) @ f.warp_coeffs
    return affine_part[:, :2] + warp_part


def bending_energy(f: TpsMapping) -> float:
    """trace(w' K w) with K the kernel matrix at the control points; >= 0."""
    cps = f.control_points
    d = np.sqrt(((cps[:, None, :] - cps[None, :, :]) ** 2).sum(-1))
    k = tps_kernel(d)
    val = float(np.trace(f.warp_coeffs.T @ k @ f.warp_coeffs))
    return max(val, 0.0)


def _normalize_cloud(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Shift to zero mean and scale to unit RMS radius; returns (pts, center, scale)."""
    c = pts.mean(axis=0)
    centered = pts - c
    s = float(np.sqrt((centered**2).sum(axis=1).mean()))
    if s <= 0.0:
        s = 1.0
    return centered / s, c, s


def _collinear(pts: np.ndarray, tol: float = 1e-9) -> bool:
    """True when the (normalized) points span less than a 2-D affine frame."""
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return len(sv) < 2 or sv[1] <= tol * max(sv[0], 1.0)


def fit_tps(u, v, lam: float, weights=None, affine_reg: float = 0.0) -> TpsMapping:
    """Fit the spline mapping v -> u minimizing data error plus lam * bending.

    ``weights`` are optional per-pair data weights. With lam -> 0 and distinct
    control points the fit interpolates: f(v_i) = u_i.

    ``affine_reg`` additionally penalizes deviation of the affine part from
    the cloud-to-cloud similarity map (the identity between the normalized
    clouds); the registration solver anneals it to keep early iterations from
    collapsing onto the target centroid. It is expressed in normalized units.
    """
    u = as_points(u)
    v = as_points(v)
    n = len(v)
    if len(u) != n:
        raise ValidationError("u and v must pair up one-to-one")
    if n < 3:
        raise InsufficientPointsError(f"need at least 3 point pairs, got {n}")
    if n > MAX_CONTROL_POINTS:
        raise ValidationError(f"control point count {n} exceeds cap {MAX_CONTROL_POINTS}")
    if lam < 0 or affine_reg < 0:
        raise ValidationError("regularization strengths must be >= 0")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n,):
            raise ValidationError("weights must be one scalar per pair")
        if np.any(weights <= 0):
            raise ValidationError("weights must be positive")

    vn, cv, sv = _normalize_cloud(v)
    un, cu, su = _normalize_cloud(u)
    if _collinear(vn):
        raise DegenerateControlPointsError("control points are (near) collinear")

    # lam' = lam / sv^2 keeps the minimized objective equal to the
    # original-coordinate energy with the caller's lambda.
    d = np.sqrt(((vn[:, None, :] - vn[None, :, :]) ** 2).sum(-1))
    k = tps_kernel(d)
    lam_n = lam / (sv * sv)
    p = np.hstack([np.ones((n, 1)), vn])
    if affine_reg == 0.0:
        # Bordered system [[K + lam' W^-1, P], [P', 0]]; the side conditions
        # P' w = 0 emerge from the affine stationarity equations.
        kk = k.copy()
        if lam_n > 0:
            reg = lam_n * (1.0 / weights if weights is not None else np.ones(n))
            kk[np.diag_indices(n)] += reg
        a = np.zeros((n + 3, n + 3))
        a[:n, :n] = kk
        a[:n, n:] = p
        a[n:, :n] = p.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = un
        try:
            sol = np.linalg.solve(a, rhs)
        except np.linalg.LinAlgError as exc:
            raise DegenerateControlPointsError(f"singular spline system: {exc}") from exc
        w_n = sol[:n]
        aff_n = sol[n:]  # rows: [t; ax; ay] acting on [1, x, y]
    else:
        # Null-space parameterization w = Q2 g keeps P' w = 0 exact while the
        # affine part is free to be penalized. Solved as one stacked
        # least-squares problem so interpolation stays well conditioned.
        q, _ = np.linalg.qr(p, mode="complete")
        q2 = q[:, 3:]
        b = k @ q2
        bend = q2.T @ k @ q2
        evals, evecs = np.linalg.eigh(bend)
        evals = np.clip(evals, 0.0, None)
        bend_root = np.sqrt(evals)[:, None] * evecs.T
        sqw = np.sqrt(weights) if weights is not None else np.ones(n)
        m = n - 3
        design = np.zeros((n + m + 3, m + 3))
        design[:n, :m] = sqw[:, None] * b
        design[:n, m:] = sqw[:, None] * p
        design[n : n + m, :m] = np.sqrt(lam_n) * bend_root
        design[n + m :, m:] = np.sqrt(affine_reg) * np.eye(3)
        target = np.zeros((n + m + 3, 2))
        target[:n] = sqw[:, None] * un
        target[n + m + 1, 0] = np.sqrt(affine_reg)  # anchor: x-column of identity
        target[n + m + 2, 1] = np.sqrt(affine_reg)  # anchor: y-column of identity
        sol, *_ = np.linalg.lstsq(design, target, rcond=None)
        w_n = q2 @ sol[:m]
        aff_n = sol[m:]

    # Convert the normalized-space solution back to original coordinates.
    # With the side conditions sum(w)=0 and sum(w v)=0, rescaling the kernel
    # argument only adds a constant, which folds into the translation.
    w = (su / (sv * sv)) * w_n
    lin_n = aff_n[1:].T  # 2x2 linear part in normalized space
    t_n = aff_n[0]
    lin = (su / sv) * lin_n
    const_kernel = -(su * np.log(sv * sv) / (sv * sv)) * (
        w_n.T @ (v**2).sum(axis=1)
    )
    t = cu + su * t_n - lin @ cv + const_kernel
    affine = np.eye(3)
    affine[:2, :2] = lin
    affine[:2, 2] = t
    return TpsMapping(v, affine, w, lam)


@dataclass(frozen=True)
class CorrespondenceMatrix:
    """Soft-assign weights between two point sets plus one outlier row/column."""

    m: np.ndarray
    temperature: float

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.ndim != 2:
            raise ValidationError("correspondence matrix must be 2-D")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValidationError("correspondence weights must be finite and >= 0")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def inner(self) -> np.ndarray:
        return self.m[:-1, :-1]

    @property
    def outlier_col(self) -> np.ndarray:
        return self.m[:-1, -1]

    @property
    def outlier_row(self) -> np.ndarray:
        return self.m[-1, :-1]


def update_correspondences(
    u,
    f_of_v,
    temperature: float,
    outlier_temperature: float,
    sinkhorn_iters: int = 20,
) -> CorrespondenceMatrix:
    """Softassign update: Gaussian densities at the given temperature, outlier
    bins scored against the opposite cloud's centroid, then alternating row and
    column normalization.

    Entries carry the 1/temperature density prefactor, so the wide outlier
    Gaussian competes at low density against the sharpening inner bins instead
    of absorbing all mass as annealing proceeds."""
    u = as_points(u)
    fv = as_points(f_of_v)
    if temperature <= 0 or outlier_temperature <= 0:
        raise ValidationError("temperatures must be > 0")
    nu, nv = len(u), len(fv)
    d2 = ((u[:, None, :] - fv[None, :, :]) ** 2).sum(-1)
    m = np.zeros((nu + 1, nv + 1))
    m[:nu, :nv] = np.exp(-d2 / (2.0 * temperature)) / temperature
    cu = u.mean(axis=0) if nu else np.zeros(2)
    cfv = fv.mean(axis=0) if nv else np.zeros(2)
    d2_out_u = ((u - cfv) ** 2).sum(-1)
    d2_out_v = ((fv - cu) ** 2).sum(-1)
    m[:nu, nv] = np.exp(-d2_out_u / (2.0 * outlier_temperature)) / outlier_temperature
    m[nu, :nv] = np.exp(-d2_out_v / (2.0 * outlier_temperature)) / outlier_temperature
    m[nu, nv] = 0.0

    tiny = 1e-300
    for _ in range(sinkhorn_iters):
        row_sums = m[:nu, :].sum(axis=1)
        m[:nu, :] /= np.maximum(row_sums, tiny)[:, None]
        col_sums = m[:, :nv].sum(axis=0)
        m[:, :nv] /= np.maximum(col_sums, tiny)[None, :]
    return CorrespondenceMatrix(m, temperature)


@dataclass(frozen=True)
class TpsRpmParams:
    """Annealing schedule and solver knobs for the registration solver.

    ``outlier_temperature`` of None uses the computed initial temperature.
    Temperatures are in normalized (unit RMS radius) squared-distance units.
    """

    t_init_factor: float = 1.0
    anneal_rate: float = 0.93
    t_final_factor: float = 1.0
    lambda_init: float = 1.0
    sinkhorn_iters: int = 20
    outlier_temperature: Optional[float] = None
    inner_iters: int = 1
    lambda_affine_init: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.anneal_rate < 1.0:
            raise ValidationError("anneal_rate must be in (0, 1)")
        if self.t_init_factor <= 0 or self.t_final_factor <= 0:
            raise ValidationError("temperature factors must be > 0")
        if self.lambda_init < 0 or self.lambda_affine_init < 0:
            raise ValidationError("regularization strengths must be >= 0")
        if self.sinkhorn_iters < 1 or self.inner_iters < 1:
            raise ValidationError("iteration counts must be >= 1")


@dataclass(frozen=True)
class TpsRpmResult:
    """Final correspondences, mapping, registration energy, and its trace.

    ``energy_trace`` rows are (temperature_index, temperature, stage, energy)
    with stage "m" after the correspondence update and "f" after the spline
    refit; the energy is the weighted data term plus lambda * bending.
    """

    correspondence: CorrespondenceMatrix
    mapping: TpsMapping
    energy: float
    energy_trace: tuple

    def __iter__(self):
        # Allows ``m, f = tps_rpm(...)`` unpacking.
        return iter((self.correspondence, self.mapping))


def _registration_energy(m_inner: np.ndarray, u: np.ndarray, fv: np.ndarray, lam: float, f: TpsMapping) -> float:
    d2 = ((u[:, None, :] - fv[None, :, :]) ** 2).sum(-1)
    return float((m_inner * d2).sum() + lam * bending_energy(f))


def _avg_nn_sq(pts: np.ndarray) -> float:
    if len(pts) < 2:
        return 1.0
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    return float(d2.min(axis=1).mean())


def tps_rpm(u, v, params: TpsRpmParams = TpsRpmParams(), init=None) -> TpsRpmResult:
    """Jointly estimate soft correspondences and a spline mapping v -> u.

    ``init`` is an optional warm-start transform (a 3x3 array or an object
    with an ``apply(points)`` method); v is pre-warped by it, and the returned
    mapping acts on the pre-warped points.

    Deterministic annealing: per temperature the correspondence matrix is
    updated from the current mapping, virtual targets are formed from the
    column-normalized weights, and the spline is refit with those weights and
    lambda = lambda_init * T. The per-update energies are recorded.
    """
    u = as_points(u)
    v = as_points(v)
    if len(u) == 0 or len(v) == 0:
        raise InsufficientPointsError("both point sets must be nonempty")
    if init is not None:
        if hasattr(init, "apply"):
            v = init.apply(v)
        else:
            h = np.asarray(init, dtype=float)
            ph = np.hstack([v, np.ones((len(v), 1))]) @ h.T
            v = ph[:, :2] / ph[:, 2:3]

    # Scale-free schedule: temperatures are defined on the jointly normalized
    # clouds and converted back to original squared-pixel units via s2.
    union = np.vstack([u, v])
    _, _, s = _normalize_cloud(union)
    s2 = s * s
    cross = ((u[:, None, :] - v[None, :, :]) ** 2).sum(-1)
    t_init = params.t_init_factor * float(cross.max()) / s2
    t_init = max(t_init, 1e-8)
    t_final = params.t_final_factor * _avg_nn_sq(u) / s2
    t_final = min(max(t_final, 1e-10), t_init * params.anneal_rate)
    t_out = params.outlier_temperature if params.outlier_temperature is not None else t_init

    rms_v = float(np.sqrt(((v - v.mean(axis=0)) ** 2).sum(axis=1).mean()))
    lam_scale = rms_v * rms_v if rms_v > 0 else 1.0

    f = TpsMapping.identity(v)
    trace: list[tuple[int, float, str, float]] = []
    tiny = 1e-12
    n_v = len(v)

    t = t_init
    t_index = 0
    while True:
        lam = params.lambda_init * t * lam_scale
        # Anchor strength starts at lambda_affine_init * n (outweighing the
        # early pull of the near-uniform targets toward their centroid) and
        # fades with the temperature ratio.
        affine_reg = params.lambda_affine_init * n_v * (t / t_init)
        fv = apply_tps(f, v)
        for _ in range(params.inner_iters):
            m = update_correspondences(u, fv, t * s2, t_out * s2, params.sinkhorn_iters)
            trace.append((t_index, t, "m", _registration_energy(m.inner, u, fv, lam, f)))
            col_w = m.inner.sum(axis=0)
            safe_w = np.maximum(col_w, tiny)
            y = (m.inner.T @ u) / safe_w[:, None]
            # Columns with (numerically) no mass keep their current image so
            # they cannot drag the fit anywhere.
            empty = col_w <= tiny
            if np.any(empty):
                y[empty] = fv[empty]
            f = fit_tps(y, v, lam, weights=safe_w, affine_reg=affine_reg)
            fv = apply_tps(f, v)
            trace.append((t_index, t, "f", _registration_energy(m.inner, u, fv, lam, f)))
        if t <= t_final:
            break
        t = max(t * params.anneal_rate, t_final)
        t_index += 1

    return TpsRpmResult(m, f, trace[-1][3], tuple(trace))
