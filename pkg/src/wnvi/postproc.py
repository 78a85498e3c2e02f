"""Posterior field statistics, field-file serialization, heatmap rendering.

Field files are plain text with a pinned format: a header line
``wnvi-field v1 <kind> <n> <components>`` (kind: elem | node | point, n:
nodes per side of the owning grid), optional ``# key=value`` metadata
lines, then one row per entity ``index v1 [v2 ...]`` with 17-significant-
digit floats, so write -> read -> write round-trips bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import invgamma

from .fields import dirichlet_mask
from .inference import GammaPosterior, ProblemSetup, sample_posterior_arrays
from .mesh import TriMesh
from .residuals import locate_cells


class FieldFormatError(ValueError):
    """Malformed field file; message carries the offending line number."""


# ---------------------------------------------------------------------------
# Monte Carlo statistics


@dataclass
class FieldStats:
    """Per-location posterior summaries (mean, variance, 2.5/97.5%
    quantiles) plus an envelope flag where ground truth is known."""

    mean: np.ndarray
    variance: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    envelope: np.ndarray | None = None

    def as_columns(self) -> np.ndarray:
        cols = [self.mean, self.variance, self.q025, self.q975]
        if self.envelope is not None:
            cols.append(self.envelope.astype(float))
        return np.column_stack(cols)


def mc_field_stats(samples: np.ndarray, truth: np.ndarray | None = None) -> FieldStats:
    """Location-wise Monte Carlo mean/variance (1/B normalization) and
    linear-interpolation quantiles over axis 0."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples for a variance estimate")
    mean = samples.mean(axis=0)
    variance = np.mean((samples - mean) ** 2, axis=0)
    q025 = np.quantile(samples, 0.025, axis=0)
    q975 = np.quantile(samples, 0.975, axis=0)
    envelope = None
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        envelope = (q025 <= truth) & (truth <= q975)
        envelope &= np.isfinite(truth)
    return FieldStats(mean, variance, q025, q975, envelope)


def lamc_inv_stats(lam: GammaPosterior) -> FieldStats:
    """Analytic inverse-precision summaries from the Gamma posterior.

    The inverse-Gamma mean b/(a-1) needs a > 1; with a = a0 + 1/2 it does
    not exist, so the indicator falls back to b/a (the inverse of the
    posterior-mean precision).  Quantiles always come from the
    inverse-Gamma quantile function.
    """
    a, b = lam.a, lam.b
    with np.errstate(divide="ignore", over="ignore"):
        mean = np.where(a > 1, b / np.maximum(a - 1, 1e-300), b / a)
        variance = np.where(a > 2, b**2 / (np.maximum(a - 1, 1e-300)**2
                                           * np.maximum(a - 2, 1e-300)), np.inf)
    q025 = invgamma.ppf(0.025, a, scale=b)
    q975 = invgamma.ppf(0.975, a, scale=b)
    return FieldStats(mean, variance, q025, q975)


def posterior_stats(setup: ProblemSetup, params: dict, lam: GammaPosterior,
                    B: int, seed: int, truth: dict | None = None) -> dict:
    """Draw B posterior samples and summarize the seven reported fields.

    ln E and the stress components live on the inversion elements, u on
    the observation grid, lambda_c^{-1} analytically on the collocation
    points.  `truth` may carry arrays under keys matching the field names.
    """
    if B < 2:
        raise ValueError("need B >= 2 posterior samples")
    truth = truth or {}
    Z, X, Chi = sample_posterior_arrays(setup, params, B, seed)
    n = setup.mesh.n_elements

    be = setup.displacement.basis(params, setup.obs.points)
    d, _ = (dirichlet_mask(setup.obs.points, setup.cfg.fixed_edges)
            if setup.cfg.displacement_basis == "nn"
            else (np.ones(len(setup.obs.points)), None))
    u1 = d[:, None] * (be.b1.data @ Z.T)       # (n_obs, B)
    u2 = d[:, None] * (be.b2.data @ Z.T)

    stats = {
        "lnE": mc_field_stats(X, truth.get("lnE")),
        "u1": mc_field_stats(u1.T, truth.get("u1")),
        "u2": mc_field_stats(u2.T, truth.get("u2")),
        "s11": mc_field_stats(Chi[:, :n], truth.get("s11")),
        "s12": mc_field_stats(Chi[:, n:2 * n], truth.get("s12")),
        "s22": mc_field_stats(Chi[:, 2 * n:], truth.get("s22")),
        "lamc_inv": lamc_inv_stats(lam),
    }
    return stats


def element_to_node_average(mesh: TriMesh, elem_values: np.ndarray) -> np.ndarray:
    """Average a per-element field onto nodes (display parity only)."""
    total = np.zeros(mesh.n_nodes)
    count = np.zeros(mesh.n_nodes)
    np.add.at(total, mesh.elements.ravel(),
              np.repeat(np.asarray(elem_values, dtype=float), 3))
    np.add.at(count, mesh.elements.ravel(), 1.0)
    return total / count


# ---------------------------------------------------------------------------
# field files

_KINDS = ("elem", "node", "point")


def _row_count(kind: str, n: int) -> int:
    return {"elem": 2 * (n - 1) ** 2, "node": n * n, "point": n * n}[kind]


def write_field(path, kind: str, n: int, values: np.ndarray,
                meta: dict | None = None) -> None:
    """Write one field file; values is (rows,) or (rows, components)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if kind not in _KINDS:
        raise ValueError(f"unknown field kind {kind!r}")
    rows = _row_count(kind, n)
    if values.shape[0] != rows:
        raise ValueError(f"expected {rows} rows for kind={kind} n={n}, "
                         f"got {values.shape[0]}")
    lines = [f"wnvi-field v1 {kind} {n} {values.shape[1]}"]
    for key in sorted((meta or {}).keys()):
        lines.append(f"# {key}={meta[key]}")
    for i, row in enumerate(values):
        lines.append(f"{i} " + " ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_field(path):
    """Parse a field file; returns (kind, n, values, meta)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FieldFormatError(f"{path}: empty file (line 1)")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "wnvi-field" or head[1] != "v1":
        raise FieldFormatError(f"{path}: bad header (line 1): {lines[0]!r}")
    kind, n, comp = head[2], int(head[3]), int(head[4])
    if kind not in _KINDS:
        raise FieldFormatError(f"{path}: unknown kind {kind!r} (line 1)")
    meta = {}
    r = 1
    while r < len(lines) and lines[r].startswith("#"):
        body = lines[r][1:].strip()
        if "=" in body:
            k, v = body.split("=", 1)
            meta[k.strip()] = v.strip()
        r += 1
    rows = _row_count(kind, n)
    values = np.empty((rows, comp))
    for i in range(rows):
        ln = r + i
        if ln >= len(lines):
            raise FieldFormatError(f"{path}: truncated file, expected row {i} "
                                   f"(line {ln + 1})")
        parts = lines[ln].split()
        if len(parts) != comp + 1 or int(parts[0]) != i:
            raise FieldFormatError(f"{path}: malformed row (line {ln + 1}): "
                                   f"{lines[ln]!r}")
        values[i] = [float(p) for p in parts[1:]]
    return kind, n, values, meta


# ---------------------------------------------------------------------------
# heatmaps

# three-anchor linear colormap (dark violet -> teal -> yellow)
_CMAP_ANCHORS = np.array([[68, 1, 84], [33, 145, 140], [253, 231, 37]],
                         dtype=float)


def _colorize(t: np.ndarray) -> np.ndarray:
    """Map t in [0,1] to RGB bytes via piecewise-linear anchor blending."""
    t = np.clip(t, 0.0, 1.0)
    seg = np.clip((t * 2).astype(int), 0, 1)
    frac = t * 2 - seg
    lo = _CMAP_ANCHORS[seg]
    hi = _CMAP_ANCHORS[seg + 1]
    rgb = lo + frac[:, None] * (hi - lo)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_heatmap(values: np.ndarray, mesh: TriMesh, path,
                   vmin: float | None = None, vmax: float | None = None,
                   px: int = 192) -> None:
    """Rasterize a per-element field to a binary PPM (P6) image.

    Pixel centers map to elements with the same structured lookup used by
    the MC integrator; bytes are deterministic for fixed input.  NaN cells
    render gray.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0 or values.shape[0] != mesh.n_elements:
        raise ValueError("per-element value count does not match the mesh")
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise ValueError("field has no finite values")
    lo = float(finite.min()) if vmin is None else vmin
    hi = float(finite.max()) if vmax is None else vmax
    xs = (np.arange(px) + 0.5) / px
    ys = 1.0 - (np.arange(px) + 0.5) / px       # row 0 at the top
    xx, yy = np.meshgrid(xs, ys)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    v = values[locate_cells(mesh, pts)]
    if hi > lo:
        t = (v - lo) / (hi - lo)
    else:
        t = np.full_like(v, 0.5)
    rgb = _colorize(np.nan_to_num(t, nan=0.0))
    rgb[~np.isfinite(v)] = 128
    with open(path, "wb") as fh:
        fh.write(f"P6\n{px} {px}\n255\n".encode())
        fh.write(rgb.tobytes())


# ---------------------------------------------------------------------------
# trace CSV

TRACE_HEADER = "iter,elbo,res_cons,res_const,data_fit"


def write_trace_csv(path, trace: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in np.atleast_2d(trace):
            fh.write(f"{int(row[0])}," + ",".join(f"{v:.17g}" for v in row[1:])
                     + "\n")


def read_trace_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise FieldFormatError(f"{path}: bad trace header (line 1)")
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
