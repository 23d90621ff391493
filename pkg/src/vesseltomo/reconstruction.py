"""Volume recovery from projection stacks.

Two routes are provided. fbp() is the classical filtered back projection:
each view is ramp-filtered along the detector u axis in the frequency domain
(zero-padded to the next power of two to avoid circular wrap), backprojected
with the exact adjoint operator, and scaled by pi / (2 * n_views).

suppress_artifacts() is a Landweber descent on || A T - target ||^2:
    T <- T - lam * A^T (A T - target)
with lam = 1 / sigma_max(A)^2 estimated by power iteration from a fixed
all-ones start, which makes the run fully deterministic. Initializing T with
a CT-like volume and iterating a few times dims structures that are
inconsistent with the target projections while keeping consistent ones.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ProjectionGeometry,
    SystemMatrix,
    _op_adjoint,
    _op_forward,
    _op_geometry,
)
from .projection import ProjectionStack
from .volume import Volume, VolumeKind

_FILTERS = ("ram-lak", "hann")


class DivergenceError(Exception):
    """Residual grew on two consecutive iterations or became non-finite."""

    def __init__(self, message: str, trace: "OptimizerTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class FbpConfig:
    """Ramp filter family and its normalized cutoff frequency.

    filter_name is "ram-lak" or "hann"; cutoff is a fraction of the detector
    Nyquist frequency in (0, 1].
    """

    filter_name: str = "ram-lak"
    cutoff: float = 1.0

    def __post_init__(self) -> None:
        if self.filter_name not in _FILTERS:
            raise ValueError(f"filter must be one of {_FILTERS}, got {self.filter_name!r}")
        if not (0.0 < self.cutoff <= 1.0):
            raise ValueError(f"cutoff must be in (0, 1], got {self.cutoff}")


@dataclass(frozen=True)
class OptimizerConfig:
    """Landweber settings.

    step_size None selects 1 / sigma_max^2 via power iteration with
    power_iterations matrix applications; a float fixes the step explicitly.
    """

    n_iterations: int = 10
    step_size: float | None = None
    power_iterations: int = 20

    def __post_init__(self) -> None:
        if self.n_iterations < 1:
            raise ValueError(f"n_iterations must be >= 1, got {self.n_iterations}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.power_iterations < 1:
            raise ValueError(f"power_iterations must be >= 1, got {self.power_iterations}")


@dataclass
class OptimizerTrace:
    """Squared residual history; residuals[0] is the pre-iteration value.

    step_sizes[i] is the step applied to go from iterate i to i+1.
    """

    residuals: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual", "step_size"])
            for i, r in enumerate(self.residuals):
                step = self.step_sizes[i - 1] if i > 0 else 0.0
                w.writerow([i, repr(float(r)), repr(float(step))])


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def _ramp_response(nu: int, du: float, config: FbpConfig) -> tuple[int, np.ndarray]:
    """Frequency response of the chosen ramp filter on the padded grid."""
    padded = _next_pow2(2 * nu)
    freqs = np.fft.rfftfreq(padded, d=du)
    response = freqs.copy()
    f_cut = config.cutoff * 0.5 / du
    if config.filter_name == "hann":
        response *= 0.5 * (1.0 + np.cos(np.pi * np.minimum(freqs, f_cut) / f_cut))
    response[freqs > f_cut] = 0.0
    return padded, response


def filter_stack(stack: ProjectionStack, config: FbpConfig = FbpConfig()) -> ProjectionStack:
    """Ramp-filter every view along u in the frequency domain."""
    nu = stack.nu
    du = stack.geometry.detector_spacing[0]
    padded, response = _ramp_response(nu, du, config)
    spectra = np.fft.rfft(stack.data, n=padded, axis=-1)
    filtered = np.fft.irfft(spectra * response, n=padded, axis=-1)[..., :nu]
    return ProjectionStack(filtered, stack.geometry)


def fbp(
    stack: ProjectionStack,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    config: FbpConfig = FbpConfig(),
    workers: int = 1,
) -> Volume:
    """Filtered back projection onto a grid of the given dims and spacing."""
    filtered = filter_stack(stack, config)
    geom = stack.geometry
    back = _op_adjoint(geom, filtered.data, tuple(int(d) for d in dims), spacing, workers)
    back *= np.pi / (2.0 * geom.n_views)
    return Volume(back.astype(np.float32), spacing, VolumeKind.INTENSITY)


def _estimate_sigma_sq(op, dims, spacing, power_iterations: int, workers: int) -> float:
    """Largest eigenvalue of A^T A by power iteration from an all-ones start."""
    nx, ny, nz = dims
    w = np.ones((nz, ny, nx), dtype=np.float64)
    w /= np.linalg.norm(w.ravel())
    sigma_sq = 0.0
    for _ in range(power_iterations):
        fw = _op_forward(op, w, spacing, workers)
        w = _op_adjoint(op, fw, dims, spacing, workers)
        sigma_sq = float(np.linalg.norm(w.ravel()))
        if sigma_sq == 0.0:
            return 0.0
        w /= sigma_sq
    return sigma_sq


def _stack_sq_norm(arr: np.ndarray) -> float:
    # Summed per view first so the value does not depend on worker count.
    per_view = np.einsum("vij,vij->v", arr, arr)
    return float(per_view.sum())


def suppress_artifacts(
    target: ProjectionStack,
    init: Volume,
    config: OptimizerConfig = OptimizerConfig(),
    system_matrix: SystemMatrix | None = None,
    workers: int = 1,
) -> tuple[Volume, OptimizerTrace]:
    """Landweber iterations driving A T toward the target projections.

    Returns the optimized volume and the residual trace. Raises
    DivergenceError when the squared residual grows on two consecutive
    iterations or stops being finite.
    """
    op = system_matrix if system_matrix is not None else target.geometry
    geom = _op_geometry(op)
    if geom != target.geometry:
        raise ValueError("system matrix geometry does not match target stack")
    if system_matrix is not None and tuple(system_matrix.dims) != tuple(init.dims):
        raise ValueError(
            f"init dims {init.dims} do not match system matrix dims {system_matrix.dims}"
        )
    dims = init.dims
    spacing = init.spacing
    b = target.data.astype(np.float64, copy=False)
    x = init.data.astype(np.float64)

    if config.step_size is not None:
        lam = config.step_size
    else:
        sigma_sq = _estimate_sigma_sq(op, dims, spacing, config.power_iterations, workers)
        lam = 1.0 / sigma_sq if sigma_sq > 0.0 else 0.0

    trace = OptimizerTrace()
    r = _op_forward(op, x, spacing, workers) - b
    trace.residuals.append(_stack_sq_norm(r))
    growth_streak = 0
    for _ in range(config.n_iterations):
        g = _op_adjoint(op, r, dims, spacing, workers)
        x -= lam * g
        r = _op_forward(op, x, spacing, workers) - b
        res = _stack_sq_norm(r)
        trace.residuals.append(res)
        trace.step_sizes.append(lam)
        if not np.isfinite(res):
            raise DivergenceError(f"residual became non-finite ({res})", trace)
        if res > trace.residuals[-2]:
            growth_streak += 1
            if growth_streak >= 2:
                raise DivergenceError(
                    f"residual grew on two consecutive iterations (last {res})", trace
                )
        else:
            growth_streak = 0
    return Volume(x.astype(np.float32), spacing, VolumeKind.INTENSITY), trace


def _min_max_scaled(volume: Volume) -> Volume:
    data = volume.data.astype(np.float64)
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        return Volume(np.zeros_like(data, dtype=np.float32), volume.spacing, VolumeKind.INTENSITY)
    return Volume(
        ((data - lo) / (hi - lo)).astype(np.float32), volume.spacing, VolumeKind.INTENSITY
    )


def reconstruct_pipeline(
    target: ProjectionStack,
    ct: Volume,
    optimizer: OptimizerConfig = OptimizerConfig(),
    init_mode: str = "ct",
    scale_init: bool = True,
    fbp_config: FbpConfig = FbpConfig(),
    system_matrix: SystemMatrix | None = None,
    workers: int = 1,
) -> Volume:
    """Artifact-suppressed reconstruction with a choice of initialization.

    init_mode "ct" starts from the CT volume (min-max scaled to [0, 1] unless
    scale_init is False); "fbp" starts from a filtered back projection of the
    target stack on the CT grid.
    """
    if init_mode == "ct":
        init = _min_max_scaled(ct) if scale_init else ct
    elif init_mode == "fbp":
        init = fbp(target, ct.dims, ct.spacing, fbp_config, workers)
    else:
        raise ValueError(f"init_mode must be 'ct' or 'fbp', got {init_mode!r}")
    volume, _ = suppress_artifacts(
        target, init, optimizer, system_matrix=system_matrix, workers=workers
    )
    return volume
