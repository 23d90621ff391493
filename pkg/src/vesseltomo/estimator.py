"""Pluggable estimation of vessel integral projections from top-k input.

The learned model that predicts vessel projections from top-k condition
images is out of scope here; this module pins down its interface so the rest
of the pipeline can run against substitutes:

  oracle        returns the supplied ground-truth stack unchanged
  noisy-oracle  ground truth plus seeded Gaussian noise, clamped at zero
  topk-sum      alpha * sum over the k channels, alpha fixed or fitted by
                least squares on a calibration split (even-indexed views)

Estimators are addressed by spec strings of the form
``name`` or ``name:key=value,key=value`` (e.g. "noisy-oracle:sigma=2.5"),
which the CLI accepts verbatim.
"""

import numpy as np

from .projection import ProjectionStack, TopKStack, load_stack, save_stack


class IpEstimator:
    """Interface: turn a top-k condition stack into projection estimates.

    Subclasses set `name`, `deterministic` (same inputs, same output) and
    `requires_ground_truth` (whether estimate() needs the ctx stack), and
    implement _estimate(). Outputs always match the condition geometry and
    are non-negative.
    """

    name = "base"
    deterministic = True
    requires_ground_truth = False

    def estimate(self, cond: TopKStack, ctx: ProjectionStack | None = None) -> ProjectionStack:
        if self.requires_ground_truth and ctx is None:
            raise ValueError(f"estimator {self.name!r} needs a ground-truth stack")
        if ctx is not None and ctx.geometry != cond.geometry:
            raise ValueError("condition and ground-truth stacks use different geometries")
        out = self._estimate(cond, ctx)
        if out.geometry != cond.geometry:
            raise ValueError(f"estimator {self.name!r} changed the stack geometry")
        if float(out.data.min()) < 0.0:
            raise ValueError(f"estimator {self.name!r} produced negative projections")
        return out

    def _estimate(self, cond: TopKStack, ctx: ProjectionStack | None) -> ProjectionStack:
        raise NotImplementedError


class OracleEstimator(IpEstimator):
    """Pass-through of the ground-truth projections."""

    name = "oracle"
    requires_ground_truth = True

    def _estimate(self, cond, ctx):
        return ProjectionStack(ctx.data.copy(), ctx.geometry)


class NoisyOracleEstimator(IpEstimator):
    """Ground truth corrupted by clamped Gaussian noise of fixed seed."""

    name = "noisy-oracle"
    requires_ground_truth = True

    def __init__(self, sigma: float, seed: int = 0):
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        self.sigma = float(sigma)
        self.seed = int(seed)

    def _estimate(self, cond, ctx):
        rng = np.random.Generator(np.random.Philox(key=[self.seed, 3]))
        noisy = ctx.data + rng.normal(0.0, self.sigma, size=ctx.data.shape)
        return ProjectionStack(np.maximum(noisy, 0.0), ctx.geometry)


class TopKSumEstimator(IpEstimator):
    """Scaled channel sum: x = alpha * sum_k cond.

    With alpha None the scale is fitted by least squares against the ground
    truth on the calibration split (even-indexed views); a fixed alpha makes
    the estimator self-contained.
    """

    name = "topk-sum"

    def __init__(self, alpha: float | None = None):
        self.alpha = None if alpha is None else float(alpha)

    @property
    def requires_ground_truth(self) -> bool:
        return self.alpha is None

    def _estimate(self, cond, ctx):
        s = cond.data.sum(axis=1)
        if self.alpha is not None:
            alpha = self.alpha
        else:
            cal = slice(0, cond.geometry.n_views, 2)
            sc = s[cal]
            denominator = float(np.sum(sc * sc))
            alpha = float(np.sum(sc * ctx.data[cal])) / denominator if denominator > 0 else 0.0
        return ProjectionStack(np.maximum(alpha * s, 0.0), cond.geometry)


_REGISTRY = {
    "oracle": OracleEstimator,
    "noisy-oracle": NoisyOracleEstimator,
    "topk-sum": TopKSumEstimator,
}


def parse_estimator_spec(spec: str) -> tuple[IpEstimator, dict]:
    """Parse ``name(:key=value(,key=value)*)?`` into an estimator.

    Returns (estimator, extras) where extras holds keys the constructor does
    not consume, currently just ``gt`` (a ground-truth stack path).
    """
    name, _, arg_text = spec.partition(":")
    name = name.strip()
    if name not in _REGISTRY:
        raise ValueError(f"unknown estimator {name!r}, expected one of {sorted(_REGISTRY)}")
    kwargs: dict = {}
    extras: dict = {}
    if arg_text:
        for item in arg_text.split(","):
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ValueError(f"malformed estimator argument {item!r} in {spec!r}")
            value = value.strip()
            if key == "gt":
                extras["gt"] = value
                continue
            try:
                kwargs[key] = int(value)
            except ValueError:
                try:
                    kwargs[key] = float(value)
                except ValueError:
                    kwargs[key] = value
    try:
        return _REGISTRY[name](**kwargs), extras
    except TypeError as exc:
        raise ValueError(f"bad arguments for estimator {name!r}: {exc}") from exc


def run_estimator_from_files(cond_path: str, spec: str, out_path: str) -> ProjectionStack:
    """File-level driver: load condition, apply the estimator, save result."""
    cond = load_stack(cond_path)
    if not isinstance(cond, TopKStack):
        raise ValueError(f"{cond_path} is not a top-k stack")
    est, extras = parse_estimator_spec(spec)
    ctx = None
    if "gt" in extras:
        ctx = load_stack(extras["gt"])
        if not isinstance(ctx, ProjectionStack):
            raise ValueError(f"{extras['gt']} is not a projection stack")
    result = est.estimate(cond, ctx)
    save_stack(result, out_path)
    return result
