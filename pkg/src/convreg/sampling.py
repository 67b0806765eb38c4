"""Randomness: seeded streams, uniform sampling on simplices/polytopes,
epigraph sampling, density rejection, and synthetic dataset generation.

All samplers are pure functions of their inputs: a fresh generator is
derived from the RngStream on every call, so identical (seed, stream_id)
reproduce identical draws regardless of call order, and distinct
substreams may be consumed concurrently.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .geom import Simplex, HPolytope

_SUBSTREAM_MULT = 1_000_003


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RngStream:
    """Counter-based generator key: (seed, stream_id) -> Philox stream.

    substream(k) derives child id ``stream_id * 1_000_003 + k + 1``;
    collision-free for k < 1_000_003, which is far above any fan-out
    used here.
    """
    seed: int
    stream_id: int = 0

    def generator(self):
        seq = np.random.SeedSequence((self.seed, self.stream_id))
        return np.random.Generator(np.random.Philox(seq))

    def substream(self, k):
        return RngStream(self.seed, self.stream_id * _SUBSTREAM_MULT + k + 1)


@dataclass
class NoiseModel:
    """Additive zero-mean noise on responses."""
    kind: str = "gaussian"        # 'gaussian' or 'none'
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def draw(self, m, gen):
        if self.kind == "none" or self.sigma == 0.0:
            return np.zeros(m)
        return self.sigma * gen.standard_normal(m)


# ---------------------------------------------------------------------------
# Core samplers
# ---------------------------------------------------------------------------

def sample_simplex(simplex, m, rng):
    """m i.i.d. uniform points in a simplex via flat Dirichlet weights."""
    if m == 0:
        return np.empty((0, simplex.dim))
    gen = rng.generator()
    W = gen.dirichlet(np.ones(simplex.dim + 1), size=m)
    return W @ simplex.vertices


def sample_polytope(poly, m, rng, max_trial_factor=10_000_000):
    """m i.i.d. uniform points in a bounded H-polytope, by rejection from
    its bounding box.  Returns (points, acceptance_rate)."""
    if m == 0:
        return np.empty((0, poly.dim)), 1.0
    lo, hi = poly.bounding_box()
    gen = rng.generator()
    out = []
    drawn = accepted = 0
    need = m
    batch = max(4 * m, 256)
    while need > 0:
        if drawn > max(batch, 64) and accepted / drawn < 1e-6:
            raise SamplingError("thin polytope: acceptance rate below 1e-6")
        if drawn > max_trial_factor * m:
            raise SamplingError("thin polytope: trial budget exhausted")
        X = gen.uniform(lo, hi, size=(batch, poly.dim))
        ok = poly.contains_many(X, tol=0.0)
        drawn += batch
        accepted += int(ok.sum())
        take = X[ok][:need]
        out.append(take)
        need -= len(take)
    rate = accepted / drawn
    return np.vstack(out), rate


def sample_epigraph(f, omega, y_max, m, rng):
    """m uniform points in {(x, y): x in omega, 0 <= y <= y_max, y >= f(x)}.

    f must be vectorised over rows and satisfy 0 <= f <= y_max on omega.
    Returns (points in R^{d+1}, acceptance_rate).
    """
    lo, hi = omega.bounding_box()
    gen = rng.generator()
    out = []
    drawn = accepted = 0
    need = m
    batch = max(2 * m, 256)
    while need > 0:
        X = gen.uniform(lo, hi, size=(batch, omega.dim))
        Y = gen.uniform(0.0, y_max, size=batch)
        ok = omega.contains_many(X, tol=0.0)
        ok[ok] &= Y[ok] >= f(X[ok])
        drawn += batch
        accepted += int(ok.sum())
        if drawn > 256 and accepted / drawn < 1e-6:
            raise SamplingError("thin epigraph: acceptance rate below 1e-6")
        take = np.column_stack([X[ok], Y[ok]])[:need]
        out.append(take)
        need -= len(take)
    return np.vstack(out), accepted / drawn


def sample_density_rejection(simplex, density, bound, base_samples, rng,
                             return_mask=False):
    """Thin uniform base samples into draws from a density on the simplex.

    density is relative to the uniform probability measure on the simplex
    and must be bounded by `bound`; each base sample is kept with
    probability density(x)/bound.
    """
    X = np.asarray(base_samples, dtype=float)
    if len(X) == 0:
        return (X, np.zeros(0, dtype=bool)) if return_mask else X
    p = np.asarray(density(X), dtype=float)
    if (p > bound * (1 + 1e-9)).any():
        raise SamplingError("density bound violated")
    gen = rng.generator()
    keep = gen.uniform(size=len(X)) * bound < p
    if return_mask:
        return X[keep], keep
    return X[keep]


# ---------------------------------------------------------------------------
# Generating distributions and datasets
# ---------------------------------------------------------------------------

@dataclass
class DistributionDescriptor:
    """Covariate-generating distribution.

    kind: 'uniform-polytope' (support HPolytope), 'uniform-simplex'
    (support Simplex), or 'epigraph-band' (uniform in the band of width
    band_width above band_func over the support polytope, projected draws
    live in R^{d+1}).
    """
    kind: str
    support: object
    band_func: object = None
    band_width: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform-polytope", "uniform-simplex",
                             "epigraph-band"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "uniform-polytope" and not isinstance(self.support, HPolytope):
            raise ValueError("uniform-polytope needs an HPolytope support")
        if self.kind == "uniform-simplex" and not isinstance(self.support, Simplex):
            raise ValueError("uniform-simplex needs a Simplex support")
        if self.kind == "epigraph-band" and self.band_func is None:
            raise ValueError("epigraph-band needs band_func")

    @property
    def dim(self):
        d = self.support.dim
        return d + 1 if self.kind == "epigraph-band" else d

    def sample(self, m, rng):
        if self.kind == "uniform-simplex":
            return sample_simplex(self.support, m, rng)
        if self.kind == "uniform-polytope":
            return sample_polytope(self.support, m, rng)[0]
        # band: rejection from support x [fmin, fmax + width]
        f = self.band_func
        eps = self.band_width
        lo, hi = self.support.bounding_box()
        gen = rng.generator()
        # conservative vertical range from box corner probes
        probe = gen.uniform(lo, hi, size=(512, self.support.dim))
        fmin, fmax = float(np.min(f(probe))) - eps, float(np.max(f(probe))) + 2 * eps
        out, need = [], m
        while need > 0:
            batch = max(4 * need, 256)
            X = gen.uniform(lo, hi, size=(batch, self.support.dim))
            Y = gen.uniform(fmin, fmax, size=batch)
            ok = self.support.contains_many(X, tol=0.0)
            fx = f(X[ok])
            ok[ok] &= (Y[ok] >= fx) & (Y[ok] <= fx + eps)
            take = np.column_stack([X[ok], Y[ok]])[:need]
            out.append(take)
            need -= len(take)
        return np.vstack(out)


@dataclass
class Dataset:
    """Paired covariates/responses with split labels D1/D2/AUX."""
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    descriptor: DistributionDescriptor = None
    noise: NoiseModel = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.split = np.asarray(self.split)

    @property
    def n(self):
        return len(self.y)

    @property
    def d(self):
        return self.X.shape[1]

    def part(self, label):
        m = self.split == label
        return self.X[m], self.y[m]

    def d1(self):
        return self.part("D1")

    def d2(self):
        return self.part("D2")

    def to_csv(self, path_or_buf):
        """Write x_1..x_d, y, split with 17 significant digits."""
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            fh = open(path_or_buf, "w")
            close = True
        else:
            fh = path_or_buf
        try:
            cols = [f"x_{j+1}" for j in range(self.d)] + ["y", "split"]
            fh.write(",".join(cols) + "\n")
            for i in range(self.n):
                row = [format(v, ".17g") for v in self.X[i]]
                row.append(format(self.y[i], ".17g"))
                row.append(str(self.split[i]))
                fh.write(",".join(row) + "\n")
        finally:
            if close:
                fh.close()

    @classmethod
    def from_csv(cls, path_or_buf):
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            fh = open(path_or_buf, "r")
            close = True
        else:
            fh = path_or_buf
        try:
            header = fh.readline().strip().split(",")
            if header[-1] != "split" or header[-2] != "y":
                raise ValueError("bad dataset header")
            d = len(header) - 2
            X, y, split = [], [], []
            for line in fh:
                parts = line.strip().split(",")
                if not parts or parts == [""]:
                    continue
                X.append([float(v) for v in parts[:d]])
                y.append(float(parts[d]))
                split.append(parts[d + 1])
        finally:
            if close:
                fh.close()
        return cls(np.array(X), np.array(y), np.array(split))


def make_dataset(f_star, dist, noise, n, rng):
    """n i.i.d. pairs (X, f*(X) + xi); first half labelled D1, rest D2."""
    X = dist.sample(n, rng.substream(0))
    fx = np.asarray(f_star(X), dtype=float)
    xi = noise.draw(n, rng.substream(1).generator())
    split = np.array(["D1"] * (n // 2) + ["D2"] * (n - n // 2))
    return Dataset(X, fx + xi, split, descriptor=dist, noise=noise)
