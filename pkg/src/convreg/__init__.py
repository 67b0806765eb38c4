"""convreg: desk-scale convex regression.

Geometry kernel, seeded samplers, robust scalar/affine estimators, norm
estimators for convex signals, max-affine convex fitting, the end-to-end
budgeted estimator, and a benchmark harness.
"""

from . import bench, convexfit, geom, norms, pipeline, robust, sampling
from .convexfit import (FitMode, MaxAffineFunc, SimplexConstraint, bounded,
                        clip_upper, convex_lse, feasibility_fit, lipschitz,
                        mp_properize, unconstrained)
from .geom import (AffineMap, HPolytope, Simplex, SimplicialFunc, VPolytope,
                   convex_hull, cone_triangulate, halfspace_volume_fraction,
                   inscribed_radius, lower_envelope, regular_simplex, shrink,
                   wet_part_member)
from .norms import (NormEstimate, PDensity, calibrate, density_bound,
                    l1_norm_estimate, l2_norm_estimate, load_calibration)
from .pipeline import (Decomposition, FitReport, PipelineConfig,
                       full_estimator, sigma_upper_bound,
                       simplicial_approximation, simplified_estimator,
                       triangulation_cover)
from .robust import (AffineFunc, MeanEstimate, median_of_means,
                     ols_affine_regression, robust_affine_regression)
from .sampling import (Dataset, DistributionDescriptor, NoiseModel, RngStream,
                       make_dataset, sample_density_rejection, sample_epigraph,
                       sample_polytope, sample_simplex)

__version__ = "0.1.0"
