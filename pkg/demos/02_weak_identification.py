"""Sup-score confidence region when the instruments are weak.

With a weak first stage the Lasso often selects nothing. The point
estimate then comes from one fallback instrument, and inference should
come from the sup-score region, which stays valid without identification.
"""

import numpy as np

from sparseiv import fit_iv
from sparseiv.montecarlo import DgpSpec, gen_dgp
from sparseiv.weak_id import SupScoreProblem, critical_value, inverse_lasso_region, invert_region

spec = DgpSpec(100, mu2=30, s=50)
data = gen_dgp(spec, seed=3).data

est = fit_iv(data, intercept=False)
print("weak-identification route:", est.weak_id_route)
print("empty first stage:", list(est.first_stage.empty))

# %% invert the test on a grid of candidate coefficients
grid = np.linspace(-1, 3, 81)
prob = SupScoreProblem.from_dataset(data, gamma=0.05, grid=grid, intercept=False)
region = invert_region(prob)
print(f"critical value: {critical_value(data.n, data.p):.3f}")
pts = region.points[:, 0]
if pts.size:
    print(f"accepted {pts.size}/{grid.size} points, from {pts.min():.2f} to {pts.max():.2f}")
print("region reaches the grid edge:", region.touches_boundary)

# %% the same set through Lasso fits of the structural residual
alt = inverse_lasso_region(prob)
print("inverse-Lasso region identical:", np.array_equal(region.accepted, alt.accepted))

# %% under weak identification the region can be unbounded; a strong
# design on the same grid gives a bounded interval
strong = gen_dgp(DgpSpec(100, mu2=180, s=5), seed=3).data
tight = invert_region(SupScoreProblem.from_dataset(strong, grid=grid, intercept=False))
pts = tight.points[:, 0]
print(f"strong design: accepted {pts.size}/{grid.size} points, from {pts.min():.2f} to {pts.max():.2f}")
