# %% [markdown]
# # Exact density of a few MetFlow steps
#
# With K steps the output density is a sum over 4^K accept/direction paths.
# Here a random K = 3 model on the ring target is tabulated on a grid, checked
# for unit mass and compared with a histogram of simulated chains.

# %%
import numpy as np

from metflow import FlowStack, ParamTree, PriorModel, eight_gaussians, marginal_logpdf, simulate_trajectory
from metflow.elbo import InferenceFn
from metflow.kernels import MH, DirectionDist
from metflow.model import MetFlowModel

rng = np.random.default_rng(0)
K = 3
target = eight_gaussians(radius=2.0)
stack = FlowStack(2, K, n_blocks=2, hidden=4, shared=True, noisy=True)
prior = PriorModel(2)
params = ParamTree({**prior.init_params(), **stack.init_params(rng, out_scale=0.8)})
u = rng.standard_normal((K, 2))
model = MetFlowModel(target, prior, stack, DirectionDist(K), MH, InferenceFn(K), setting="pseudo")

# %% mass on a grid
x = np.linspace(-10, 10, 201)
X, Y = np.meshgrid(x, x, indexing="ij")
grid = np.stack([X.ravel(), Y.ravel()], axis=1)
density = np.exp(marginal_logpdf(model, params, grid, u=u))
print(f"grid mass: {density.sum() * (x[1] - x[0]) ** 2:.5f}")

# %% simulated chains against the exact cell probabilities
traj = simulate_trajectory(rng, model, params, n=100_000, u=u)
edges = np.linspace(-10, 10, 21)
hist = np.histogram2d(traj.z[:, 0], traj.z[:, 1], bins=[edges, edges])[0] / traj.n
cells = density.reshape(201, 201)[:-1, :-1].reshape(20, 10, 20, 10).sum(axis=(1, 3)) * (x[1] - x[0]) ** 2
print(f"total variation over 20x20 cells: {0.5 * np.abs(hist - cells).sum():.3f}")
print(f"accept rates per step: {np.round(traj.a.mean(axis=0), 3)}")
