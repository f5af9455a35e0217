# A 2-D flow fit to a noisy ring. The learned density is drawn as ASCII and
# integrated on a grid; a normalised density integrates to one.
import numpy as np

from flowvid import autodiff as ad
from flowvid.autodiff import Tensor
from flowvid.flows import FlowStep, gaussian_log_density
from flowvid.training import Adam

rng = np.random.default_rng(0)


def ring(n):
    angle = rng.uniform(0, 2 * np.pi, n)
    radius = 2.0 + 0.25 * rng.normal(size=n)
    # (x, y) ride along as the two channels of a 1x1 image
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(n, 2, 1, 1)


steps = [FlowStep(2, hidden=32, mode="affine", rng=rng) for _ in range(6)]
params = [(f"{i}.{k}", p) for i, s in enumerate(steps) for k, p in s.named_parameters()]


def log_prob(x):
    h, logdet = x, 0.0
    for s in steps:
        h, ld = s.forward(h)
        logdet = logdet + ld
    return gaussian_log_density(h) + logdet


with ad.no_grad():
    log_prob(Tensor(ring(512)))  # ActNorm init
opt = Adam(params, lr=5e-3)
for i in range(400):
    for _, p in params:
        p.grad = None
    loss = ad.sum(log_prob(Tensor(ring(256)))) * (-1 / 256)
    ad.backward(loss)
    opt.step()
    if i % 100 == 0 or i == 399:
        print(f"step {i:3d}  nll {float(loss.data):.3f}")

axis = np.arange(-6, 6 + 1e-9, 0.05)
gx, gy = np.meshgrid(axis, axis, indexing="ij")
grid = np.stack([gx.ravel(), gy.ravel()], axis=1).reshape(-1, 2, 1, 1)
with ad.no_grad():
    density = np.exp(log_prob(Tensor(grid)).data).reshape(len(axis), len(axis))
print("mass on [-6,6]^2:", round(float(density.sum() * 0.05 ** 2), 5))

shades = " .:-=+*#%@"
view = density[60:181:3, 60:181:5]  # [-3, 3], columns step 0.25, rows 0.15
for row in (view / view.max() * (len(shades) - 1)).round().astype(int).T[::-1]:
    print("".join(shades[v] for v in row))
