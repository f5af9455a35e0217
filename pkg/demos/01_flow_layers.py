# Flow layers: exact inverses and log-determinants checked against a brute-force Jacobian.
import numpy as np

from flowvid import autodiff as ad
from flowvid.autodiff import Tensor
from flowvid.flows import ActNorm, Coupling, FlowStep, InvConv1x1, squeeze, unsqueeze

rng = np.random.default_rng(0)

x = np.arange(16.0).reshape(1, 1, 4, 4)
print("squeeze puts each 2x2 patch into channels:")
print(squeeze(Tensor(x)).data[0, :, 0, 0])
print("unsqueeze(squeeze(x)) == x:", np.array_equal(unsqueeze(squeeze(Tensor(x))).data, x))


def jacobian(f, x, eps=1e-6):
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = eps
        cols.append((f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))).reshape(-1) / (2 * eps))
    return np.stack(cols, axis=1)


with ad.precision(np.float64):
    x = rng.normal(size=(1, 4, 2, 2))
    ctx = Tensor(rng.normal(size=(1, 2, 2, 2)))

    layers = {
        "actnorm": ActNorm(4),
        "inv1x1": InvConv1x1(4, rng=rng),
        "coupling (affine)": Coupling(4, context_channels=2, hidden=8, mode="affine", rng=rng),
        "flow step": FlowStep(4, context_channels=2, hidden=8, mode="affine", rng=rng),
    }
    for name, layer in layers.items():
        # skip data init and scramble the weights so nothing is an identity
        for m in layer.modules():
            if isinstance(m, ActNorm):
                m.initialized[0] = 1
        for p in layer.parameters():
            p.data = p.data + rng.normal(0, 0.3, size=p.shape)
        c = ctx if isinstance(layer, (Coupling, FlowStep)) else None
        with ad.no_grad():
            y, ld = layer.forward(Tensor(x), c)
            back = layer.inverse(y, c)
            brute = np.linalg.slogdet(jacobian(lambda a: layer.forward(Tensor(a), c)[0].data, x))[1]
        print(f"{name:18s} logdet {float(np.reshape(ld.data, -1)[0]):+.6f}  jacobian {brute:+.6f}  "
              f"inverse error {np.abs(back.data - x).max():.1e}")
