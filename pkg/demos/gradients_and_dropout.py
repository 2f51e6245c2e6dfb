"""
Autodiff and learnable dropout
==============================

The network is trained with a small reverse-mode engine.  Here we check its
gradients against finite differences and watch a concrete dropout rate move.
"""
import numpy as np

from dcemu import autodiff as ad

rng = np.random.default_rng(0)

# dense layer followed by a nonlinearity, checked coordinate by coordinate
x = ad.Parameter(rng.normal(size=(4, 3)))
w = ad.Parameter(rng.normal(size=(3, 2)))
b = ad.Parameter(rng.normal(size=2), "bias")
report = ad.grad_check(lambda: ad.tsum(ad.sigmoid(ad.dense(x, w, b))), [x, w, b])
print("dense+sigmoid max relative error", f"{report.max_rel_error:.1e}")

# The concrete relaxation: z is a soft drop indicator with mean p.  As the
# temperature falls the gate becomes nearly binary.
layer = ad.ConcreteDropoutLayer.create(1, init_rate=0.3, temperature=0.1)
u = rng.uniform(size=100_000)
z = ad.drop_gate(layer, u).data
print("mean drop indicator", z.mean().round(3), "(rate 0.3)")
print("fraction within 0.05 of 0 or 1:", np.mean((z < 0.05) | (z > 0.95)).round(3))

# Gradients flow into the rate itself.  With a loss that rewards large
# activations, Adam pushes the drop rate down.
layer = ad.ConcreteDropoutLayer.create(5, init_rate=0.5, temperature=0.1)
h = ad.Tensor(np.ones((64, 5)))
opt = ad.Adam([layer.logit], lr=0.05)
for step in range(200):
    opt.zero_grad()
    out = ad.concrete_gate(layer, h, rng.uniform(0.01, 0.99, size=(64, 5)))
    loss = ad.tmean((out - 2.0) * (out - 2.0))
    loss.backward()
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d} rate {layer.rate:.3f} loss {loss.item():.3f}")
