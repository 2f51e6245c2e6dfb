"""
Training a small emulator and reading its uncertainty
=====================================================

Two training tiles, a narrow DCFC network and a handful of epochs: enough
to see the predictive variance split into its aleatoric and epistemic parts.
Two tiles are far too few for the accuracy of the acceptance runs; the
point here is the shape of the uncertainty.  Takes about half a minute.
"""
import numpy as np

from dcemu import autodiff as ad
from dcemu import synth
from dcemu.metrics import RasterPair, conditional_rmse
from dcemu.model import ModelConfig, build_model, mc_predict, train

tiles = [synth.make_tile(s) for s in range(2)]
test = synth.make_tile(100)
stats = synth.fit_stats(tiles)
data = synth.stack_patches(tiles, size=50, stride=5, stats=stats)
print(len(data), "training patches")

model = build_model(ModelConfig(in_channels=data.inputs.shape[-1], hidden_units=64,
                                init_dropout=0.02))
log = train(model, data, epochs=6, lr=1e-3,
            callback=lambda rec, m: print(f"epoch {rec.epoch} loss {rec.loss:.4f} "
                                          f"rates {np.round(rec.dropout_rates, 3)}"))

x = synth.normalize(test.inputs[None], stats)
dist = mc_predict(model, x, T=10, seed=1)

pair = RasterPair(test.target, test.clear, dist.mean[0], dist.variance[0], dist.p_clear[0])
for b, name in enumerate(synth.BANDS):
    print(f"{name:6s} conditional rmse {conditional_rmse(pair, b):.4f}")

# Total variance = mean aleatoric variance + spread of the T means.  The
# same passes, replayed by hand, give the two parts separately.
passes = []
with ad.no_grad():
    for ss in np.random.SeedSequence(1).spawn(10):
        passes.append(model.forward(x, rng=np.random.default_rng(ss)))
clear = test.clear > 0
aleatoric = np.mean([p.variance[0][clear] for p in passes], axis=0).mean(axis=0)
total = dist.variance[0][clear].mean(axis=0)
print("aleatoric share of variance per band", np.round(aleatoric / total, 2))
print("cloud accuracy", np.mean((dist.p_clear[0] > 0.5) == test.clear).round(4))
