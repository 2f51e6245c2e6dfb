"""
The teacher: a two-stream atmosphere over a synthetic scene
===========================================================

Builds one scene, pushes it through the forward model band by band and
looks at what the emulator will be trained on.
"""
import numpy as np

from dcemu import synth

# A 100x100 scene: smooth surface reflectance, aerosol load, sun angle and
# a cloud mask.  Everything is derived from the seed.
scene = synth.generate_scene(seed=3, height=100, width=100)
print("cloud fraction", scene.cloud.mean())
print("aod range", scene.aod.min().round(3), scene.aod.max().round(3))

# TOA reflectance per band.  Shorter wavelengths scatter more, so the
# atmosphere brightens blue far more than SWIR.
for b, name in enumerate(synth.BANDS):
    toa = synth.toa_forward(scene, b)
    clear = scene.cloud == 0
    lift = (toa[clear] - scene.sr[clear, b]).mean()
    print(f"{name:6s} surface {scene.sr[clear, b].mean():.3f}  toa {toa[clear].mean():.3f}  "
          f"path lift {lift:+.3f}")

# The tile bundles emulator inputs (TOA, cos(sza), aod) with the teacher's
# retrieval, which is NaN under cloud.
tile = synth.make_tile(3)
print("inputs", tile.inputs.shape, "target", tile.target.shape)
print("NaN targets == cloudy pixels:",
      bool((np.isnan(tile.target[..., 0]) == (tile.clear == 0)).all()))

# Tiles are cut into patches; a DCFC model sees each pixel of a patch as an
# independent example.
patches = list(synth.extract_patches(tile, size=50, stride=25))
print(len(patches), "patches at stride 25, first corner", patches[0][:2])

# On-disk format: channel table plus CRC, round-trips exactly.
blob = synth.encode_raster(tile.channels())
back = synth.decode_raster(blob)
print("raster bytes", len(blob), "round trip exact:",
      all(np.array_equal(back[k], v, equal_nan=True) for k, v in tile.channels().items()))
