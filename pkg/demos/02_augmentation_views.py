"""
Views for the two objectives
============================

Each training image gives three views: two appearance-level views x1, x2
and a geometrically warped copy x1' of x1. The figure shows a few triples
together with the regression target phi for each warp.
"""
import matplotlib.pyplot as plt
import numpy as np

from geossl import augmentation as aug
from geossl import geometry as geo
from geossl import data

images, labels = data.synthetic_shapes(12, seed=0)
rng = np.random.default_rng(0)
b1 = aug.B1Config()

# %%
# The appearance set and the spatial set must not share a transformation.
for mode in ("affine", "homography", "shear"):
    b2 = aug.B2Config(mode=mode)
    aug.check_disjoint(b1, b2)
    print(f"{mode:>10}: phi has {geo.PARAM_DIMS[mode]} values")

# %%
b2 = aug.B2Config(mode="affine")
fig, axes = plt.subplots(4, 4, figsize=(7, 7))
for row, img in enumerate(images[:4]):
    t = aug.make_view_triple(img, rng, b1, b2)
    for ax, (title, view) in zip(axes[row], [("x", img), ("x1", t.x1), ("x2", t.x2), ("x1'", t.x1_prime)]):
        ax.imshow(np.clip(view, 0, 1))
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    print(f"image {row}: phi =", np.round(t.phi.values, 3))

    # the stored target is enough to rebuild the exact warp
    assert np.array_equal(aug.matrix_from_params(t.phi, 32, 32), t.matrix)

fig.tight_layout()
plt.show()
