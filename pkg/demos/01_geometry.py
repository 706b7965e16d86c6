"""
Affine matrices, homographies and DLT
=====================================

Build an affine matrix from raw parameters, push a few points through it,
and recover the matrix again from four point correspondences.
"""
import numpy as np

from geossl import geometry as geo

W = H = 32

# %%
# A rotation of 30 degrees about the image centre, plus a small shift and shear.
params = geo.AffineParams(rotation_deg=30.0, translate_x_frac=0.1, translate_y_frac=0.05,
                          scale=1.1, shear_x_deg=5.0)
m = geo.affine_matrix(params, W, H)
print("affine matrix\n", np.round(m, 4))

# The centre moves only by the translation.
print("centre ->", geo.apply_to_point(m, W / 2, H / 2))

# %%
# Normalized regression target: angle / 360, shift / size, shear / 25 degrees.
phi = geo.normalize_params(params, W, H)
print("phi =", np.round(phi.values, 4))
back = geo.denormalize_params(phi, W, H)
print("round trip ok:", np.allclose(back.as_tuple(), params.as_tuple()))

# %%
# Map the four corners and estimate the matrix back with the normalized DLT.
corners = np.array([[0, 0], [W - 1, 0], [W - 1, H - 1], [0, H - 1]], dtype=float)
moved = np.array([geo.apply_to_point(m, x, y) for x, y in corners])
estimate = geo.estimate_homography_dlt(corners, moved)
print("max |estimate - m| =", np.abs(estimate - m).max())

# %%
# A perspective warp on top of the affine part gives a full homography.
shifts = np.array([[4.0, 0.0], [-4.0, 0.0], [0.0, 0.0], [0.0, 0.0]])  # pinch the top edge
full = geo.compose(geo.perspective_matrix(shifts, W, H), m)
print("homography bottom row:", full[2])
