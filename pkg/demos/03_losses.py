"""
The training losses
===================

NT-Xent for SimCLR, the BYOL regression loss, and the parameter
regression term that is added with weight lambda.
"""
import torch

from geossl import objectives as obj

torch.manual_seed(0)
z = torch.randn(8, 16)

# %%
# Identical views give a low NT-Xent; unrelated views sit near log(2N - 1).
print("nt-xent, same views:     ", obj.nt_xent(z, z).item())
print("nt-xent, random views:   ", obj.nt_xent(z, torch.randn(8, 16)).item())
print("log(2N - 1):             ", torch.log(torch.tensor(15.0)).item())

# %%
# BYOL compares a prediction against a target projection, range [0, 4].
print("byol, aligned:  ", obj.byol_loss(z, 3 * z).item())
print("byol, opposite: ", obj.byol_loss(z, -z).item())

# %%
# logcosh behaves like x^2 / 2 near zero and |x| - log 2 for large errors,
# so one badly predicted angle cannot dominate the batch.
err = torch.tensor([0.01, 0.5, 5.0])
print("mse    :", obj.param_regression_loss(err[:, None], torch.zeros(3, 1), "mse").item())
print("logcosh:", obj.param_regression_loss(err[:, None], torch.zeros(3, 1), "logcosh").item())

# %%
report = obj.combined_loss(obj.nt_xent(z, torch.randn(8, 16)), torch.tensor(0.3), lam=1.0)
print(report)
