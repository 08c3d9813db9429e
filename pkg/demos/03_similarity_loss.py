"""What the high-frequency similarity term rewards.

Detail features of the PAN and MS branches are projected to vectors and
compared sample by sample in an N x N cosine matrix. The loss wants ones on
the diagonal (each MS sample agrees with its own PAN sample) and small
values elsewhere (samples stay distinguishable). Three hand-built feature
sets show the three regimes.
"""

import numpy as np

from fafnet.losses import cross_corr, hfs_loss
from fafnet.tensor import Tensor

rng = np.random.default_rng(0)
n, dim = 8, 32
pan_feats = rng.normal(size=(n, dim))

cases = {
    "aligned (MS = PAN + small noise)": pan_feats + 0.05 * rng.normal(size=(n, dim)),
    "collapsed (every MS sample identical)": np.tile(rng.normal(size=(1, dim)), (n, 1)),
    "unrelated (independent MS features)": rng.normal(size=(n, dim)),
}
for name, ms_feats in cases.items():
    c = cross_corr(Tensor(pan_feats), Tensor(ms_feats))
    diag = np.diag(c.data).mean()
    off = np.abs(c.data[~np.eye(n, dtype=bool)]).mean()
    print(f"{name:40s} diag {diag:+.3f}  |off-diag| {off:.3f}  loss {hfs_loss(c).item():.4f}")

# lambda trades redundancy reduction against agreement
c = cross_corr(Tensor(pan_feats), Tensor(pan_feats + 0.05 * rng.normal(size=(n, dim))))
for lam in (0.0, 5e-3, 0.1, 1.0):
    print(f"lambda {lam:<6} loss {hfs_loss(c, lam).item():.5f}")
