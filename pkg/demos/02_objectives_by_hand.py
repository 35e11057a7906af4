"""
Contrastive objectives, checked against hand-computed numbers
==============================================================
"""

import math

import numpy as np

from textinfomax.encoders import MultiscaleFeatures
from textinfomax.numerics import Tensor
from textinfomax.objectives import (
    LossConfig,
    ProjectionHeads,
    info_nce,
    inter_modality_loss,
    intra_infomax_loss,
    pairwise_ranking_directional,
)

# infoNCE with one negative and equal scores is a fair coin: ln 2
print("info_nce(1, [1]) =", info_nce(1.0, [1.0]), " ln2 =", math.log(2))
# a confident positive costs almost nothing
print("info_nce(10, [0]) =", info_nce(10.0, [0.0]))

# %%
# The ranking hinge only charges negatives that come within the margin.
# Row 0: positive 0.9, negatives 0.2 (safe) and 0.5 (0.1 inside the margin).
S = np.array([[0.9, 0.2, 0.5],
              [-5.0, 5.0, -5.0],
              [-5.0, -5.0, 5.0]])
print("ranking loss, alpha=0.5:", pairwise_ranking_directional(S, 0.5).item())

# identical scores everywhere: every ordered negative pair pays alpha
B = 4
print("all-equal scores:", pairwise_ranking_directional(np.zeros((B, B)), 0.5).item(), "=", B * (B - 1) * 0.5)

# %%
# Intra-image infomax compares the global vector of one view with every
# location of the other view's local maps, using the rest of the batch as
# negatives. If all images in the batch are identical nothing can be
# told apart and the loss is exactly ln B.
rng = np.random.default_rng(0)
one = [rng.standard_normal(s) for s in [(1, 8), (1, 8, 5, 5), (1, 8, 7, 7)]]
same = MultiscaleFeatures(*(Tensor(np.repeat(a, B, axis=0)) for a in one))
print("uniform intra:", intra_infomax_loss(same, same).item(), " ln B =", math.log(B))

# distinct images whose local maps repeat their own global vector at every
# location: each positive score is a squared norm and the loss drops below ln B
g = rng.standard_normal((B, 8)) * 2
distinct = MultiscaleFeatures(Tensor(g), Tensor(np.broadcast_to(g[:, :, None, None], (B, 8, 5, 5)).copy()),
                              Tensor(np.broadcast_to(g[:, :, None, None], (B, 8, 7, 7)).copy()))
print("aligned views:", intra_infomax_loss(distinct, distinct).item())

# %%
# The inter-modality term projects text and pooled visual vectors into two
# scoring spaces and ranks matched pairs above mismatched ones, in both
# retrieval directions.
heads = ProjectionHeads.create(text_dim=6, nrkhs=8, seed=0)
text = Tensor(rng.standard_normal((B, 6)))
for kind in ("ranking", "nce"):
    cfg = LossConfig(inter_kind=kind)
    print(f"inter[{kind}] =", inter_modality_loss(heads, text, distinct, cfg).item())
