# Hand-derived gradients against central differences on a toy instance.
import numpy as np

from reliability_fusion.losses import Hyperparams, reliability_signal, stage2_loss
from reliability_fusion.model import STAGE_I, STAGE_II, init_params, score_triplets
from reliability_fusion.optim import backward, finite_diff_check

rng = np.random.default_rng(0)
feats = [rng.standard_normal((8, 3)), rng.standard_normal((8, 5))]
params = init_params(5, 8, 2, 4, [3, 5], seed=0, std=0.5)
params.logits = rng.normal(0, 0.8, params.logits.shape)
batch = np.array([[u, *rng.choice(8, 2, replace=False)] for u in range(5) for _ in range(4)])
h = Hyperparams(alpha=1.0, beta=0.1, tau=0.5)

err1 = finite_diff_check(lambda p: backward(batch, p, feats, STAGE_I, h), params, 1e-5, 200, 0)
print("stage I  max relative error %.2e" % err1)

# Stage II treats the reliability vector z and the confidence gamma as
# constants, so the right reference is the loss with those frozen.
sig = reliability_signal(score_triplets(params, feats, batch, STAGE_II), h.tau)
_, g = backward(batch, params, feats, STAGE_II, h)
frozen = lambda p: stage2_loss(batch, p, feats, h.alpha, h.beta, h.tau, signal=sig)
live = lambda p: stage2_loss(batch, p, feats, h.alpha, h.beta, h.tau)
print("stage II vs frozen-signal loss   %.2e" % finite_diff_check(frozen, params, 1e-5, 200, 0, grads=g))
print("stage II vs live loss (mismatch) %.2e" % finite_diff_check(live, params, 1e-5, 200, 0, grads=g))

# the no_nograd variant differentiates through the signal and matches the live loss
_, g_live = backward(batch, params, feats, STAGE_II, h, nograd=False)
print("no_nograd vs live loss           %.2e" % finite_diff_check(live, params, 1e-5, 200, 0, grads=g_live))
