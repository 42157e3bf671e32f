# Do the ranking and calibration losses pull the item weights the same way?
#
# With every positive-item modality rating >= 0 the inner product of the two
# weight gradients cannot be negative. Real training does not guarantee that
# precondition, so the probe also reports how often it holds.
import numpy as np

from reliability_fusion import analysis, data, synth, train
from reliability_fusion.losses import Hyperparams
from reliability_fusion.model import init_params

rng = np.random.default_rng(3)
feats = [rng.uniform(0, 1, (6, 3)), rng.uniform(0, 1, (6, 4))]
p = init_params(4, 6, 2, 3, [3, 4])
p.user_emb = [rng.uniform(0, 1, (4, 3)) for _ in range(2)]
p.proj = [rng.uniform(0, 1, (3, 3)), rng.uniform(0, 1, (3, 4))]
p.bias = [rng.uniform(0, 1, 3) for _ in range(2)]
batch = np.array([[0, 1, 2], [1, 3, 4], [2, 5, 0], [3, 2, 1]])
r = analysis.conflict_probe(batch, p, feats, Hyperparams())
print("constructed: inner=%.4g precondition=%s" % (r.inner_product, r.precondition_held))

# now a trained model on synthetic data
ds, tables, _ = synth.generate(synth.SyntheticSpec(seed=2))
ds = data.split_dataset(ds, seed=2)
hyper = train.desk_hyperparams(seed=2)
params, log = train.run_variant("full", hyper, ds, tables)
stage2 = [rec for rec in log.records if rec.stage == "II"]
print("stage II epochs:", len(stage2))
print("violation rate first/last epoch: %.3f / %.3f" % (stage2[0].probe_violation_rate, stage2[-1].probe_violation_rate))
print("precondition rate first/last:    %.3f / %.3f" % (stage2[0].probe_precondition_rate, stage2[-1].probe_precondition_rate))

trip = data.sample_triplets(ds, 2048, seed=9)
r = analysis.conflict_probe(trip, params, tables, hyper)
print("trained, 2048 triplets: direct-weight inner=%.4g, with negative paths=%.4g, logit view=%.4g"
      % (r.inner_product, r.full_inner_product, r.logit_inner_product))
