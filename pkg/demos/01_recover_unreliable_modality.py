# Plant a broken modality, train, and see whether the item weights notice.
#
#   python3 demos/01_recover_unreliable_modality.py
import numpy as np

from reliability_fusion import analysis, data, metrics, model, synth, train

# 300 users, 200 items, two 32-d feature channels.
# 40% of the items get pure noise in channel 1.
ds, feats, truth = synth.generate(synth.SyntheticSpec(seed=0))
ds = data.split_dataset(ds, seed=0)
print(ds.user_count, "users", ds.item_count, "items", len(truth.corrupted_items), "corrupted in modality 1")

hyper = train.desk_hyperparams(seed=0)
params, log = train.run_variant("full", hyper, ds, feats)
print("epochs per stage:", {s: log.stages().count(s) for s in ("I", "II")})

w = model.modality_weights(params)
bad = truth.corruption_flags(ds.item_count)
print("mean weight on modality 1, corrupted items: %.3f" % w[bad, 1].mean())
print("mean weight on modality 1, clean items:     %.3f" % w[~bad, 1].mean())

score = analysis.reliability_recovery_score(params, bad, 1)
print("AUC of (1 - w) as a corruption detector: %.3f" % score.auc)

# text histogram of the modality-1 weights
h = analysis.weight_histogram(params, 1, bins=10)
for lo, c in zip(h.edges[:-1], h.counts):
    print("%.1f  %s" % (lo, "#" * int(c)))

print(metrics.evaluate(params, feats, ds, "test", (10, 20), log.final_stage).table())
