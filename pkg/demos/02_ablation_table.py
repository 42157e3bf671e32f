# Train every ablation variant on one synthetic dataset and print the table.
# Differences between variants at this scale sit inside seed noise; the
# acceptance suite takes medians over five seeds instead.
from reliability_fusion import analysis, data, metrics, synth, train
from reliability_fusion.losses import VARIANTS

ds, feats, _ = synth.generate(synth.SyntheticSpec(seed=1))
ds = data.split_dataset(ds, seed=1)
hyper = train.desk_hyperparams(seed=1)

reports = {}
for v in VARIANTS:
    params, log = train.run_variant(v, hyper, ds, feats)
    reports[v] = metrics.evaluate(params, feats, ds, "test", (10, 20), log.final_stage)
    print("%-13s epochs=%3d  R@20=%.4f" % (v, log.last_epoch, reports[v].recall[20]))

print()
print(analysis.compare_variants(reports, reference="full").to_tsv())
