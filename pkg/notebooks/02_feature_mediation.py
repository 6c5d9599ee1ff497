"""
Feature mediation with a paired crosscoder
==========================================

The gated pair's coupling lives in two final-MLP units.  A two-feature
crosscoder aligned with them should carry nearly all of the interaction,
and swapping in the native codes should rescue most of the missing margin.
A small trained crosscoder is fitted at the end for comparison.
"""

# %%
from xpatch import crosscoder as cx
from xpatch import divergence as dv
from xpatch import toy

pair = toy.gen_toy_pair("gated_coupling", seed=7)
events = dv.collect_first_divergences(pair, toy.toy_manifest(pair.info, 200, seed=7), 32).events
target = [e for e in events if e.t_it == pair.info["target"]]
print(f"{len(target)} events whose descendant token is the planted target")

# %%
# Hand-built crosscoder: feature 0 reads the positive, feature 1 the negative
# IT-minus-PT component along the target readout direction.
planted = cx.planted_coupling_crosscoder(pair)
cells = cx.prepare_cells(planted, pair, target)
med = cx.mediation_drop(planted, pair, target, [0, 1], cells=cells)
print(f"interaction {med['I_full']:+.3f} -> {med['I_ablate']:+.3f} after ablation (share {med['share']:.3f})")
rescue = cx.feature_rescue(planted, pair, target, [0, 1], cells=cells)
print(f"rescue fraction {rescue['rescue_fraction']:.3f}")

# %%
# Dose response: scaling the removed contribution.
for row in cx.bucket_edit_dose_response(planted, pair, target, [0, 1], cells=cells)["rows"]:
    print(f"alpha {row['alpha']:.1f}  drop {row['drop']:+.3f}")

# %%
# Handoff: swap early MLPs and ask how much of the change flows through the features.
for direction in ("rescue", "degrade"):
    h = cx.handoff_mediation(planted, pair, target, (0, 4), direction, [0, 1])
    print(f"{direction:>8s} total {h['total_effect']:+.3f} mediated {h['mediated_part']:+.3f}")

# %%
# A small trained crosscoder on the last two layers.  At this budget the
# quality gate is not expected to pass; the numbers are diagnostic only.
train, held = cx.split_by_cluster(events, 0.3, seed=0)
xp, xi, _ = cx.dump_activations(pair, train, (4, 5))
hp, hi, _ = cx.dump_activations(pair, held, (4, 5))
model, metrics = cx.train_crosscoder(xp, xi, hp, hi, cx.TrainConfig(64, 4, 0.01, 300, 256), layer_set=(4, 5))
print({k: round(v, 3) for k, v in metrics.items() if isinstance(v, float)})
