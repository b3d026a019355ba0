"""Look inside the survival forest that powers the transport engine.

We fit one forest on a single synthetic trial arm, then inspect the pieces a
user normally never sees: the log-rank split at the root, the Nelson-Aalen
hazard inside a leaf, out-of-bag versus in-bag prediction, and how forest risk
estimates track the Kaplan-Meier curve where the two are comparable.

    python3 demos/demo_forest_anatomy.py
"""
import numpy as np

from trialtransport import (
    ForestParams, SurvivalForest, generate, km_fit, logrank_statistic, risk_at,
    scenario_s1,
)

HORIZON = 5.0

scenario = scenario_s1(n_source=2000, n_target=10)
source, _, truth = generate(scenario)
arm_a = source.arm_subset("A")
print(f"arm A: {arm_a.n} subjects, {int(arm_a.event.sum())} events "
      f"({100 * arm_a.event.mean():.1f}%)")

forest = SurvivalForest.fit(arm_a, ForestParams(n_trees=100, seed=1))

# -- the split criterion, by hand --------------------------------------------
w = arm_a.sort_by_id().covariates["w"]
c = arm_a.sort_by_id()
for cut in (-1.0, 0.0, 1.0):
    stat = logrank_statistic(w <= cut, c.time, c.event)
    print(f"log-rank statistic for the split w <= {cut:+.0f}: {stat:8.2f}")
print("higher-statistic splits separate survival curves more sharply; the "
      "tree grower\npicks the best cut over a random covariate subset at "
      "every node.")

# -- what one tree looks like ------------------------------------------------
tree = forest.trees[0]
n_leaves = int((tree.feature < 0).sum())
print(f"\ntree 0: {tree.feature.size} nodes, {n_leaves} leaves, "
      f"{int(tree.oob_mask.sum())} OOB rows out of {arm_a.n}")

# -- forest risk vs Kaplan-Meier at the population level ---------------------
km = km_fit(c.time, c.event)
grid = np.linspace(-2, 2, 9)
risks = forest.predict_risk(grid[:, None], HORIZON)
print(f"\n5-year risk by covariate value (KM pools everyone: "
      f"{risk_at(km, HORIZON):.4f})")
for wv, r in zip(grid, risks):
    true_r = truth.true_risk({"w": wv}, "A", HORIZON)
    bar = "#" * int(400 * r)
    print(f"  w = {wv:+.1f}: forest {r:.4f}  truth {true_r:.4f}  {bar}")

# -- out-of-bag honesty ------------------------------------------------------
in_bag = forest.predict_risk(c, HORIZON)
oob = forest.predict_risk_oob(c, HORIZON, fallback=True)
marginal = risk_at(km, HORIZON)
print(f"\nmean in-bag prediction  {in_bag.mean():.4f}")
print(f"mean OOB prediction     {oob.mean():.4f}")
print(f"marginal KM risk        {marginal:.4f}")
print("OOB predictions for a subject use only trees that never trained on "
      "that subject,\nwhich is what makes the engine's re-translation check "
      "an honest one.")
