"""Tour of the synthetic market world.

A two-regime Markov chain drives everything: market drift and volatility,
macro indicator levels, token sentiment in the news stream, and stress
propagation over the interbank graph. Planted cross-modal structure (news
tokens that predict next-step direction) is what the fusion model is later
supposed to find.
"""

import numpy as np

import finfusion.datapipe as dp

cfg = dp.SyntheticConfig(n_steps=300, n_assets=2, n_institutions=6,
                         signal_strength=0.8, macro_gap_rate=0.08, seed=11)
ds = dp.build_dataset(cfg)

print("== timeline ==")
print(f"steps={ds.n_steps} assets={ds.n_assets} institutions={ds.n_institutions}")
print(f"usable dates: {int(ds.usable.sum())} (warmup + window + label trimmed)")
frac = ds.regime.mean()
print(f"stress regime active {100 * frac:.1f}% of steps "
      f"(stationary target {cfg.crisis_rate})")

print("\n== splits (time ordered, no shuffling) ==")
for name in ("train", "val", "test"):
    d = ds.splits[name]
    print(f"{name:5s}: {len(d):3d} dates, [{d[0]}..{d[-1]}]")

print("\n== planted text signal ==")
vocab = np.array(ds.vocab)
a, hits, total = 0, 0, 0
for t in ds.splits["train"]:
    toks = ds.tokens[a, t, : ds.tok_len[a, t]]
    r = ds.y_next(a, t)
    if abs(r) <= dp.FLAT_BAND:
        continue
    has_bull = bool(np.isin(toks, dp.BULL_IDS).any())
    has_bear = bool(np.isin(toks, dp.BEAR_IDS).any())
    total += 1
    if (r > 0 and has_bull) or (r < 0 and has_bear):
        hits += 1
print(f"direction token agrees with next return on {hits}/{total} train dates "
      f"(strength {cfg.signal_strength})")
t0 = ds.splits["train"][0]
toks = ds.tokens[a, t0, : ds.tok_len[a, t0]]
print(f"sample headline tokens at date {t0}: {[ds.vocab[i] for i in toks]}")

print("\n== macro panel: gaps and imputation ==")
observed = ds.macro_present.mean(axis=0)
print(f"observed fraction per slot: {np.round(observed, 2)}")
# warmup rows predate the first release and stay NaN; they are never usable
print("imputed macro has no gaps on usable dates:",
      not np.isnan(ds.macro[ds.usable]).any())

print("\n== interbank stress ==")
mean_stress = ds.node_stress.mean(axis=1)
calm = mean_stress[ds.regime == 0].mean()
hot = mean_stress[ds.regime == 1].mean()
print(f"mean node stress: calm={calm:.3f} stress={hot:.3f}")
worst = int(np.argmax(ds.node_stress[ds.regime == 1].mean(axis=0)))
print(f"most stressed institution during crises: inst_{worst:02d}")

print("\n== tail-risk oracles on the raw series ==")
sys_r = ds.market_return
inst_r = ds.node_returns[:, worst]
print(f"CoVaR(q=0.1) of system given inst_{worst:02d} tail: "
      f"{dp.empirical_covar(sys_r, inst_r, 0.1):+.5f}")
print(f"systemic ES over crisis steps: "
      f"{dp.systemic_expected_shortfall(sys_r, ds.regime == 1):+.5f}")

print("\n== one normalized training batch ==")
pairs = [(a, t) for t in ds.splits["train"][:4] for a in range(ds.n_assets)]
batch = ds.batch_arrays(pairs)
for key in ("price", "tokens", "macro", "graph_feats", "y"):
    print(f"{key:12s} {batch[key].shape}")
print("price features are z-scored with train statistics only:",
      f"batch mean {batch['price'].mean():+.3f}")
