"""
Sensitivity of the predictive probability to an optimistic prior
==================================================================

The prediction model for recovery gets a proportional-hazards arm effect
with prior Normal(mu, sigma).  Raising mu encodes more optimism about the
investigational agent.  We sweep mu over log(1), log(1.2), log(2), log(3),
log(4) and sigma^2 over 0.1, 0.2, 0.5 and print the PPoS table.

The analysis sampler is reduced and K is small, so this takes a few
minutes; common random numbers keep the cells comparable.
"""

from dataclasses import replace

import numpy as np

from crppos import SamplerConfig, run_scenarios
from crppos.config import DATA_DIR, load_config

cfg = load_config(DATA_DIR / "ispy_like_prior_grid.yaml", K=100)
data = cfg.load_data()
analysis = replace(cfg.ppos.analyses[0],
                   sampler=SamplerConfig(n_chains=2, n_warmup=300, n_draws=500, ess_min=100))
results = run_scenarios(data, cfg.ppos.replace(analyses=(analysis,)), cfg.grid, seed_mode="common")

table = {(r.label["mu"], r.label["sigma"]): r.result.ppos for r in results}
print("HR prior median  " + "  ".join(f"s2={s * s:.1f}" for s in cfg.grid.sigma))
for mu in cfg.grid.mu:
    print(f"{np.exp(mu):15.1f}  " + "  ".join(f"{table[(mu, s)]:6.3f}" for s in cfg.grid.sigma))
