"""
Ablation grid
=============

Every cell trains its own retriever and fuser on the same frozen backbone and
evaluates on the held-out domain. Three axes:

* retrieval policy (learned, cosine, random) x fusion rule (channel prompt,
  token concat, average)
* knowledge-base source: none (bare backbone), pooled, curated (balanced),
  domain-specific
* knowledge-base size: 100%, 50%, 30%, 10%, 1% of the curated base

The same grid is available as ``retrocast ablate``.
"""

import time

from demo_config import demo_config
from retrocast import pipeline

cfg = demo_config()
t0 = time.time()
bench = pipeline.prepare(cfg)
rows = pipeline.run_ablation(bench, pipeline.ablation_cells(cfg))

print(f"{'retrieval':<9} {'fusion':<15} {'kb':<8} {'size':>5} {'entries':>7}  MSE")
for r in rows:
    mse = f"{r['mse']:.4f}" if r["status"] == "ok" else f"skipped: {r['reason']}"
    print(
        f"{r['retrieval_policy']:<9} {r['fusion_policy']:<15} {r['kb_source']:<8} "
        f"{r['kb_fraction']:>5g} {r['kb_size'] if r['kb_size'] is not None else '-':>7}  {mse}"
    )

# Retrieval x fusion as a small matrix.
by = {(r["retrieval_policy"], r["fusion_policy"]): r["mse"] for r in rows if r["kb_source"] == "curated" and r["kb_fraction"] == 1.0}
fusions = ("channel_prompt", "token_concat", "average")
print(f"\n{'':<9}" + "".join(f"{f:>16}" for f in fusions))
for policy in ("learned", "cosine", "random"):
    print(f"{policy:<9}" + "".join(f"{by[(policy, f)]:>16.4f}" for f in fusions))
print(f"\n{time.time() - t0:.0f}s")
