"""Fine-grained experts and cluster gates, from the inside.

Shows the parameter-count identity behind expert splitting, how a gate
scores and selects experts, and that only the selected experts ever run.
"""

import numpy as np

from moerec import Rng, Tensor, decompose_experts, moe_forward, route, top_k_select
from moerec.moe import ExpertBank, GateRouter, expert_weight_count

# Splitting 6 experts of width 4096 by a factor of 2 yields 12 experts of
# width 2048 with the exact same number of weight parameters.
cfg = decompose_experts(6, 4096, 2, active=2, gates=3)
print(f"{cfg.base_experts} experts of width {cfg.base_hidden} ->",
      f"{cfg.expert_count} experts of width {cfg.expert_hidden}")
for model_dim in (64, 4096):
    before = expert_weight_count(model_dim, 6, 4096)
    after = expert_weight_count(model_dim, 12, 2048)
    print(f"  model_dim {model_dim}: {before} == {after}: {before == after}")

# A desk-sized bank: each gate owns a routing matrix over the shared bank.
cfg = decompose_experts(3, 16, 2, active=2, gates=3)
bank = ExpertBank(8, cfg, Rng(0))
router = GateRouter(8, cfg, Rng(1))
x = Tensor(Rng(2).normal(8))

for gate in range(3):
    scores = route(router, gate, x)
    picked = top_k_select(scores.data, 2)
    print(f"gate {gate}: scores {scores.data.round(3)} -> experts {picked}")

# Only the top-k experts are evaluated; the counter proves it.
bank.eval_count = 0
y = moe_forward(bank, router, 0, x, k=2)
print(f"expert evaluations for one call with k=2: {bank.eval_count}")

# Raw softmax scores weight the selected outputs (no renormalization), so
# with identical experts the output factorizes through the score mass.
for e in bank.experts[1:]:
    for part in ("w1", "b1", "w2", "b2"):
        e[part].data[...] = bank.experts[0][part].data
scores = route(router, 0, x).data
picked = top_k_select(scores, 2)
single = bank.run(0, x.reshape(1, -1)).data[0]
combined = moe_forward(bank, router, 0, x, k=2).data
print("factorization holds:",
      np.allclose(combined, scores[picked].sum() * single))

# Selection is invariant to shifting every routing logit by a constant.
logits = Rng(5).normal(6)
print("shift-invariant selection:",
      np.array_equal(top_k_select(logits, 3), top_k_select(logits + 1e6, 3)))
