"""The dual-gate mixture of experts on a toy sequence.

Each expert picks its top-K tokens by softmax affinity. A token's output
mixes the experts that picked it, once through the positive gate and once
through the negative gate, and the block returns sigmoid(positive - negative).
"""

import numpy as np

from prsroute.router import dual_gate_moe_layer, token_selection_gate

rng = np.random.default_rng(1)
n, d, k, l, K = 6, 8, 3, 2, 2
T = rng.normal(size=(n, d))            # six token vectors
E_pos, E_neg = rng.normal(size=(k, d)), rng.normal(size=(k, d))

gate = token_selection_gate(T, E_pos, K)
print("affinity (tokens x experts):\n", gate.affinity.round(3))
print("mask:\n", gate.mask.astype(int))
for i, chosen in enumerate(gate.selected):
    print(f"expert {i} keeps tokens {chosen}")

# tokens no expert picked contribute nothing, so their output is exactly 0.5
experts = [(rng.normal(size=(d, l)), rng.normal(size=(d, l)), rng.normal(size=(l, d)))
           for _ in range(k)]
H = dual_gate_moe_layer(T, (E_pos, E_neg), experts, K)
print("output rows (first 4 dims):\n", H[:, :4].round(3))

# swapping the two gates mirrors the output around 0.5
swapped = [(Pn, Pp, S) for Pp, Pn, S in experts]
H2 = dual_gate_moe_layer(T, (E_neg, E_pos), swapped, K)
print("max |H + H_swapped - 1| =", np.abs(H + H2 - 1).max())
