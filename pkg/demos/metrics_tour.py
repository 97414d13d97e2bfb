"""Tour of the metric kernels on small hand-checkable inputs.

Run:  python3 demos/metrics_tour.py
"""

import numpy as np

from routelens import (active_expert_count, cosine_similarity, gini,
                       kendall_tau, lsi, selection_entropy, spearman_rho,
                       topk_overlap, usage_entropy)

print("=== load-balance metrics ===")
uniform = [100] * 128
print(f"usage_entropy(uniform over 128)  = {usage_entropy(uniform):.4f} bits "
      "(= log2 128, perfectly balanced)")
print(f"gini(uniform over 128)           = {gini(uniform):.4f}")

skewed = [0] * 120 + [50, 100, 200, 400, 800, 1600, 3200, 6400]
print(f"usage_entropy(8 hot experts)     = {usage_entropy(skewed):.4f} bits")
print(f"gini(8 hot experts)              = {gini(skewed):.4f}")
print(f"active_expert_count(min_share=0) = {active_expert_count(skewed)}")
print(f"active_expert_count(min_share=0.05) = {active_expert_count(skewed, 0.05)}")

print()
print("=== language specialization ===")
print(f"lsi(0.30, 0.10) = {lsi(0.30, 0.10):+.3f}  (target-leaning)")
print(f"lsi(0.10, 0.30) = {lsi(0.10, 0.30):+.3f}  (reference-leaning)")
print(f"lsi(0.20, 0.00) = {lsi(0.20, 0.00):+.3f}  (fully target-specific)")

print()
print("=== cross-lingual similarity ===")
rng = np.random.Generator(np.random.PCG64(0))
shared = rng.dirichlet(np.ones(64))
noisy = shared + rng.normal(0, 0.002, 64).clip(-shared)
disjoint = np.roll(shared, 32)
print(f"cosine(profile, slightly noisy copy) = {cosine_similarity(shared, noisy):.4f}")
print(f"cosine(profile, rolled by 32)        = {cosine_similarity(shared, disjoint):.4f}")
print(f"topk_overlap(k=8, noisy copy)        = {topk_overlap(shared, noisy, 8):.2f}")
print(f"spearman_rho(noisy copy)             = {spearman_rho(shared, noisy):.4f}")
print(f"kendall_tau(noisy copy)              = {kendall_tau(shared, noisy):.4f}")

print()
print("=== per-token vs aggregate entropy ===")
# Three tokens, each routed confidently to a different expert: per-token
# (selection) entropy is low, yet the aggregate usage distribution is even.
rows = [[0.9, 0.05, 0.05], [0.05, 0.9, 0.05], [0.05, 0.05, 0.9]]
print(f"selection_entropy(3 confident tokens) = {selection_entropy(rows):.4f} bits")
print(f"usage_entropy(their top-1 counts)      = {usage_entropy([1, 1, 1]):.4f} bits")
