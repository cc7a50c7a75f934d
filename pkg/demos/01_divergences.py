"""Divergences and temperature, printed as a short walk-through.

Run:  python3 demos/01_divergences.py
"""
import numpy as np

from deskmt import tensor as T
from deskmt.consist import ConsistConfig, consist_loss, js_divergence, kl_divergence, rdrop_loss

np.set_printoptions(precision=4, suppress=True)

p = np.array([0.7, 0.2, 0.1])
q = np.array([0.1, 0.6, 0.3])
print("p =", p, " q =", q)
print(f"KL(p||q) = {kl_divergence(p, q).item():.5f}   KL(q||p) = {kl_divergence(q, p).item():.5f}")
print(f"JS(p,q)  = {js_divergence(p, q).item():.5f}   JS(q,p)  = {js_divergence(q, p).item():.5f}"
      f"   (ln 2 = {np.log(2):.5f})")

# Disjoint supports: KL blows up against the floor, JS saturates at ln 2.
a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
print(f"\ndisjoint: JS = {js_divergence(a, b).item():.5f}, KL = {kl_divergence(a, b).item():.2f} (log floor)")

# Temperature flattens a distribution; entropy rises with tau.
z = np.array([3.0, 1.0, 0.2, -1.0])
print("\ntau   softmax(z / tau)                  entropy")
for tau in (0.5, 1.0, 2.0, 5.0):
    s = T.softmax_t(z, tau).data
    print(f"{tau:<5} {np.array2string(s):<33} {-(s * np.log(s)).sum():.4f}")

# The consistency term sends gradient to the child only, and vanishes when the two agree.
logits = T.Tensor(np.array([[[2.0, 0.5, -1.0], [0.0, 0.3, 0.1]]]), requires_grad=True)
parent = T.softmax_t(np.array([[[1.0, 1.0, -1.0], [0.0, 0.3, 0.1]]]), 2.0).data
cfg = ConsistConfig(alpha=7.0, tau=2.0, divergence="js")
loss = consist_loss(T.softmax_t(logits, cfg.tau), parent, np.ones((1, 2), bool), cfg)
loss.backward()
print(f"\nL_d = {loss.item():.5f}")
print("d L_d / d logits (second position agrees with the parent, so its row is ~0):")
print(logits.grad[0])

# R-Drop averages both KL directions.
ra, rb = np.array([[[0.5, 0.4, 0.1]]]), np.array([[[0.2, 0.3, 0.5]]])
print(f"\nR-Drop term (weight 1): {rdrop_loss(ra, rb, np.ones((1, 1), bool), 1.0).item():.5f}")
