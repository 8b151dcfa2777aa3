"""
Autodiff engine and the training objectives
===========================================

A tour of the float64 reverse-mode engine that everything else is built on,
followed by hand-checkable values of each loss term.
"""

import math

import numpy as np

from moe_erc import tensor as T
from moe_erc.losses import contrastive_loss, focal_loss, kl_consistency
from moe_erc.tensor import Value

# A Value wraps an ndarray; operations record a graph, backward() fills .grad
x = Value(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
y = T.sum_(T.tanh(x) * x)
y.backward()
print("d/dx sum(tanh(x) * x) =", x.grad)

# the same derivative by hand: tanh(x) + x * (1 - tanh(x)^2)
t = np.tanh(x.data)
print("closed form          =", t + x.data * (1 - t ** 2))

# Focal loss down-weights easy examples. gamma=0 is plain cross-entropy
logits = np.array([[math.log(0.9), math.log(0.1)]])
for gamma in (0.0, 1.0, 3.0):
    print(f"focal(gamma={gamma}) at p=0.9:", focal_loss(Value(logits), [0], gamma).item())

# Supervised contrastive loss pulls together speech and text rows that share a label.
# Two utterances with different labels, each modality aligned with itself:
e = np.eye(3)
rows = np.stack([e[0], e[1]])
print("contrastive, aligned pair:", contrastive_loss(Value(rows), Value(rows), [0, 1], tau=1.0).item())
print("expected 4 * (ln(e + 2) - 1) =", 4 * (math.log(math.e + 2) - 1))

# KL consistency pulls each unimodal expert toward the multimodal one
p_m, p_s = np.array([[0.75, 0.25]]), np.array([[0.5, 0.5]])
print("KL(p_m || p_s) + KL(p_m || p_t=p_m):", kl_consistency(Value(p_m), Value(p_s), Value(p_m)).item())

# Non-finite values never propagate silently
try:
    with np.errstate(over="ignore"):
        T.exp(Value(np.array([1000.0])))
except T.NonFiniteError as err:
    print("caught:", err)
