"""Walkthrough of the tensor core: ops, the tape, gradients, AdamW.

Run from the repository root:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from specdec import tensor as T

# --- tensors and a few ops ------------------------------------------------

a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
b = T.Tensor([[0.5, -1.0], [2.0, 0.0]])
print("a @ b        =", T.matmul(a, b).data.tolist())
print("softmax rows =", T.softmax(a, axis=-1).data.round(3).tolist())

# the two losses used for draft distillation
logits = T.Tensor(np.zeros((1, 4), dtype=np.float32))
target = T.Tensor(np.full((1, 4), 0.25, dtype=np.float32))
print("uniform cross-entropy (= ln 4):", T.cross_entropy(logits, target).item())
x = T.Tensor(np.full((2, 3), 0.5, dtype=np.float32))
y = T.Tensor(np.zeros((2, 3), dtype=np.float32))
print("smooth-l1 at d=0.5 (= 0.125):  ", T.smooth_l1(x, y).item())

# --- reverse-mode gradients -----------------------------------------------

# loss = sum(w * w) has gradient 2w
w = T.Tensor(np.array([1.0, 2.0, -3.0], dtype=np.float32), requires_grad=True)
T.clear_tape()
loss = T.sum_all(T.mul(w, w))
T.backward(loss)
print("\nanalytic grad of sum(w^2):", w.grad.tolist(), "(expect 2w)")

# a 2-layer network checked against central finite differences
rng = np.random.default_rng(0)
w1 = T.Tensor(rng.normal(size=(4, 8)), dtype=np.float64, requires_grad=True)
w2 = T.Tensor(rng.normal(size=(8, 2)), dtype=np.float64, requires_grad=True)
inputs = T.Tensor(rng.normal(size=(5, 4)), dtype=np.float64)


def forward():
    T.clear_tape()
    return T.mean_all(T.silu(T.matmul(T.silu(T.matmul(inputs, w1)), w2)))


loss = forward()
T.backward(loss)
h = 1e-5
flat = w1.data.reshape(-1)
i = 3
orig = flat[i]
flat[i] = orig + h
up = forward().item()
flat[i] = orig - h
down = forward().item()
flat[i] = orig
print(f"w1[{i}]: autodiff {w1.grad.reshape(-1)[i]:+.8f}  "
      f"finite-diff {(up - down) / (2 * h):+.8f}")

# --- optimizer -------------------------------------------------------------

p = T.Tensor(np.array([5.0], dtype=np.float32), requires_grad=True)
opt = T.AdamW([p], lr=0.05, betas=(0.9, 0.95), clip_norm=0.5)
for step in range(300):
    T.clear_tape()
    loss = T.sum_all(T.mul(p, p))
    opt.zero_grad()
    T.backward(loss)
    opt.step()
print("\nAdamW on f(p)=p^2 from 5.0 ->", float(p.data[0]))
