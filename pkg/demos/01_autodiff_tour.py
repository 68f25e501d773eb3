"""Tour of the tensor core: tape recording, reverse-mode gradients, and Adam.

Run:  python3 demos/01_autodiff_tour.py
"""

import numpy as np

from agg_dst import autodiff as ad
from agg_dst.autodiff import AdamState, Tape, Tensor

rng = np.random.default_rng(0)

# --- forward + backward on a small expression --------------------------------
w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
x = Tensor(rng.standard_normal((5, 3)))

with Tape() as tape:
    hidden = ad.tanh(ad.add(ad.matmul(x, w), b))
    loss = ad.tmean(ad.mul(hidden, hidden))
grads = tape.backward(loss)
print("loss:", loss.item())
print("dl/dw:\n", grads[w])

# --- spot-check one entry against central finite differences -----------------
h = 1e-6


def loss_value():
    return ad.tmean(ad.mul(ad.tanh(ad.add(ad.matmul(x, w), b)),
                           ad.tanh(ad.add(ad.matmul(x, w), b)))).item()


orig = w.data[0, 0]
w.data[0, 0] = orig + h
up = loss_value()
w.data[0, 0] = orig - h
down = loss_value()
w.data[0, 0] = orig
fd = (up - down) / (2 * h)
print(f"finite difference {fd:+.8f} vs tape {grads[w][0, 0]:+.8f}")

# --- softmax stays a distribution even for extreme inputs ---------------------
probes = [Tensor([0.0, 0.0]), Tensor([1000.0, 0.0]), Tensor([1.0, 2.0, 3.0])]
for p in probes:
    y = ad.softmax(p).data
    print("softmax", p.data[:3], "->", np.round(y, 6), "sum", y.sum())

# --- Adam drives a toy least-squares problem to zero --------------------------
theta = Tensor(np.array([4.0, -3.0]), requires_grad=True)
target = np.array([1.0, 2.0])
state = AdamState([theta], lr=0.05)
for step in range(1, 201):
    with Tape() as tape:
        diff = ad.sub(theta, Tensor(target))
        obj = ad.tsum(ad.mul(diff, diff))
    state = ad.adam_step([theta], tape.backward(obj), state)
    if step % 50 == 0:
        print(f"step {step}: objective {obj.item():.3e} theta {np.round(theta.data, 4)}")
print("recovered:", np.round(theta.data, 6), "target:", target)
