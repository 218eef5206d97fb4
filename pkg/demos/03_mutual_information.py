"""
Estimating mutual information with a trained critic
===================================================

Two correlated Gaussians with correlation rho share
-0.5 * log(1 - rho^2) nats of information.  A small discriminator sees
matched pairs (x, y) and mismatched pairs (x, shuffled y).  Training it to
tell them apart turns its scores into an estimate of that number.

Both bounds are tried: MINE (Donsker-Varadhan) and InfoNCE.  Runs in under
half a minute; lower STEPS for a quicker, rougher look.
"""

import numpy as np
from lim import numcore as nc
from lim.objectives import discriminate, init_discriminator, lim_objective, mine_loss
from lim.trainer import OptimState, rmsprop_step

STEPS = 1000
rho = 0.8
print("analytic MI:", -0.5 * np.log(1 - rho**2))


def pairs(rng, n):
    x = rng.standard_normal(n)
    y = rho * x + np.sqrt(1 - rho**2) * rng.standard_normal(n)
    return x[:, None], y[:, None]


def train(loss, batch):
    rng = np.random.default_rng(0)
    critic = init_discriminator(1, 64, rng)
    state = OptimState()
    for step in range(STEPS):
        x, y = pairs(rng, batch)
        # InfoNCE uses the other rows of the batch as its negatives
        y_rnd = y[rng.permutation(batch)] if loss == "mine" else y
        obj, stats = lim_objective(loss, x, y, y_rnd, critic)
        for t in critic.values():
            t.grad = None
        nc.backward(obj)
        rmsprop_step(critic, {k: t.grad for k, t in critic.items()}, state, step)
        if step % 250 == 0:
            # pair accuracy only means something when there is one shuffled negative per row
            extra = f"  pair accuracy {stats['accuracy']:.2f}" if loss == "mine" else ""
            print(f"  {loss} step {step:4d}  objective {obj.item():+.3f}{extra}")
    return critic, rng


critic, rng = train("mine", 512)
x, y = pairs(rng, 20000)
with nc.no_grad():
    est = mine_loss(discriminate(x, y, critic), discriminate(x, y[rng.permutation(20000)], critic)).item()
print("MINE estimate:", round(est, 4))

# InfoNCE can never report more than log K, here log 128 = 4.85 nats
K = 128
critic, rng = train("nce", K)
with nc.no_grad():
    nce = np.mean([lim_objective("nce", x, y, y, critic)[0].item() for x, y in (pairs(rng, K) for _ in range(20))])
print("InfoNCE estimate (L + log K), 20 batches:", round(nce + np.log(K), 4))
