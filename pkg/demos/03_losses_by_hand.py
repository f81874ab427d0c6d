"""Recompute both training losses by hand on tiny inputs.

The paired-view contrastive loss is transcribed row by row, the focal
loss pixel by pixel, and both are compared against the library values.
A short gradient-descent loop at the end shows the analytic gradients
point downhill.
"""

import math

import numpy as np

from solarseg import cosine_sim, focal_loss, ntxent_loss


def main():
    rng = np.random.default_rng(0)

    # contrastive: 2 items -> 4 rows, pairs (0,1) and (2,3)
    z = rng.normal(size=(4, 3))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    tau = 0.5
    loss, _ = ntxent_loss(z, tau)
    total = 0.0
    for i in range(4):
        j = i ^ 1  # the other view of the same item
        num = math.exp(cosine_sim(z[i], z[j]) / tau)
        den = sum(math.exp(cosine_sim(z[i], z[k]) / tau) for k in range(4) if k != i)
        term = -math.log(num / den)
        print(f"row {i}: partner {j}, -log softmax = {term:.6f}")
        total += term
    print(f"hand mean {total / 4:.6f} vs ntxent_loss {loss:.6f}")

    # focal: one confident correct pixel barely contributes
    p = np.array([0.9, 0.6, 0.2])
    y = np.array([1.0, 1.0, 0.0])
    loss, _ = focal_loss(p, y, alpha=0.4, gamma=2.0)
    hand = np.mean([
        -0.4 * (1 - 0.9) ** 2 * math.log(0.9),
        -0.4 * (1 - 0.6) ** 2 * math.log(0.6),
        -0.6 * 0.2**2 * math.log(0.8),
    ])
    print(f"\nfocal by hand {hand:.8f} vs focal_loss {loss:.8f}")
    bce_half, _ = focal_loss(p, y, alpha=0.5, gamma=0.0)
    bce = float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())
    print(f"gamma=0, alpha=0.5 equals half BCE: {bce_half:.8f} vs {0.5 * bce:.8f}")

    # analytic gradients descend
    z = rng.normal(size=(8, 4))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    print("\ncontrastive descent on raw embeddings:")
    for step in range(5):
        loss, grad = ntxent_loss(z, tau)
        print(f"  step {step}: loss {loss:.4f}")
        z = z - 0.5 * grad
        z /= np.linalg.norm(z, axis=1, keepdims=True)


if __name__ == "__main__":
    main()
