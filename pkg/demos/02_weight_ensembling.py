"""How per-sample loss weights are smoothed over revisits.

Each training sample keeps a (beta, gamma) history in a WeightStore. When the
student is confident about a sample (low normalized entropy), a fresh weight
proposal is blended with the stored one; when it is uncertain, the fresh
proposal wins outright.
"""

import numpy as np

from hkdistill.ensemble import (
    EnsembleConfig,
    WeightPair,
    WeightStore,
    ensemble,
    uncertainty,
)


def main():
    cfg = EnsembleConfig(epsilon=0.5, uncertainty_threshold=0.6)
    store = WeightStore()

    confident = np.array([0.9, 0.05, 0.05])
    unsure = np.array([0.4, 0.35, 0.25])
    print(f"uncertainty(confident) = {uncertainty(confident):.3f}")
    print(f"uncertainty(unsure)    = {uncertainty(unsure):.3f}")

    # a confident sample: noisy proposals get averaged toward their mean
    print("\nconfident sample, noisy proposals around 1.2:")
    rng = np.random.default_rng(0)
    u = uncertainty(confident)
    for t in range(1, 8):
        fresh = WeightPair(1.2 + 0.2 * rng.standard_normal(), 1.0)
        out = ensemble(store, 0, fresh, u, t, cfg)
        print(f"  visit {t}: fresh beta {fresh.beta:+.3f} -> smoothed {out.beta:+.3f}")

    # an uncertain sample: history is ignored, proposals pass through
    print("\nuncertain sample, same proposals pass through unchanged:")
    rng = np.random.default_rng(0)
    u = uncertainty(unsure)
    for t in range(1, 4):
        fresh = WeightPair(1.2 + 0.2 * rng.standard_normal(), 1.0)
        out = ensemble(store, 1, fresh, u, t, cfg)
        print(f"  visit {t}: fresh beta {fresh.beta:+.3f} -> used     {out.beta:+.3f}")


if __name__ == "__main__":
    main()
