"""How each mode reacts to transforms it does and does not claim.

Untrained models are enough: the guarantees are architectural.
"""
import numpy as np

from egif.audit import CLAIMS, audit, default_probe
from egif.implicitnet import MODES, ModelConfig, init_params

X, q = default_probe(0)
print(f"{'mode':<6}" + "".join(f"{c:>12}" for c in CLAIMS["sim"]))
for mode in MODES:
    theta = init_params(ModelConfig(mode=mode), np.random.default_rng(1))
    devs = {r.cls: r.max_abs_dev for r in audit(theta, X, q, n_transforms=10)}
    print(f"{mode:<6}" + "".join(f"{devs[c]:>12.1e}" for c in CLAIMS["sim"]))
