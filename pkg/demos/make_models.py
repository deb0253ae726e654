"""Regenerate the JSON models shipped in ``models/``.

    python demos/make_models.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np

from rsgame.generators import birth_death_model, drift_ladder_model, one_state_model
from rsgame.model import LyapunovCertificate
from rsgame.model_io import save_model

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "models")
out.mkdir(parents=True, exist_ok=True)

# ||r|| = 3 < delta / 2 and b = 2 delta keeps the zero drift admissible
save_model(out / "one_state.json", one_state_model([[0.0, 2.0], [3.0, 1.0]]),
           LyapunovCertificate([1.0], 8.0, 16.0, (0,)), name="one-state 2x2 cost game")

# drift 4(1 - 2) = -4 at state 1 and 1 at state 0; b = 3 covers 1 + 2*delta*W(0)
bd_cert = LyapunovCertificate([1.0, 2.0], 1.0, 3.0, (0,))
save_model(out / "birth_death.json", birth_death_model(), bd_cert, name="two-state birth-death")

zero = birth_death_model(cost=np.zeros((2, 2, 2)))
save_model(out / "zero_cost.json", zero, bd_cert, name="birth-death with zero cost")

model, cert = drift_ladder_model(np.random.default_rng(7), 6, (2, 2))
save_model(out / "ladder6.json", model, cert, name="six-state drift ladder")

model, cert = drift_ladder_model(np.random.default_rng(11), 10, (3, 3))
save_model(out / "ladder10_3x3.json", model, cert, name="ten-state drift ladder, 3x3 actions")

for p in sorted(out.glob("*.json")):
    print(p)
