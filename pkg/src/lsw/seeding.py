import numpy as np


def derive_seed(master: int, *keys: int) -> int:
    """Stable 32-bit child seed for (master, keys...)."""
    return int(np.random.SeedSequence([int(master), *(int(k) for k in keys)]).generate_state(1)[0])
