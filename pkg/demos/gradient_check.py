"""
Checking every backward pass against finite differences
=======================================================

Each hand-written backward is compared with central differences
(f(x + eps) - f(x - eps)) / 2 eps at randomly chosen coordinates. The same
suite is available as ``scaleaware gradcheck --scope all``.
"""

import time

from scaleaware import gradcheck as G

t0 = time.perf_counter()
for scope in ("layer", "sam", "network"):
    print(f"-- {scope}")
    for result in G.run_scope(scope, seed=0):
        print(result.line())
print(f"done in {time.perf_counter() - t0:.1f}s")
