"""Time the numba and numpy paths of each row kernel, plus one training step.

Run with ``python3 benchmarks/bench_kernels.py``. The end-to-end step is
timed in a subprocess per backend since the backend is fixed at import
(``STBD_NUMBA=0`` forces numpy).
"""

import os
import subprocess
import sys
import time

import numpy as np

from stbd import _kernels as K


def best_of(fn, *args, repeat=7, number=20):
    fn(*args)  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn(*args)
        times.append((time.perf_counter() - t0) / number)
    return min(times)


def bench_kernels():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4096, 64)).astype(np.float32)
    logits = rng.standard_normal((4096, 35)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    y = K.softmax_rows_numpy(x)
    xhat, rstd, floored = K.layer_norm_rows_numpy(x)
    a = rng.integers(0, 30, 40)
    b = rng.integers(0, 30, 40)
    cases = [
        ("softmax_rows", (x,)),
        ("softmax_rows_backward", (y, g)),
        ("log_softmax_rows", (logits,)),
        ("layer_norm_rows", (x,)),
        ("layer_norm_rows_backward", (g, xhat, rstd, floored)),
        ("edit_distance", (a, b)),
    ]
    print(f"{'kernel':<26} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for name, args in cases:
        t_np = best_of(getattr(K, name + "_numpy"), *args)
        t_nb = best_of(getattr(K, name + "_numba"), *args)
        print(f"{name:<26} {t_np * 1e6:>10.1f} {t_nb * 1e6:>10.1f} {t_np / t_nb:>8.2f}")


STEP_SCRIPT = """
import time, numpy as np
from stbd.data import generate_toy_corpus, fit_cmvn
from stbd.model import Transformer, ModelConfig
from stbd.train import prepare, batch_loss
c = generate_toy_corpus(0, n_utts=200)
items = prepare(c["train"], fit_cmvn(c["train"]))[:12]
m = Transformer(ModelConfig())
m.train()
def step():
    m.zero_grad()
    loss, _ = batch_loss(m, items)
    loss.backward()
step()
t0 = time.perf_counter()
for _ in range(10):
    step()
print((time.perf_counter() - t0) / 10)
"""


def bench_step():
    out = {}
    for label, flag in (("numpy", "0"), ("numba", "1")):
        env = dict(os.environ, STBD_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SCRIPT], env=env, capture_output=True,
                             text=True, check=True)
        out[label] = float(res.stdout.strip().splitlines()[-1])
    print(f"\ntraining step (12 utterances, forward+backward): numpy {out['numpy'] * 1e3:.1f} ms, "
          f"numba {out['numba'] * 1e3:.1f} ms")


if __name__ == "__main__":
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels()
    bench_step()
