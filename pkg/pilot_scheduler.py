"""Pilot: bandit convergence and eta plateau ordering."""
import time

import numpy as np

from pcvstream.scheduler import (
    TwoContextBanditEnv, train_scheduler, select_action,
)

# criterion 9 setup: fixed-table bandit, defaults lr .005 gamma .88 H 96
t0 = time.time()
ratios = []
for seed in range(5):
    env = TwoContextBanditEnv()
    result = train_scheduler(lambda w: TwoContextBanditEnv(), workers=1,
                             epochs=500, seed=seed,
                             actions=("a0", "a1", "a2"))
    # greedy evaluation over fresh contexts
    eval_env = TwoContextBanditEnv()
    rng = np.random.default_rng(1000 + seed)
    state = eval_env.reset(rng)
    total, steps = 0.0, 400
    for _ in range(steps):
        a = select_action(result.net, state, "greedy")
        state, r, done = eval_env.step(a)
        total += r
        if done:
            state = eval_env.reset(rng)
    ratio = (total / steps) / eval_env.oracle_mean_reward()
    ratios.append(ratio)
    print(f"seed {seed}: greedy/oracle = {ratio:.3f} "
          f"final mean reward {result.mean_reward[-50:].mean():.3f}", flush=True)
print(f"mean ratio {np.mean(ratios):.3f}  time {time.time()-t0:.1f}s", flush=True)

# criterion 12: eta plateau ordering
t0 = time.time()
for eta in (0.2, 0.5, 0.8):
    finals = []
    for seed in (0, 1):
        result = train_scheduler(lambda w, e=eta: TwoContextBanditEnv(eta=e),
                                 workers=1, epochs=500, seed=seed,
                                 actions=("a0", "a1", "a2"))
        finals.append(result.mean_reward[-100:].mean())
    env = TwoContextBanditEnv(eta=eta)
    print(f"eta {eta}: final100 {np.mean(finals):.4f} (seeds {finals}) "
          f"oracle {env.oracle_mean_reward():.4f}", flush=True)
print(f"eta sweep time {time.time()-t0:.1f}s", flush=True)
