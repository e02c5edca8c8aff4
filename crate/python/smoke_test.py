"""Smoke test for the imoc_py extension module.

Build and run from the repository root:

    cargo build --release -p imoc-py --features extension-module
    cp target/release/libimoc_py.so python/imoc_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import imoc_py

SHORT_RUN = """
seed = 0
total_env_steps = 4800
eval_interval = 2400
eval_episodes = 2

[agent]
n_actors = 4
rollout_len = 10
n_options = 2
"""


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok: {msg}")


def main():
    check(imoc_py.select_option([0.5, 0.4], [0.9, 0.1], 0.5, 0, True) == 1, "uncertainty bonus picks the rare option")
    check(abs(imoc_py.ugoae([0, 0, 2, 2], [1, 1], 1, 3, 0.99, 0.95) - 5.3734) < 1e-3, "ugoae hand example")
    check(imoc_py.clipped_beta_term(0.3, 0.3, 0.2, 0.5, 2.0) == (0.0, 1.0), "clipped term at the center")
    check(imoc_py.uoae_advantage([1.0, 1.0, 1.0], 1, 0.0, 0.0, 0.0, 0.0, 1.0) >= 1.0, "uoae keeps the realized reward")

    loss, grads = imoc_py.termination_loss(0, 1, [2, 3, 4], [0.0, 0.0, 0.0], [-1.0, -0.5, -0.1])
    check(len(grads) == 3 and grads[-1] == 0.0 and math.isfinite(loss), "termination loss skips the final arrival")

    mi = imoc_py.exact_mi(n_states=5, n_options=2, seed=1)
    check(mi["mi"] >= 0.0 and len(mi["gradient"]) == 2, "exact conditional MI and gradient")

    agent = imoc_py.Agent(SHORT_RUN, seed=3)
    stats = agent.train_iteration()
    check(stats["env_steps"] == 40 and len(stats["option_usage"]) == 2, "one training iteration")
    ev = agent.evaluate(episodes=2, seed=1)
    check(len(ev["returns"]) == 2, "evaluation episodes")
    viz = agent.visualization(episodes=2)
    check(all(0.0 <= c["beta"] <= 1.0 for o in viz["options"] for c in o["cells"]), "visualization β in [0, 1]")

    clone = imoc_py.Agent.from_checkpoint(agent.checkpoint())
    check(clone.train_iteration() == agent.train_iteration(), "checkpoint resumes bit-exactly")

    out = imoc_py.run_training(SHORT_RUN, seed=0)
    check([r["env_step"] for r in out["rows"]] == [2400, 4800], "run_training evaluates on schedule")
    print(json.dumps({"final_return": out["final_return"]}))


if __name__ == "__main__":
    main()
