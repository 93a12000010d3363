"""Run (or load) every cached training experiment used by the acceptance suite."""

import logging
import sys
import time

from dasnn.experiments import run_degradation, run_two_phase, cached_run, mnist_sanity_config

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
which = sys.argv[1:] or ["degradation", "sanity", "two_phase"]
for name in which:
    t = time.time()
    if name == "degradation":
        for k, v in sorted(run_degradation().items()):
            print(k, round(v, 4))
    elif name == "sanity":
        h = cached_run("mnist_sanity", mnist_sanity_config())
        print("test accuracy", [r["test_accuracy"] for r in h])
    elif name == "two_phase":
        h1, h2 = run_two_phase()
        print("phase1", [r["test_accuracy"] for r in h1], "phase2", [r["test_accuracy"] for r in h2])
    print(name, "done in", round(time.time() - t), "s", flush=True)
