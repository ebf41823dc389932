"""Weight-level collaboration on tiny on-disk checkpoints.

The bundled toy checkpoints share one architecture: a base model and
fine-tunes specialised for math and history. We merge them directly, then
run the configured merge methods and compare them with a single-model run.

    python3 demos/weight_merging.py
"""
import tempfile
from pathlib import Path

import numpy as np

from modelcollab.runner import RunConfig, run_experiment
from modelcollab.tensors import tensor_load
from modelcollab.weight import dare_ties, expo, ties_merge

DATA = Path(__file__).resolve().parents[1] / "src" / "modelcollab" / "data"


def main():
    base = tensor_load(DATA / "weights" / "toy_base.safetensors")
    math_w = tensor_load(DATA / "weights" / "toy_math_w.safetensors")
    hist_w = tensor_load(DATA / "weights" / "toy_history_w.safetensors")
    print("tensors:", base.signature())

    # Merging deltas directly, outside any run.
    deltas = [math_w - base, hist_w - base]
    merged = base + ties_merge(deltas)
    pruned = dare_ties(base, [math_w, hist_w], p=0.3, seed=0)
    print(f"TIES moved the base by {np.linalg.norm((merged - base).to_vector()):.3f}")
    print(f"DARE+TIES moved the base by {np.linalg.norm((pruned - base).to_vector()):.3f}")
    extrapolated = expo([math_w, base], [1.0, 0.0], k=1, alpha=0.5)
    print(f"ExPO lands {np.linalg.norm((extrapolated - math_w).to_vector()):.3f} beyond the math checkpoint")

    # The same merges as configured runs, scored on the toy test split.
    out = Path(tempfile.mkdtemp(prefix="modelcollab-demo-"))
    for name in ("single_model", "dare_ties", "greedy_soup", "model_swarms", "expo"):
        res = run_experiment(RunConfig.load(DATA / "configs" / f"{name}.json", output_dir=out))
        s = res.manifest["summary"]
        print(f"{s['label']:<28} {s['score']:.2f}")


if __name__ == "__main__":
    main()
