"""Token-level collaboration and what each method costs.

Two scripted models disagree on the next token. Averaging their
distributions picks a token neither would pick greedily, and contrasting a
strong model against a weak one sharpens the strong model's preference.
The last part prints the training and inference FLOPs table for a pool of
three 7B-parameter models.

    python3 demos/logits_and_cost.py
"""
from modelcollab.core import GenerationParams, MockBackend, ModelDescriptor, ModelPool, TokenDistribution
from modelcollab.costmodel import CostParams, cost_table, format_cost_table
from modelcollab.logit import ContrastiveConfig, contrast_distributions, fused_decode
from modelcollab.methods import METHODS

VOCAB = ["<eos>", "red", "green", "blue"]


def model(mid, first):
    script = {"vocab": VOCAB, "eos_id": 0, "distributions": {"@0": first, "*": [1, 0, 0, 0]}}
    return MockBackend(ModelDescriptor(mid, vocab_group="colors"), script)


def main():
    a = model("a", [0.0, 0.50, 0.45, 0.05])
    b = model("b", [0.0, 0.05, 0.45, 0.50])
    greedy = GenerationParams(max_new_tokens=4, temperature=0.0)
    for m in (a, b):
        print(f"{m.id} alone says {m.generate('pick a colour', greedy).text!r}")
    fused = fused_decode(ModelPool([a, b]), "pick a colour", greedy)
    print(f"averaged distributions say {fused.output.text!r}")

    strong = TokenDistribution("colors", [0.0, 0.6, 0.3, 0.1])
    weak = TokenDistribution("colors", [0.0, 0.4, 0.4, 0.2])
    sharpened = contrast_distributions([strong, weak], ContrastiveConfig(k=1, alpha=1.0))
    print("contrasted:", [round(float(p), 3) for p in sharpened.probs])

    p = CostParams(D=1000, m=512, k=[7e9, 7e9, 8e9], r=2, patch=16, G=1, s=4, f=2, k_r=1e9, k_s=1e9, k_f=7e9)
    print()
    print(format_cost_table(cost_table(list(METHODS), p)))


if __name__ == "__main__":
    main()
